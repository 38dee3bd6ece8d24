import os
import json
import logging
from datetime import datetime
from typing import Dict, List, Optional

import sqlalchemy as sa
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# Database setup: FVLAB_DATABASE_URL, or a SQLite file chosen by the caller
DB_FILENAME = "results.db"
engine = None
SessionLocal = None
Base = declarative_base()


# Database Models
class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = sa.Column(sa.Integer, primary_key=True, index=True)
    config_hash = sa.Column(sa.String(32), index=True)
    dataset = sa.Column(sa.String(32), index=True)
    architecture = sa.Column(sa.String(32), index=True)
    run_idx = sa.Column(sa.Integer, default=0)
    seed = sa.Column(sa.Integer)
    status = sa.Column(sa.String(20), default="running")  # 'running', 'finished', 'failed'
    detail = sa.Column(sa.Text, nullable=True)
    config_json = sa.Column(sa.Text)
    started_at = sa.Column(sa.DateTime, default=datetime.utcnow)
    finished_at = sa.Column(sa.DateTime, nullable=True)


class EvalRecord(Base):
    __tablename__ = "eval_records"

    id = sa.Column(sa.Integer, primary_key=True, index=True)
    run_id = sa.Column(sa.Integer, sa.ForeignKey("experiment_runs.id"), index=True)
    k = sa.Column(sa.String(8))  # '0'..'3' or 'avg'
    nll_bpd = sa.Column(sa.Float, nullable=True)  # empty for FCN
    mse_min = sa.Column(sa.Float)
    n_importance_samples = sa.Column(sa.Integer)
    created_at = sa.Column(sa.DateTime, default=datetime.utcnow)


# Database functions
def init_database(database_url: Optional[str] = None, fallback_dir: str = "."):
    """Bind the engine and create tables; FVLAB_DATABASE_URL wins over the SQLite fallback"""
    global engine, SessionLocal
    url = database_url or os.environ.get("FVLAB_DATABASE_URL")
    if not url:
        os.makedirs(fallback_dir, exist_ok=True)
        url = f"sqlite:///{os.path.join(os.path.abspath(fallback_dir), DB_FILENAME)}"

    if url.startswith("sqlite"):
        engine = sa.create_engine(url)
    else:
        engine = sa.create_engine(
            url,
            pool_pre_ping=True,  # Enable connection health checks
            pool_recycle=3600,   # Recycle connections after 1 hour
            pool_size=5,
            max_overflow=10,
            connect_args={"connect_timeout": 30}
        )
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    Base.metadata.create_all(bind=engine)
    return url


def get_db():
    """Get database session with retry logic"""
    if SessionLocal is None:
        raise RuntimeError("results database not initialized")
    max_retries = 3
    for attempt in range(max_retries):
        db = None
        try:
            db = SessionLocal()
            # Test the connection
            db.execute(sa.text("SELECT 1"))
            return db
        except Exception as e:
            if attempt == max_retries - 1:
                raise e
            logger.warning(f"Database connection attempt {attempt + 1} failed: {e}")
            if db:
                db.close()


def close_db(db):
    """Close database session safely"""
    try:
        if db:
            db.close()
    except Exception as e:
        logger.warning(f"Error closing database connection: {e}")


def safe_db_operation(operation_func, *args, **kwargs):
    """Execute database operation with automatic retry; failures degrade to a warning"""
    max_retries = 3
    for attempt in range(max_retries):
        db = None
        try:
            db = get_db()
            return operation_func(db, *args, **kwargs)
        except Exception as e:
            if attempt == max_retries - 1:
                logger.warning(f"⚠️ Database operation failed after {max_retries} attempts, not recorded: {e}")
                return False
            logger.warning(f"Database operation attempt {attempt + 1} failed: {e}")
        finally:
            close_db(db)


def _record_run_started_impl(db, config: Dict, config_hash: str, architecture: str, run_idx: int, seed: int):
    run = ExperimentRun(
        config_hash=config_hash,
        dataset=config.get("dataset"),
        architecture=architecture,
        run_idx=run_idx,
        seed=seed,
        config_json=json.dumps(config, sort_keys=True, default=str)
    )
    db.add(run)
    db.commit()
    return run.id


def record_run_started(config: Dict, config_hash: str, architecture: str, run_idx: int, seed: int):
    """
    Register a training run

    Returns:
        int: Run id, or False when the store is unavailable
    """
    return safe_db_operation(_record_run_started_impl, config, config_hash, architecture, run_idx, seed)


def _record_run_finished_impl(db, run_id: int, status: str, detail: Optional[str]):
    run = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
    if not run:
        return False
    run.status = status
    run.detail = detail
    run.finished_at = datetime.utcnow()
    db.commit()
    return True


def record_run_finished(run_id, status: str = "finished", detail: Optional[str] = None):
    if not run_id:
        return False
    return safe_db_operation(_record_run_finished_impl, run_id, status, detail)


def _save_eval_report_impl(db, run_id: int, report):
    for key, mse in report.mse_min.items():
        db.add(EvalRecord(
            run_id=run_id,
            k=key,
            nll_bpd=report.nll_bpd.get(key),
            mse_min=mse,
            n_importance_samples=report.n_importance_samples
        ))
    db.commit()
    return True


def save_eval_report(run_id, report):
    """
    Store the per-K cells of an EvalReport

    Args:
        run_id (int): Run the report belongs to
        report (EvalReport): Single-run evaluation report

    Returns:
        bool: Success status
    """
    if not run_id:
        return False
    return safe_db_operation(_save_eval_report_impl, run_id, report)


def _get_run_history_impl(db, dataset: Optional[str], limit: int):
    query = db.query(ExperimentRun)
    if dataset:
        query = query.filter(ExperimentRun.dataset == dataset)
    runs = query.order_by(ExperimentRun.started_at.desc()).limit(limit).all()

    result = []
    for run in runs:
        records = db.query(EvalRecord).filter(EvalRecord.run_id == run.id).all()
        result.append({
            'id': run.id,
            'architecture': run.architecture,
            'dataset': run.dataset,
            'run_idx': run.run_idx,
            'seed': run.seed,
            'status': run.status,
            'started_at': run.started_at,
            'finished_at': run.finished_at,
            'metrics': {r.k: {'nll_bpd': r.nll_bpd, 'mse_min': r.mse_min} for r in records}
        })
    return result


def get_run_history(dataset: Optional[str] = None, limit: int = 20) -> List[Dict]:
    """
    Most recent runs with their evaluation cells

    Args:
        dataset (str): Restrict to one dataset id
        limit (int): Number of runs to return

    Returns:
        list: Run records
    """
    result = safe_db_operation(_get_run_history_impl, dataset, limit)
    return result if result else []
