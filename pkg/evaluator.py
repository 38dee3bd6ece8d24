"""
Evaluation metrics and result tables.

NLL is estimated by importance sampling with the hierarchical posterior as
proposal and reported in bits per dimension:
    BPD = -log p(y|x) / (D * ln 2),  D = C * H * W,
with log p(y|x) = logsumexp_s(log w_s) - log S accumulated in float64.
The same formula is applied to every model, with Bernoulli likelihoods
scored directly on the [0, 1] targets.

MSE-min is the smallest per-image mean squared error over S prior samples.
"""
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from errors import ReportError

logger = logging.getLogger(__name__)

K_VALUES = (0, 1, 2, 3)
COLUMN_KEYS = [str(k) for k in K_VALUES] + ['avg']
ARCHITECTURES = ('FCN', 'FCN+S', 'CVAE', 'CVAE+S', 'FusionVAE')
# tables show both metrics in units of 1e-2
TABLE_SCALE = 100.0


@dataclass
class ImportanceEstimate:
    """Per-image importance-sampling results over the finite part of a batch"""
    log_likelihood: np.ndarray
    stderr: np.ndarray
    bpd: np.ndarray
    n_samples: int
    excluded: int = 0

    @property
    def mean_bpd(self) -> float:
        return float(self.bpd.mean()) if self.bpd.size else float('nan')


def log_mean_exp(log_w: torch.Tensor) -> torch.Tensor:
    """log (1/S sum_s exp(log_w_s)) along dim 0, in float64"""
    log_w = log_w.double()
    return torch.logsumexp(log_w, dim=0) - math.log(log_w.size(0))


def importance_stderr(log_w: torch.Tensor) -> torch.Tensor:
    """Delta-method standard error of log(mean w) from the S weights"""
    log_w = log_w.double()
    S = log_w.size(0)
    if S < 2:
        return torch.full(log_w.shape[1:], float('inf'), dtype=torch.float64)
    w = torch.exp(log_w - log_w.max(dim=0, keepdim=True).values)
    return w.std(dim=0, unbiased=True) / (math.sqrt(S) * w.mean(dim=0))


def nll_bpd(model, contexts: Sequence[torch.Tensor], target: torch.Tensor, n_samples: int,
            chunk_size: Optional[int] = None) -> ImportanceEstimate:
    """
    Importance-weighted NLL of a batch of targets given their contexts.

    `model` must provide importance_log_weights(contexts, target, S) -> [S, B].
    Images whose weights are non-finite are dropped and counted.
    """
    if n_samples < 1:
        raise ValueError("importance sampling needs S >= 1")
    chunk_size = chunk_size or n_samples
    pieces = []
    remaining = n_samples
    while remaining > 0:
        step = min(chunk_size, remaining)
        pieces.append(model.importance_log_weights(contexts, target, step).double().cpu())
        remaining -= step
    log_w = torch.cat(pieces, dim=0)

    finite = torch.isfinite(log_w).all(dim=0)
    excluded = int((~finite).sum())
    if excluded:
        logger.warning(f"⚠️ {excluded}/{finite.numel()} images have non-finite importance weights, excluded")
    log_w = log_w[:, finite]

    dims = target[0].numel()
    log_p = log_mean_exp(log_w) if log_w.size(1) else torch.zeros(0, dtype=torch.float64)
    stderr = importance_stderr(log_w) if log_w.size(1) else torch.zeros(0, dtype=torch.float64)
    bpd = -log_p / (dims * math.log(2.0))
    return ImportanceEstimate(log_p.numpy(), stderr.numpy(), bpd.numpy(), n_samples, excluded)


def mse_min_from_samples(samples: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """samples [S, B, C, H, W], target [B, C, H, W] -> min over S of per-image MSE, [B]"""
    errors = ((samples - target.unsqueeze(0)) ** 2).flatten(2).mean(dim=2)
    return errors.min(dim=0).values


def mse_min(model, contexts: Sequence[torch.Tensor], target: torch.Tensor, n_samples: int) -> torch.Tensor:
    if n_samples < 1:
        raise ValueError("MSE-min needs S >= 1")
    samples = model.sample(contexts, n_samples, batch_size=target.size(0))
    return mse_min_from_samples(samples, target)


@dataclass
class EvalReport:
    """Per-K and average metrics; std dicts are present only for multi-run aggregates"""
    architecture: str
    dataset: str
    nll_bpd: Dict[str, Optional[float]]
    mse_min: Dict[str, float]
    n_importance_samples: int
    n_mse_samples: int
    n_runs: int = 1
    nll_std: Optional[Dict[str, Optional[float]]] = None
    mse_std: Optional[Dict[str, float]] = None
    excluded: int = 0
    config_hash: str = ''
    annotations: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def config_hash(config: Dict) -> str:
    """Short stable hash of a configuration, ignoring run-specific keys"""
    stable = {k: v for k, v in config.items() if k not in ('seed', 'run_idx', 'out_dir')}
    return hashlib.sha256(json.dumps(stable, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _with_average(per_k: Dict[str, Optional[float]]) -> Dict[str, Optional[float]]:
    values = [per_k[k] for k in per_k if k != 'avg']
    if any(v is None for v in values):
        return {**per_k, 'avg': None}
    return {**per_k, 'avg': float(np.mean(values))}


def build_report(architecture: str, dataset: str, nll: Dict[int, Optional[float]], mse: Dict[int, float],
                 n_importance_samples: int, n_mse_samples: int, excluded: int = 0,
                 config_hash_value: str = '') -> EvalReport:
    nll_cells = _with_average({str(k): (None if v is None else float(v)) for k, v in sorted(nll.items())})
    mse_cells = _with_average({str(k): float(v) for k, v in sorted(mse.items())})
    return EvalReport(architecture, dataset, nll_cells, mse_cells, n_importance_samples, n_mse_samples,
                      excluded=excluded, config_hash=config_hash_value)


def _truncate(contexts: torch.Tensor, k: int) -> List[torch.Tensor]:
    return [contexts[:, i] for i in range(k)]


def evaluate_model(model, dataset: Dataset, architecture: str, dataset_name: str, n_importance_samples: int,
                   n_mse_samples: Optional[int] = None, batch_size: int = 16, k_values: Sequence[int] = K_VALUES,
                   device: str = 'cpu', seed: int = 0, config_hash_value: str = '',
                   chunk_size: Optional[int] = None) -> EvalReport:
    """
    Score every sample at every K by truncating its context list.

    FCN models have no likelihood; their NLL cells stay empty.
    """
    n_mse_samples = n_mse_samples or n_importance_samples
    has_likelihood = hasattr(model, 'importance_log_weights')
    model.eval()
    torch.manual_seed(seed)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)

    nll: Dict[int, Optional[float]] = {}
    mse: Dict[int, float] = {}
    excluded = 0
    for k in k_values:
        bpd_values, mse_values = [], []
        for target, contexts in tqdm(loader, desc=f"{architecture} K={k}", leave=False):
            target, contexts = target.to(device), contexts.to(device)
            ctx = _truncate(contexts, k)
            if has_likelihood:
                estimate = nll_bpd(model, ctx, target, n_importance_samples, chunk_size)
                bpd_values.extend(estimate.bpd.tolist())
                excluded += estimate.excluded
            mse_values.extend(mse_min(model, ctx, target, n_mse_samples).cpu().tolist())
        nll[k] = float(np.mean(bpd_values)) if has_likelihood and bpd_values else None
        mse[k] = float(np.mean(mse_values))
        logger.info(f"{architecture} K={k}: NLL={nll[k]} BPD, MSE-min={mse[k]:.5f}")

    return build_report(architecture, dataset_name, nll, mse, n_importance_samples, n_mse_samples,
                        excluded, config_hash_value)


@torch.no_grad()
def collect_grid_samples(model, dataset: Dataset, n_items: int, n_samples: int, k: int,
                         device: str = 'cpu', seed: int = 0, reconstruct: bool = False) -> Dict[str, np.ndarray]:
    """Inputs, targets and model outputs for figure grids; reconstruct feeds the target to the posterior"""
    model.eval()
    torch.manual_seed(seed)
    n_items = min(n_items, len(dataset))
    targets = torch.stack([dataset[i][0] for i in range(n_items)]).to(device)
    contexts = torch.stack([dataset[i][1] for i in range(n_items)]).to(device)
    ctx = _truncate(contexts, k)
    if reconstruct:
        outputs = torch.stack([model.reconstruct(ctx, targets) for _ in range(n_samples)])
    else:
        outputs = model.sample(ctx, n_samples, batch_size=n_items)
    return {
        'inputs': contexts[:, :k].cpu().numpy(),
        'targets': targets.cpu().numpy(),
        'samples': outputs.transpose(0, 1).cpu().numpy(),
    }


def write_samples_npz(model, dataset: Dataset, path: str, n_items: int, n_samples: int,
                      k_values: Sequence[int] = K_VALUES, device: str = 'cpu', seed: int = 0) -> str:
    """Store grid material for every K so figures can be rebuilt without the model"""
    arrays = {}
    for k in k_values:
        grid = collect_grid_samples(model, dataset, n_items, n_samples, k, device=device, seed=seed)
        arrays[f"inputs_k{k}"] = grid['inputs']
        arrays[f"samples_k{k}"] = grid['samples']
        arrays['targets'] = grid['targets']
    np.savez_compressed(path, **arrays)
    return path


def load_samples_npz(path: str) -> Dict[int, Dict[str, np.ndarray]]:
    """{k: {'inputs', 'targets', 'samples'}} from a file written by write_samples_npz"""
    with np.load(path) as data:
        ks = sorted(int(name[len('samples_k'):]) for name in data.files if name.startswith('samples_k'))
        return {k: {'inputs': data[f"inputs_k{k}"], 'targets': data['targets'], 'samples': data[f"samples_k{k}"]}
                for k in ks}


def aggregate_runs(reports: Sequence[EvalReport]) -> Tuple[EvalReport, EvalReport]:
    """
    Mean +- sample std per cell across runs, plus the best run (lowest
    average NLL, or lowest average MSE-min when there is no NLL).
    """
    reports = list(reports)
    if not reports:
        raise ReportError("no reports to aggregate")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ReportError(f"reports come from different configurations: {sorted(hashes)}")

    def combine(cells: List[Dict]) -> Tuple[Dict, Optional[Dict]]:
        means, stds = {}, {}
        for key in cells[0]:
            values = [c[key] for c in cells]
            if any(v is None for v in values):
                means[key], stds[key] = None, None
                continue
            means[key] = float(np.mean(values))
            stds[key] = float(np.std(values, ddof=1)) if len(values) > 1 else None
        return means, (stds if len(cells) > 1 else None)

    first = reports[0]
    nll_mean, nll_std = combine([r.nll_bpd for r in reports])
    mse_mean, mse_std = combine([r.mse_min for r in reports])
    annotations = sorted({a for r in reports for a in r.annotations})
    aggregate = EvalReport(first.architecture, first.dataset, nll_mean, mse_mean, first.n_importance_samples,
                           first.n_mse_samples, n_runs=len(reports), nll_std=nll_std, mse_std=mse_std,
                           excluded=sum(r.excluded for r in reports), config_hash=first.config_hash,
                           annotations=annotations)

    def rank(r: EvalReport) -> float:
        avg = r.nll_bpd.get('avg')
        return avg if avg is not None else r.mse_min['avg']

    return aggregate, min(reports, key=rank)


# --- tables ---------------------------------------------------------------

def _cell(value: Optional[float], std: Optional[float]) -> str:
    if value is None:
        return 'n/a'
    text = f"{value * TABLE_SCALE:.2f}"
    if std is not None:
        text += f" ± {std * TABLE_SCALE:.2f}"
    return text


def table_header(first_column: str = 'Architecture') -> List[str]:
    return ([first_column] + [f"NLL {k}" for k in COLUMN_KEYS] + [f"MSE {k}" for k in COLUMN_KEYS])


def results_table(reports: Dict[str, EvalReport], with_std: bool = False,
                  order: Sequence[str] = ARCHITECTURES, first_column: str = 'Architecture') -> List[List[str]]:
    """One row per entry of `order` present in reports: NLL 0-3, avg, MSE 0-3, avg (x1e-2)"""
    rows = [table_header(first_column)]
    for arch in order:
        if arch not in reports:
            continue
        r = reports[arch]
        nll_std = r.nll_std if with_std and r.nll_std else {}
        mse_std = r.mse_std if with_std and r.mse_std else {}
        row = [arch]
        row += [_cell(r.nll_bpd.get(k), nll_std.get(k)) for k in COLUMN_KEYS]
        row += [_cell(r.mse_min.get(k), mse_std.get(k)) for k in COLUMN_KEYS]
        rows.append(row)
    return rows


def table_to_csv(rows: List[List[str]]) -> str:
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator='\n').writerows(rows)
    return buffer.getvalue()


def table_to_markdown(rows: List[List[str]]) -> str:
    lines = ['| ' + ' | '.join(rows[0]) + ' |', '|' + '---|' * len(rows[0])]
    lines += ['| ' + ' | '.join(row) + ' |' for row in rows[1:]]
    return '\n'.join(lines) + '\n'
