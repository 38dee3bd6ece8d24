"""
Machine-readable training metrics: one JSON record per optimizer step in metrics.jsonl.
"""
import json
import logging
import os
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.jsonl'


class MetricsLogger:
    def __init__(self, out_dir: str, filename: str = METRICS_FILE, tags: Optional[Dict] = None):
        """
        Append-only metrics stream

        Args:
            out_dir: Run output directory
            filename: Name of the line-delimited JSON file
            tags: Fields copied into every record (architecture, run index)
        """
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, filename)
        self.tags = dict(tags or {})
        self._handle = open(self.path, 'a', encoding='utf-8')

    def log(self, record: Dict) -> None:
        self._handle.write(json.dumps({**self.tags, **record}, sort_keys=True) + '\n')
        self._handle.flush()

    def log_step(self, step: int, breakdown, lr: float, k: int) -> None:
        """Record {step, beta, kl, recon, total, lr, k} for one training step"""
        self.log({'step': int(step), **breakdown.as_record(), 'lr': float(lr), 'k': int(k)})

    def log_skip(self, step: int, k: int, reason: str) -> None:
        self.log({'step': int(step), 'k': int(k), 'skipped': reason})

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "MetricsLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str) -> List[Dict]:
    records = []
    with open(path, encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                # a run killed mid-write leaves a truncated last line
                logger.warning(f"⚠️ Ignoring malformed metrics line {line_no} in {path}")
    return records
