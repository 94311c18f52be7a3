"""Per-step training metrics, collapse indicators and loss-spike detection."""

import collections
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.stats import entropy

from histo_ssl.errors import DataError, ParameterError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "l_dino",
    "l_ibot",
    "l_reg",
    "total",
    "grad_norm",
    "eff_rank",
    "tau_t",
    "lr",
    "ema_m",
    "spike",
]
METRICS_NAME = "metrics.tsv"


def effective_rank(embeddings: npt.ArrayLike) -> float:
    """exp of the Shannon entropy of the L1-normalized singular values of the
    centered embedding matrix. A zero matrix has rank 1 by convention."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ParameterError(f"effective rank needs an n x d matrix with n >= 2, got {e.shape}")
    centered = e - e.mean(axis=0, keepdims=True)
    singular = np.linalg.svd(centered, compute_uv=False)
    total = singular.sum()
    if total <= 1e-12 * max(1.0, np.abs(e).max()):
        return 1.0
    return float(math.exp(entropy(singular / total)))


class SpikeDetector:
    """Flags values above the trailing-window mean plus ``n_sigma`` standard
    deviations. Needs ``min_history`` previous values before it flags."""

    def __init__(self, window: int = 50, n_sigma: float = 5.0, min_history: int = 10):
        if window < 2:
            raise ParameterError(f"spike window must be >= 2, got {window}")
        self.n_sigma = n_sigma
        self.min_history = min(min_history, window)
        self.history: Deque[float] = collections.deque(maxlen=window)

    def update(self, value: float) -> bool:
        spike = False
        if len(self.history) >= self.min_history:
            values = np.fromiter(self.history, dtype=np.float64)
            spike = bool(value > values.mean() + self.n_sigma * values.std())
        self.history.append(value)
        return spike

    def replay(self, values: Iterable[float]) -> None:
        """Refill the window from logged values without flagging them."""
        self.history.extend(float(value) for value in values)


@dataclass
class RunMetrics:
    """Append-only table of per-step metrics"""

    rows: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: Dict[str, float]) -> None:
        missing = set(METRIC_COLUMNS) - set(row)
        if missing:
            raise ParameterError(f"metrics row is missing {sorted(missing)}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ParameterError(
                f"metrics steps must increase, got {row['step']} after {self.rows[-1]['step']}"
            )
        self.rows.append({key: row[key] for key in METRIC_COLUMNS})

    def column(self, name: str) -> npt.NDArray[np.float64]:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=METRIC_COLUMNS)
        df["step"] = df["step"].astype(int)
        df["spike"] = df["spike"].astype(int)
        return df

    def write_tsv(self, path: pathlib.Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(path, sep="\t", index=False, float_format="%.17g")

    @classmethod
    def read_tsv(cls, path: pathlib.Path) -> "RunMetrics":
        if not path.exists():
            raise DataError(f"metrics file not found: {path}", missing_path=True)
        df = pd.read_csv(path, sep="\t")
        if list(df.columns) != METRIC_COLUMNS:
            raise DataError(f"unexpected metrics columns in {path}: {list(df.columns)}")
        metrics = cls()
        for record in df.to_dict(orient="records"):
            metrics.append(record)
        return metrics
