"""
Linear probes on frozen embeddings.

Embeddings are z-scored with training-split statistics. A multinomial logistic
regression (or, for continuous targets, a least-squares regression) is fitted
with plain minibatch SGD, zero initialization and a cosine learning rate
decaying to zero. The iterate with the lowest validation loss is kept.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt
from sklearn.model_selection import GroupShuffleSplit, ShuffleSplit

from histo_ssl.errors import DataError, DimensionError, ParameterError
from histo_ssl.evaluation.metrics import accuracy, pearson, weighted_f1
from histo_ssl.model.config import EmbeddingMode
from histo_ssl.model.vit import TokenOutput, extract_embedding
from histo_ssl.optim import cosine_schedule
from histo_ssl.tensor_kernel import Rng, log_softmax_rows, softmax_rows

logger = logging.getLogger(__name__)

Array = npt.NDArray
STD_FLOOR = 1e-8


@dataclass
class EmbeddingSet:
    """Frozen embeddings of one split"""

    vectors: Array  # n x D
    labels: Array  # n
    config: EmbeddingMode = EmbeddingMode.CLS_MEAN
    split: str = "train"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels)
        if isinstance(self.config, str):
            self.config = EmbeddingMode(self.config)
        if self.vectors.ndim != 2:
            raise DimensionError(f"embeddings must be n x D, got {self.vectors.shape}")
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.vectors.shape[0]} embeddings for {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ProbeConfig:
    iterations: int = 2000
    batch_size: int = 256
    lr: float = 1e-2
    end_lr: float = 0.0
    eval_every: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError(f"probe iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ParameterError(f"probe batch size must be >= 1, got {self.batch_size}")


@dataclass
class ZScoreStats:
    mean: Array
    std: Array


def zscore_fit(vectors: npt.ArrayLike) -> ZScoreStats:
    v = np.asarray(vectors, dtype=np.float64)
    return ZScoreStats(mean=v.mean(axis=0), std=np.maximum(v.std(axis=0), STD_FLOOR))


def zscore_apply(vectors: npt.ArrayLike, zstats: ZScoreStats) -> npt.NDArray[np.float64]:
    return (np.asarray(vectors, dtype=np.float64) - zstats.mean) / zstats.std


@dataclass
class ProbeResult:
    weights: Array  # D x K (or D for regression)
    bias: Array
    predictions: Array  # test predictions
    val_loss: float
    best_iteration: int
    classes: Optional[Array] = None
    zstats: Optional[ZScoreStats] = None


def _cross_entropy(x: Array, y: Array, w: Array, b: Array) -> float:
    return float(-np.mean(log_softmax_rows(x @ w + b)[np.arange(len(y)), y]))


def _squared_error(x: Array, y: Array, w: Array, b: float) -> float:
    return float(np.mean((x @ w + b - y) ** 2))


def _sgd(
    n_train: int,
    cfg: ProbeConfig,
    rng: Rng,
    grad_fn,
    val_loss_fn,
    params: Tuple[Array, Array],
) -> Tuple[Tuple[Array, Array], float, int]:
    """Plain SGD with cosine lr; returns the lowest-validation-loss iterate."""
    w, b = params
    best = (w.copy(), b.copy())
    best_loss = val_loss_fn(w, b)
    best_iteration = 0
    batch = min(cfg.batch_size, n_train)
    for it in range(cfg.iterations):
        lr = cosine_schedule(it, cfg.iterations, cfg.lr, cfg.end_lr)
        idx = rng.choice(n_train, size=batch, replace=False)
        dw, db = grad_fn(idx, w, b)
        w = w - lr * dw
        b = b - lr * db
        last = it == cfg.iterations - 1
        if (it + 1) % cfg.eval_every == 0 or last:
            loss = val_loss_fn(w, b)
            if loss <= best_loss or not np.isfinite(best_loss):
                best, best_loss, best_iteration = (w.copy(), b.copy()), loss, it + 1
    return best, best_loss, best_iteration


def linear_probe(
    train: EmbeddingSet,
    val: EmbeddingSet,
    test: EmbeddingSet,
    cfg: ProbeConfig,
    rng: Rng,
) -> ProbeResult:
    """Multinomial logistic regression on z-scored embeddings."""
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise DataError(f"training split has a single class ({classes.tolist()})")
    zstats = zscore_fit(train.vectors)
    x_train = zscore_apply(train.vectors, zstats)
    x_val = zscore_apply(val.vectors, zstats)
    x_test = zscore_apply(test.vectors, zstats)
    y_train = np.searchsorted(classes, train.labels)
    known = np.isin(val.labels, classes)
    x_val, y_val = x_val[known], np.searchsorted(classes, val.labels[known])
    if y_val.size == 0:
        raise DataError("validation split shares no class with the training split")

    def grad_fn(idx, w, b):
        x = x_train[idx]
        probs = softmax_rows(x @ w + b)
        probs[np.arange(len(idx)), y_train[idx]] -= 1.0
        probs /= len(idx)
        return x.T @ probs, probs.sum(axis=0)

    def val_loss_fn(w, b):
        return _cross_entropy(x_val, y_val, w, b)

    d, k = x_train.shape[1], classes.size
    (w, b), val_loss, best_iteration = _sgd(
        len(x_train), cfg, rng, grad_fn, val_loss_fn, (np.zeros((d, k)), np.zeros(k))
    )
    predictions = classes[np.argmax(x_test @ w + b, axis=1)]
    logger.info(
        f"Linear probe: {k} classes, best validation loss {val_loss:.4f} "
        f"at iteration {best_iteration}"
    )
    return ProbeResult(
        weights=w,
        bias=b,
        predictions=predictions,
        val_loss=val_loss,
        best_iteration=best_iteration,
        classes=classes,
        zstats=zstats,
    )


def linear_regression_probe(
    train: EmbeddingSet,
    val: EmbeddingSet,
    test: EmbeddingSet,
    cfg: ProbeConfig,
    rng: Rng,
) -> ProbeResult:
    """Least-squares regression on z-scored embeddings, fitted by the same SGD
    protocol as the classification probe."""
    zstats = zscore_fit(train.vectors)
    x_train = zscore_apply(train.vectors, zstats)
    x_val = zscore_apply(val.vectors, zstats)
    x_test = zscore_apply(test.vectors, zstats)
    y_train = train.labels.astype(np.float64)
    y_val = val.labels.astype(np.float64)

    def grad_fn(idx, w, b):
        x = x_train[idx]
        residual = (x @ w + b - y_train[idx]) * (2.0 / len(idx))
        return x.T @ residual, np.asarray(residual.sum())

    def val_loss_fn(w, b):
        return _squared_error(x_val, y_val, w, b)

    (w, b), val_loss, best_iteration = _sgd(
        len(x_train),
        cfg,
        rng,
        grad_fn,
        val_loss_fn,
        (np.zeros(x_train.shape[1]), np.asarray(0.0)),
    )
    return ProbeResult(
        weights=w,
        bias=b,
        predictions=x_test @ w + b,
        val_loss=val_loss,
        best_iteration=best_iteration,
        zstats=zstats,
    )


def split_indices(
    n: int,
    val_fraction: float,
    test_fraction: float,
    rng: Rng,
    groups: Optional[npt.ArrayLike] = None,
) -> Dict[str, npt.NDArray[np.int64]]:
    """Disjoint train / val / test indices; with ``groups`` (e.g. slide ids)
    no group is shared between splits."""
    if not (0 < val_fraction < 1 and 0 < test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ParameterError(
            f"invalid split fractions val={val_fraction}, test={test_fraction}"
        )
    indices = np.arange(n)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=2)]
    if groups is None:
        outer = ShuffleSplit(n_splits=1, test_size=test_fraction, random_state=seeds[0])
        inner = ShuffleSplit(
            n_splits=1, test_size=val_fraction / (1 - test_fraction), random_state=seeds[1]
        )
        rest, test = next(outer.split(indices))
        train, val = next(inner.split(rest))
    else:
        groups = np.asarray(groups)
        outer = GroupShuffleSplit(n_splits=1, test_size=test_fraction, random_state=seeds[0])
        rest, test = next(outer.split(indices, groups=groups))
        inner = GroupShuffleSplit(
            n_splits=1, test_size=val_fraction / (1 - test_fraction), random_state=seeds[1]
        )
        train, val = next(inner.split(rest, groups=groups[rest]))
    return {"train": np.sort(rest[train]), "val": np.sort(rest[val]), "test": np.sort(test)}


def make_splits(
    vectors: Array,
    labels: Array,
    splits: Mapping[str, Array],
    config: EmbeddingMode | str = EmbeddingMode.CLS_MEAN,
) -> Tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    return tuple(
        EmbeddingSet(vectors[splits[name]], labels[splits[name]], config, name)
        for name in ("train", "val", "test")
    )


@dataclass
class ProbeMetrics:
    """Test metrics of one probe run"""

    mode: str
    accuracy: float
    weighted_f1: float
    n_test: int

    def as_rows(self, task: str) -> list:
        """Rows in the probe report layout"""
        return [
            {
                "task": task,
                "config": self.mode,
                "metric": metric,
                "value": value,
                "n_test": self.n_test,
            }
            for metric, value in (("accuracy", self.accuracy), ("weighted_f1", self.weighted_f1))
        ]


def patch_aggregate_probe(
    token_outputs: Mapping[str, Array],
    labels: npt.ArrayLike,
    mode: EmbeddingMode | str,
    splits: Mapping[str, Array],
    cfg: ProbeConfig,
    rng: Rng,
) -> Tuple[ProbeMetrics, ProbeResult]:
    """Linear probe on embeddings aggregated from retained token outputs.

    ``token_outputs`` holds ``cls`` (n x D) and ``patches`` (n x N x D);
    ``patch_max`` takes the elementwise max over patch tokens.
    """
    mode = EmbeddingMode(mode)
    cls = np.asarray(token_outputs["cls"])
    patches = np.asarray(token_outputs["patches"])
    out = TokenOutput(cls=cls, registers=np.zeros((cls.shape[0], 0, cls.shape[1])), patches=patches)
    vectors = extract_embedding(out, mode)
    labels = np.asarray(labels)
    train, val, test = make_splits(vectors, labels, splits, mode)
    result = linear_probe(train, val, test, cfg, rng)
    metrics = ProbeMetrics(
        mode=mode.value,
        accuracy=accuracy(result.predictions, test.labels),
        weighted_f1=weighted_f1(result.predictions, test.labels),
        n_test=len(test),
    )
    return metrics, result


def regression_metrics(result: ProbeResult, test: EmbeddingSet) -> float:
    """Pearson correlation between regression-probe predictions and targets."""
    return pearson(result.predictions, test.labels)
