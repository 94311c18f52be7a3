"""Probe and model-comparison report tables."""

import logging
import pathlib
from typing import Iterable, List, Mapping, Sequence

import numpy.typing as npt
import pandas as pd

from histo_ssl.errors import DataError
from histo_ssl.evaluation.metrics import contingency, mcnemar_from_counts
from histo_ssl.training.metrics import METRICS_NAME

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["task", "config", "metric", "value", "n_test"]
COMPARISON_COLUMNS = REPORT_COLUMNS + ["model_a", "model_b", "b", "c", "statistic", "p"]
REPORT_NAME = "probe_report.tsv"
COMPARISON_NAME = "comparison_report.tsv"


def _write(df: pd.DataFrame, path: pathlib.Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, sep="\t", index=False, float_format="%.6g")


def write_report(rows: Iterable[Mapping], path: pathlib.Path) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=REPORT_COLUMNS)
    _write(df, path)
    logger.info(f"Wrote {len(df)} report rows to {path}")
    return df


def compare_models(
    preds_a: npt.ArrayLike,
    preds_b: npt.ArrayLike,
    labels: npt.ArrayLike,
    *,
    task: str = "",
    config: str = "",
    model_a: str = "a",
    model_b: str = "b",
) -> dict:
    """One comparison-report row: McNemar's test on the paired predictions."""
    table = contingency(preds_a, preds_b, labels)
    statistic, p = mcnemar_from_counts(table.b, table.c)
    return {
        "task": task,
        "config": config,
        "metric": "mcnemar",
        "value": p,
        "n_test": table.n,
        "model_a": model_a,
        "model_b": model_b,
        "b": table.b,
        "c": table.c,
        "statistic": statistic,
        "p": p,
    }


def write_comparison_report(rows: Iterable[Mapping], path: pathlib.Path) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=COMPARISON_COLUMNS)
    _write(df, path)
    return df


def read_report(path: pathlib.Path) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"report not found: {path}", missing_path=True)
    df = pd.read_csv(path, sep="\t")
    if list(df.columns[: len(REPORT_COLUMNS)]) != REPORT_COLUMNS:
        raise DataError(f"unexpected report columns in {path}: {list(df.columns)}")
    return df


def collect_reports(run_dirs: Sequence[pathlib.Path]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Concatenate probe reports and run metrics from several run directories.

    Each row is tagged with the ``run`` directory name it came from.
    """
    reports: List[pd.DataFrame] = []
    metrics: List[pd.DataFrame] = []
    for run_dir in run_dirs:
        if not run_dir.is_dir():
            raise DataError(f"run directory not found: {run_dir}", missing_path=True)
        for path in sorted(run_dir.glob("*.tsv")):
            if path.name == METRICS_NAME:
                df = pd.read_csv(path, sep="\t")
                metrics.append(df.assign(run=run_dir.name))
            elif path.name in (REPORT_NAME, COMPARISON_NAME):
                reports.append(read_report(path).assign(run=run_dir.name))
    if not reports and not metrics:
        raise DataError(f"no reports or metrics found in {[str(d) for d in run_dirs]}")
    report_df = pd.concat(reports, ignore_index=True) if reports else pd.DataFrame()
    metrics_df = pd.concat(metrics, ignore_index=True) if metrics else pd.DataFrame()
    return report_df, metrics_df
