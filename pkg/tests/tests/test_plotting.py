import pandas as pd
import pytest

pytest.importorskip("seaborn")
matplotlib = pytest.importorskip("matplotlib")
matplotlib.use("Agg")

from histo_ssl.plotting_functions import create_run_plots  # noqa: E402
from histo_ssl.training.metrics import METRIC_COLUMNS  # noqa: E402


def test_create_run_plots(tmp_path):
    metrics = pd.DataFrame(
        [{column: float(step) for column in METRIC_COLUMNS} for step in range(4)]
    ).assign(run="run_a")
    report = pd.DataFrame(
        [
            {"task": "tissue", "config": "cls_mean", "metric": "accuracy", "value": 0.8, "n_test": 5},
            {"task": "tissue", "config": "cls_mean", "metric": "mcnemar", "value": 0.3, "n_test": 5},
        ]
    ).assign(run="run_a")
    paths = create_run_plots(metrics, report, tmp_path / "plots")
    assert [path.name for path in paths] == [
        "losses.png",
        "schedules.png",
        "effective_rank.png",
        "probe_metrics.png",
    ]
    assert all(path.exists() for path in paths)
