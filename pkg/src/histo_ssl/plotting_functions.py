from pathlib import Path

import pandas as pd
import seaborn as sns
from matplotlib import pyplot as plt

LOSS_COLUMNS = ["l_dino", "l_ibot", "l_reg", "total"]
SCHEDULE_COLUMNS = ["lr", "tau_t", "ema_m"]
AXIS_LABELS = {
    "step": "Step",
    "l_dino": "DINO loss",
    "l_ibot": "iBOT loss",
    "l_reg": "Regularizer",
    "total": "Total loss",
    "lr": "Learning rate",
    "tau_t": "Teacher temperature",
    "ema_m": "Teacher momentum",
    "eff_rank": "Effective rank",
    "grad_norm": "Gradient norm",
}


def get_axis_label(column: str) -> str:
    return AXIS_LABELS.get(column, column.capitalize().replace("_", " "))


def save_plot_as_png(grid: sns.FacetGrid, output_path: Path) -> None:
    output_path.parent.mkdir(parents=True, exist_ok=True)
    grid.savefig(output_path, format="png", dpi=300)
    plt.close()


def _long_format(metrics: pd.DataFrame, columns: list[str]) -> pd.DataFrame:
    id_vars = ["step"] + (["run"] if "run" in metrics else [])
    return metrics.melt(
        id_vars=id_vars, value_vars=columns, var_name="quantity", value_name="value"
    )


def plot_metric_curves(
    metrics: pd.DataFrame,
    *,
    columns: list[str],
    plots_dir: Path,
    plot_name: str,
    title: str | None = None,
) -> Path:
    """Line plot of metric columns against the training step, one subplot per
    column, one line per run.

    Args:
        metrics (pd.DataFrame): RunMetrics rows, optionally tagged with a ``run`` column.
        columns (list[str]): metric columns to plot.
        plots_dir (Path): directory the plot will be saved to.
        plot_name (str): start of the output filename.
        title (str | None, optional): title of the plot. Defaults to None.
    """
    data = _long_format(metrics, columns)
    graph = sns.relplot(
        data=data,
        x="step",
        y="value",
        hue="run" if "run" in data else None,
        col="quantity",
        col_wrap=2 if len(columns) > 1 else None,
        kind="line",
        height=3,
        aspect=1.5,
        facet_kws=dict(sharey=False, despine=False),
    )
    graph.set_titles(col_template="{col_name}")
    for column, ax in graph.axes_dict.items():
        ax.set_ylabel(get_axis_label(column))
        ax.set_xlabel(get_axis_label("step"))

    if title is not None:
        graph.figure.suptitle(title)
        graph.tight_layout()

    output_path = plots_dir / f"{plot_name}.png"
    save_plot_as_png(graph, output_path)
    return output_path


def plot_probe_report(
    report: pd.DataFrame, *, plots_dir: Path, plot_name: str, title: str | None = None
) -> Path:
    """Bar plot of probe metric values per task and embedding configuration."""
    graph = sns.catplot(
        data=report,
        x="config",
        y="value",
        hue="run" if "run" in report else None,
        col="metric",
        row="task",
        kind="bar",
        height=3,
        aspect=1.2,
    )
    graph.set(ylim=(0, 1))
    graph.set_axis_labels("Embedding", "Value")
    if title is not None:
        graph.figure.suptitle(title)
        graph.tight_layout()

    output_path = plots_dir / f"{plot_name}.png"
    save_plot_as_png(graph, output_path)
    return output_path


def create_run_plots(
    metrics: pd.DataFrame, report: pd.DataFrame, plots_dir: Path
) -> list[Path]:
    """Loss, schedule, effective-rank and probe plots for collected runs."""
    paths = []
    if not metrics.empty:
        paths.append(
            plot_metric_curves(
                metrics, columns=LOSS_COLUMNS, plots_dir=plots_dir, plot_name="losses",
                title="Training losses",
            )
        )
        paths.append(
            plot_metric_curves(
                metrics, columns=SCHEDULE_COLUMNS, plots_dir=plots_dir, plot_name="schedules",
                title="Schedules",
            )
        )
        ranked = metrics.dropna(subset=["eff_rank"])
        if not ranked.empty:
            paths.append(
                plot_metric_curves(
                    ranked, columns=["eff_rank"], plots_dir=plots_dir, plot_name="effective_rank",
                )
            )
    probe_rows = report[report["metric"] != "mcnemar"] if not report.empty else report
    if not probe_rows.empty:
        paths.append(
            plot_probe_report(probe_rows, plots_dir=plots_dir, plot_name="probe_metrics")
        )
    print(f"Saved {len(paths)} plots to {plots_dir}")
    return paths
