"""Figure rendering for evaluation reports.

Used by the ``report`` CLI path to write PNG figures next to the delimited
confusion-matrix export: a confusion heatmap, a bar chart of the run against
the embedded reference baselines, and (when a model file with a loss trace
is supplied) a training-loss curve.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import REFERENCE_BASELINES, EvaluationReport


def plot_confusion(report: EvaluationReport, path: str | Path) -> None:
    """Confusion-matrix heatmap (rows gold, columns predicted)."""
    matrix = np.asarray(report.confusion, dtype=np.float64)
    n = len(report.labels)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n, 0.8 + 0.7 * n))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(n), report.labels, rotation=45, ha="right")
    ax.set_yticks(range(n), report.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_title(f"{report.model_name} (n={report.n})")
    threshold = matrix.max() / 2 if matrix.max() > 0 else 0.5
    for i in range(n):
        for j in range(n):
            ax.text(
                j,
                i,
                str(int(matrix[i, j])),
                ha="center",
                va="center",
                fontsize=8,
                color="white" if matrix[i, j] > threshold else "black",
            )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_baseline_comparison(report: EvaluationReport, path: str | Path) -> None:
    """This run's accuracy next to the published reference baselines."""
    names = list(REFERENCE_BASELINES)
    values = [REFERENCE_BASELINES[n].accuracy for n in names]
    colors = ["#9ecae1"] * len(names)
    if report.model_name in REFERENCE_BASELINES:
        names.append(f"{report.model_name} (this run)")
    else:
        names.append(report.model_name)
    values.append(report.accuracy)
    colors.append("#de6a56")

    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    y = np.arange(len(names))
    ax.barh(y, values, color=colors)
    ax.set_yticks(y, names)
    ax.invert_yaxis()
    ax.set_xlabel("accuracy")
    ax.set_xlim(0, 1)
    ax.set_title("accuracy vs published baselines")
    for yi, v in zip(y, values):
        ax.text(v + 0.01, yi, f"{v:.4f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_loss_trace(trace: list[float], path: str | Path, title: str = "training loss") -> None:
    """Per-epoch training-loss curve (entry 0 is the pre-training loss)."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ax.plot(range(len(trace)), trace, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(
    report: EvaluationReport,
    out_dir: str | Path,
    loss_trace: list[float] | None = None,
) -> list[Path]:
    """Write all applicable figures for ``report`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = _safe_stem(report.model_name)
    written = []
    confusion_png = out_dir / f"{stem}.confusion.png"
    plot_confusion(report, confusion_png)
    written.append(confusion_png)
    baselines_png = out_dir / f"{stem}.baselines.png"
    plot_baseline_comparison(report, baselines_png)
    written.append(baselines_png)
    if loss_trace:
        loss_png = out_dir / f"{stem}.loss.png"
        plot_loss_trace(loss_trace, loss_png, title=f"{report.model_name} training loss")
        written.append(loss_png)
    return written


def _safe_stem(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name) or "report"
