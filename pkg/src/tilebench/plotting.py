"""SVG figures: ROC/PR curves and size-versus-performance/time scatter plots.

Figures are rendered with a fixed hash salt and no date metadata, so the same
data always produces the same bytes.
"""

from __future__ import annotations

import io
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import atomic_write_bytes  # noqa: E402
from .metrics import MetricReport  # noqa: E402

_RC = {"svg.hashsalt": "tilebench", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def ci_caption(report: MetricReport) -> str:
    pct = int(round(report.level * 100))
    return (f"{report.metric.value} {report.point_estimate:.3f} "
            f"({pct}% CI {report.ci_low:.3f} to {report.ci_high:.3f}, "
            f"{report.n_bootstrap} bootstrap resamples, n={report.n_patients})")


def plot_curve(points: Sequence[tuple[float, float]], report: MetricReport, path: str | os.PathLike,
               title: str = "") -> None:
    """ROC (fpr, tpr) or PR (recall, precision) staircase with the CI in the caption."""
    roc = report.metric.value == "AUROC"
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        xs, ys = zip(*points)
        ax.plot(xs, ys, drawstyle="default" if roc else "steps-post", lw=1.5)
        if roc:
            ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("False positive rate" if roc else "Recall")
        ax.set_ylabel("True positive rate" if roc else "Precision")
        if title:
            ax.set_title(title)
        fig.text(0.5, -0.02, ci_caption(report), ha="center", va="top", fontsize=7)
        _save(fig, path)


def plot_size_vs(rows: Sequence[dict], y_key: str, path: str | os.PathLike, y_label: str,
                 err_keys: tuple[str, str] | None = None) -> None:
    """Scatter of reference parameter count (millions, log axis) against ``y_key``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in rows:
            x = r["parameter_count"] / 1e6
            y = r[y_key]
            if err_keys is not None:
                lo, hi = r[err_keys[0]], r[err_keys[1]]
                ax.errorbar([x], [y], yerr=[[y - lo], [hi - y]], fmt="o", ms=4, capsize=2)
            else:
                ax.plot([x], [y], "o", ms=4)
            ax.annotate(r["family"], (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.set_xscale("log")
        ax.set_xlabel("Parameters (millions)")
        ax.set_ylabel(y_label)
        _save(fig, path)
