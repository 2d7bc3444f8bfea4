"""Figure rendering: loss curves, NDR curves, per-frame scores, PR curves.

Every plot saves a PNG and writes the plotted numbers as a companion CSV
next to it, so figures can be regenerated or re-styled downstream.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PRCurve, ndr_curve, osr  # noqa: E402
from .optimize import EpochStats  # noqa: E402
from .types import TrackedScoreSeries  # noqa: E402


def _save(fig, png_path: Path) -> None:
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_loss_curve(epochs: list[EpochStats], png_path: str | Path):
    """Training curve: mean loss and mean max objectness per epoch."""
    png_path = Path(png_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [e.epoch for e in epochs]
    ax.plot(xs, [e.mean_loss for e in epochs], label="mean loss")
    ax.plot(xs, [e.mean_max_objectness for e in epochs], label="mean max objectness")
    ax.set_xlabel("epoch")
    ax.set_ylabel("value")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, png_path)

    rows = ["epoch,mean_loss,mean_max_objectness,nps,tv"]
    rows += [f"{e.epoch},{e.mean_loss!r},{e.mean_max_objectness!r},{e.nps!r},{e.tv!r}"
             for e in epochs]
    png_path.with_suffix(".csv").write_text("\n".join(rows) + "\n")
    return fig


def plot_score_series(series: TrackedScoreSeries, png_path: str | Path):
    """Patched vs clean objectness by frame index, annotated with the OSR."""
    png_path = Path(png_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(series.clean_scores)), series.clean_scores,
            label="clean", color="tab:green", lw=0.9)
    ax.plot(range(len(series.patched_scores)), series.patched_scores,
            label="patched", color="tab:red", lw=0.9)
    ax.set_xlabel("frame index")
    ax.set_ylabel("objectness")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"object {series.object_id} "
                 f"({series.conditions.get('lighting')}/{series.conditions.get('motion')})")
    ax.annotate(f"OSR = {osr(series):.3f}", xy=(0.02, 0.95),
                xycoords="axes fraction", fontsize=11)
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    _save(fig, png_path)

    rows = ["frame_index,patched_score,clean_score"]
    n = max(len(series.patched_scores), len(series.clean_scores))
    for i in range(n):
        p = series.patched_scores[i] if i < len(series.patched_scores) else ""
        c = series.clean_scores[i] if i < len(series.clean_scores) else ""
        rows.append(f"{i},{p!r},{c!r}")
    png_path.with_suffix(".csv").write_text("\n".join(rows) + "\n")
    return fig


def plot_ndr_curves(series_list: list[TrackedScoreSeries], png_path: str | Path):
    """NDR against threshold per object plus the mean curve.

    Flagged (undefined) points are excluded from both lines and CSV rows.
    """
    png_path = Path(png_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    curves = {s.object_id: ndr_curve(s) for s in series_list}
    for object_id, curve in curves.items():
        pts = [(t, v) for t, v in curve if v is not None]
        if pts:
            ax.plot(*zip(*pts), alpha=0.5, lw=0.9, label=object_id)

    mean_pts = []
    grid = [t for t, _ in next(iter(curves.values()))] if curves else []
    for k, tau in enumerate(grid):
        vals = [curve[k][1] for curve in curves.values() if curve[k][1] is not None]
        if vals:
            mean_pts.append((tau, sum(vals) / len(vals)))
    if mean_pts:
        ax.plot(*zip(*mean_pts), color="black", lw=2.0, label="mean")

    ax.set_xlabel("objectness threshold")
    ax.set_ylabel("NDR")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, png_path)

    rows = ["object_id,tau,ndr"]
    for object_id, curve in curves.items():
        for tau, v in curve:
            if v is not None:
                rows.append(f"{object_id},{tau!r},{v!r}")
    for tau, v in mean_pts:
        rows.append(f"mean,{tau!r},{v!r}")
    png_path.with_suffix(".csv").write_text("\n".join(rows) + "\n")
    return fig


def plot_pr_curves(curves: dict[str, PRCurve], png_path: str | Path):
    """Precision-recall curves with AP values in the legend."""
    png_path = Path(png_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        ax.plot(curve.recall, curve.precision, label=f"{label} (AP {curve.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, png_path)

    rows = ["label,recall,precision"]
    for label, curve in curves.items():
        for r, p in zip(curve.recall, curve.precision):
            rows.append(f"{label},{r!r},{p!r}")
    png_path.with_suffix(".csv").write_text("\n".join(rows) + "\n")
    return fig
