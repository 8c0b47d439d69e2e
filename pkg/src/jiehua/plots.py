"""PNG renderings of metric logs and FID reports (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fid import FIDReport  # noqa: E402


def plot_metrics(metrics_path, out_dir) -> list[Path]:
    """One figure per metric column, x axis = optimizer step."""
    from .training import MetricLog

    rows = MetricLog.read(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        return []
    steps = [r["step"] for r in rows]
    written = []
    for col in rows[0]:
        if col == "step":
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, [r[col] for r in rows], lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(col)
        fig.tight_layout()
        path = out_dir / f"{col}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def plot_fid(report: FIDReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(report.scores)), report.scores, color="0.6")
    ax.axhline(report.mean, color="k", lw=1, label=f"mean {report.mean:.4g}")
    ax.set_xlabel("repeat")
    ax.set_ylabel("FID")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
