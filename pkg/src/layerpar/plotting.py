"""Learning-curve charts rendered from a metrics file into standalone SVG files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import read_metrics  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",
    "svg.hashsalt": "layerpar",
}
LOG_FIELDS = {"violation_mean", "violation_max", "distill_loss", "train_loss", "test_loss"}


def curve_id(field: str) -> str:
    """SVG element id of the data line for ``field``."""
    return f"curve-{field}"


def render_curves(metrics_path, fields, out_dir=None) -> list[Path]:
    """Write one ``<field>.svg`` per field with epochs on the horizontal axis."""
    fields = [f for f in fields]
    if not fields:
        raise ValueError("no fields requested")
    header, rows = read_metrics(metrics_path)
    unknown = [f for f in fields if f not in header]
    if unknown:
        raise ValueError(f"unknown metric field(s) {', '.join(unknown)}; available: {', '.join(header)}")
    out_dir = Path(out_dir) if out_dir is not None else Path(metrics_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in rows]
    paths = []
    with plt.rc_context(STYLE):
        for f in fields:
            pts = [(e, r[f]) for e, r in zip(epochs, rows) if math.isfinite(r[f])]
            fig, ax = plt.subplots()
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            (line,) = ax.plot(xs, ys, color="#1f5a96", lw=1.4, marker="o" if len(pts) < 2 else None, ms=4)
            line.set_gid(curve_id(f))
            if f in LOG_FIELDS and pts and min(ys) > 0:
                ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_ylabel(f)
            if not pts:
                ax.text(0.5, 0.5, "no finite values", transform=ax.transAxes, ha="center")
            fig.tight_layout()
            path = out_dir / f"{f}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
