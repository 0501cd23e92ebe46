"""Figures for ratio tables. Uses the non-interactive Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RatioTable  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def plot_ratio_table(table: RatioTable, path, title: str = "") -> None:
    """One EER-vs-watermark-ratio line per table row, saved as PNG."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [100 * r for r in table.ratios]
        for row in table.rows:
            pts = [(x, table.cells[(row, r)]) for x, r in zip(xs, table.ratios) if (row, r) in table.cells]
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=row)
        ax.set_xlabel("watermarked share of eval set (%)")
        ax.set_ylabel("EER (%)")
        ax.set_xticks(sorted(xs))
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, title=table.row_header)
        fig.tight_layout()
        # no Software/date metadata, so reruns give identical bytes
        fig.savefig(path, format="png", dpi=120, metadata={"Software": None})
        plt.close(fig)
