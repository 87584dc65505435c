"""Optional SVG line charts (matplotlib, imported lazily)."""

from __future__ import annotations

from typing import Sequence


def line_svg(path, xs: Sequence[float], ys: Sequence[float], xlabel: str, ylabel: str,
             title: str = "", yerr: Sequence[float] | None = None, logx: bool = False) -> bool:
    """Write a single-series line chart; returns False when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    matplotlib.rcParams["svg.hashsalt"] = "d2bench"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if yerr is not None:
        ax.errorbar(xs, ys, yerr=yerr, marker="o", capsize=3)
    else:
        ax.plot(xs, ys, marker="o")
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True
