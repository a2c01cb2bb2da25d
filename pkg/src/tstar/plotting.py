"""Matplotlib rendering of benchmark sweeps (optional; needs matplotlib)."""
from __future__ import annotations

from .bench import BenchRecord, method_slopes


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "font.size": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
    })
    return plt


def render_scaling_figure(records: list[BenchRecord], path, title: str | None = None):
    """Two panels, latency and peak memory against frame count, both log-log."""
    plt = _pyplot()
    good = [r for r in records if r.ok]
    slopes = method_slopes(good)
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(9, 3.6))
    for method in dict.fromkeys(r.method for r in good):
        rows = sorted((r for r in good if r.method == method), key=lambda r: r.frames)
        frames = [r.frames for r in rows]
        label = f"{method} (slope {slopes[method]:.2f})" if method in slopes else method
        ax_t.plot(frames, [r.wall_time for r in rows], marker="o", label=label)
        ax_m.plot(frames, [r.rss_estimate / 2**20 for r in rows], marker="o", label=method)
    for ax, ylabel in ((ax_t, "seconds"), (ax_m, "peak MiB")):
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("frames")
        ax.set_ylabel(ylabel)
    ax_t.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
