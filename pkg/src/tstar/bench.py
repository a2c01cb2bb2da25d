"""Latency / memory scaling harness over frame counts.

Each (method, M) cell runs one discarded warm-up pass, ``trials`` timed
passes (median reported), then one extra pass under ``tracemalloc`` for the
peak allocation. Methods run strictly one after another.
"""
from __future__ import annotations

import csv
import math
import os
import statistics
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .blocks import avg_pool_frame
from .pipeline import (
    MambaMiaConfig,
    attention_compress,
    init_attention_stack,
    init_mambamia,
    mambamia_compress,
    secondary_sample,
)
from .tensorcore import Rng

__all__ = [
    "METHODS",
    "CSV_HEADER",
    "BenchRecord",
    "make_runner",
    "run_bench",
    "fit_loglog_slope",
    "method_slopes",
    "write_csv",
    "read_csv",
    "render_svg",
]

METHODS = ("mambamia", "mamba_per_frame", "attention", "avg_pool", "none")
CSV_HEADER = ("method", "frames", "tokens", "seconds", "bytes")


@dataclass
class BenchRecord:
    method: str
    frames: int
    tokens_out: int | None
    wall_time: float | None  # seconds, median of trials
    rss_estimate: int | None  # peak traced allocation in bytes
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def make_runner(method: str, cfg: MambaMiaConfig, seed: int = 0, heads: int = 4):
    """Return ``run(frames) -> tokens (T_out, d)`` for one compression method."""
    if method == "mambamia":
        w = init_mambamia(cfg, seed)

        def run(frames):
            q, _ = mambamia_compress(frames, w, cfg)
            return secondary_sample(q, cfg.s).reshape(-1, cfg.d)
    elif method == "mamba_per_frame":
        w = init_mambamia(cfg, seed)

        def run(frames):
            q, _ = mambamia_compress(frames, w, cfg, mode="per_frame")
            return q.reshape(-1, cfg.d)
    elif method == "attention":
        query, blocks = init_attention_stack(cfg, heads, seed)

        def run(frames):
            q = attention_compress(frames, query, blocks, cfg)
            return secondary_sample(q, cfg.s).reshape(-1, cfg.d)
    elif method == "avg_pool":
        def run(frames):
            return np.concatenate([avg_pool_frame(f, cfg.k) for f in frames])
    elif method == "none":
        def run(frames):
            return frames.reshape(-1, frames.shape[-1]).copy()
    else:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return run


@contextmanager
def single_threaded():
    """Pin BLAS pools to one thread and export SSTC_THREADS=1 for the timed region."""
    previous = os.environ.get("SSTC_THREADS")
    os.environ["SSTC_THREADS"] = "1"
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    try:
        if threadpool_limits is None:
            yield
        else:
            with threadpool_limits(limits=1):
                yield
    finally:
        if previous is None:
            os.environ.pop("SSTC_THREADS", None)
        else:
            os.environ["SSTC_THREADS"] = previous


def _measure(run, frames, trials: int) -> tuple[int, float, int]:
    run(frames)  # warm-up, discarded
    times = []
    out = None
    for _ in range(trials):
        t0 = time.perf_counter()
        out = run(frames)
        times.append(time.perf_counter() - t0)
    tracemalloc.start()
    try:
        run(frames)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return out.shape[0], statistics.median(times), peak


def run_bench(methods, frame_counts, cfg: MambaMiaConfig, trials: int = 3, seed: int = 0,
              heads: int = 4, on_record=None) -> list[BenchRecord]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    records = []
    with single_threaded():
        for method in methods:
            runner = make_runner(method, cfg, seed, heads)
            for m in frame_counts:
                frames = Rng(seed + m).normal((m, cfg.n_patches, cfg.d), 1.0, np.float32)
                try:
                    tokens, seconds, peak = _measure(runner, frames, trials)
                    rec = BenchRecord(method, m, tokens, seconds, peak)
                except Exception as exc:  # one bad cell must not sink the sweep
                    rec = BenchRecord(method, m, None, None, None, error=f"{type(exc).__name__}: {exc}")
                records.append(rec)
                if on_record:
                    on_record(rec)
    return records


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def method_slopes(records: list[BenchRecord]) -> dict:
    out = {}
    for method in dict.fromkeys(r.method for r in records):
        pts = [(r.frames, r.wall_time) for r in records if r.method == method and r.ok and r.wall_time > 0]
        if len(pts) >= 2:
            out[method] = fit_loglog_slope(*zip(*pts))
    return out


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(records: list[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.method, r.frames, _cell(r.tokens_out), _cell(r.wall_time), _cell(r.rss_estimate)])


def read_csv(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def num(key, cast):
                return cast(row[key]) if row[key] != "" else None
            rec = BenchRecord(row["method"], int(row["frames"]), num("tokens", int), num("seconds", float),
                              num("bytes", int))
            if rec.wall_time is None:
                rec.error = "missing"
            out.append(rec)
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#7f7f7f", "#9467bd")


def render_svg(records: list[BenchRecord], title: str = "Latency vs frames", width: int = 640,
               height: int = 420) -> str:
    """Log-log latency chart as a standalone SVG 1.1 document."""
    good = [r for r in records if r.ok and r.wall_time and r.wall_time > 0]
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    parts = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    if good:
        xs = sorted({r.frames for r in good})
        lo_y = math.floor(math.log10(min(r.wall_time for r in good)))
        hi_y = math.ceil(math.log10(max(r.wall_time for r in good)))
        hi_y = max(hi_y, lo_y + 1)
        lx0, lx1 = math.log10(xs[0]), math.log10(xs[-1])
        if lx1 == lx0:
            lx0, lx1 = lx0 - 0.5, lx1 + 0.5

        def px(x):
            return left + (math.log10(x) - lx0) / (lx1 - lx0) * pw

        def py(y):
            return top + ph - (math.log10(y) - lo_y) / (hi_y - lo_y) * ph

        parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
        for x in xs:
            parts.append(f'<line x1="{px(x):.2f}" y1="{top + ph}" x2="{px(x):.2f}" y2="{top + ph + 5}" stroke="black"/>')
            parts.append(f'<text x="{px(x):.2f}" y="{top + ph + 18}" text-anchor="middle">{x}</text>')
        for e in range(lo_y, hi_y + 1):
            y = py(10.0 ** e)
            parts.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
            parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">1e{e}</text>')
        parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">frames (log)</text>')
        parts.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {top + ph / 2})">seconds (log)</text>')
        slopes = method_slopes(good)
        for i, method in enumerate(dict.fromkeys(r.method for r in good)):
            color = _PALETTE[i % len(_PALETTE)]
            pts = sorted((r.frames, r.wall_time) for r in good if r.method == method)
            coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in pts:
                parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
            ly = top + 12 + 18 * i
            label = method if method not in slopes else f"{method} ({slopes[method]:.2f})"
            parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                         f'stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(label)}</text>')
    else:
        parts.append(f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle">no successful measurements</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
