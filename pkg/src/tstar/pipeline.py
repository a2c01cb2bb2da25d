"""Hierarchical video-token compression.

Frames of patch embeddings are flattened in time-then-space order, a
shared learnable query is inserted after every ``k`` patches (and after a
trailing partial group), the interleaved sequence runs through ``L``
MambaMia layers (Bi-Mamba then gated aggregation), and only the query
positions are kept. A strided frame-level subsample then sets the final
token budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .aggregate import (
    AggregatorWeights,
    TokenSequence,
    apply_gated_aggregation,
    apply_gated_aggregation_backward,
    init_aggregator,
)
from .blocks import (
    AttentionBlockWeights,
    BiMambaBlockWeights,
    attention_block_forward,
    bimamba_backward,
    bimamba_forward,
    init_attention_block,
    init_bimamba_block,
)
from .tensorcore import DimensionError, Rng, named_arrays

__all__ = [
    "ConfigError",
    "MambaMiaConfig",
    "MambaMiaLayer",
    "MambaMiaWeights",
    "TokenSequence",
    "init_mambamia",
    "init_attention_stack",
    "queries_per_frame",
    "insert_queries",
    "mambamia_compress",
    "mambamia_compress_backward",
    "attention_compress",
    "secondary_indices",
    "secondary_sample",
    "token_budget",
    "parse_ratio",
]


class ConfigError(ValueError):
    """A configuration field is missing or out of range; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def parse_ratio(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        raise ConfigError("s", "sampling ratio must be an exact rational such as '1/3', not a float")
    try:
        return Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError("s", f"cannot parse {value!r} as a rational") from exc


@dataclass(frozen=True)
class MambaMiaConfig:
    d: int
    d_state: int = 16
    expand: int = 2
    w_conv: int = 4
    layers: int = 2
    k: int = 10
    s: Fraction = Fraction(1, 3)
    n_patches: int = 100
    max_frames: int = 128

    def __post_init__(self):
        object.__setattr__(self, "s", parse_ratio(self.s))
        for name in ("d", "d_state", "expand", "w_conv", "layers", "k", "n_patches", "max_frames"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(name, f"expected an integer, got {value!r}")
            if value < 1:
                raise ConfigError(name, f"must be >= 1, got {value}")
        if not 0 < self.s <= 1:
            raise ConfigError("s", f"must lie in (0, 1], got {self.s}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d

    @property
    def queries_per_frame(self) -> int:
        return queries_per_frame(self.n_patches, self.k)


@dataclass
class MambaMiaLayer:
    mixer: BiMambaBlockWeights = field(metadata={"flatten": True})
    agg: AggregatorWeights


@dataclass
class MambaMiaWeights:
    query: np.ndarray  # (d,) shared query embedding
    layers: list[MambaMiaLayer]


def init_mambamia(cfg: MambaMiaConfig, seed: int = 0, dtype=np.float32) -> MambaMiaWeights:
    rng = Rng(seed)
    query = rng.normal((cfg.d,), 1.0, dtype)
    layers = []
    for _ in range(cfg.layers):
        mixer = init_bimamba_block(cfg.d, cfg.d_state, rng, cfg.expand, cfg.w_conv, dtype)
        layers.append(MambaMiaLayer(mixer, init_aggregator(cfg.d, cfg.k, rng, dtype)))
    return MambaMiaWeights(query, layers)


def init_attention_stack(cfg: MambaMiaConfig, head_count: int = 4, seed: int = 0,
                         dtype=np.float32) -> tuple[np.ndarray, list[AttentionBlockWeights]]:
    rng = Rng(seed)
    query = rng.normal((cfg.d,), 1.0, dtype)
    return query, [init_attention_block(cfg.d, head_count, rng, dtype) for _ in range(cfg.layers)]


def queries_per_frame(n_patches: int, k: int) -> int:
    return -(-n_patches // k)


def _frame_layout(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    q = queries_per_frame(n, k)
    patch_pos = np.arange(n) + np.arange(n) // k
    query_pos = np.minimum((np.arange(q) + 1) * k, n) + np.arange(q)
    return patch_pos, query_pos


def insert_queries(frames: np.ndarray, query: np.ndarray, k: int) -> TokenSequence:
    """Interleave a copy of ``query`` after every ``k`` patches of every frame."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DimensionError(f"frames must be (M, N, d), got {frames.shape}")
    m, n, d = frames.shape
    if m < 1 or n < 1:
        raise DimensionError(f"need at least one frame and one patch, got {frames.shape}")
    if query.shape != (d,):
        raise DimensionError(f"query embedding {query.shape} does not match width {d}")
    patch_pos, query_pos = _frame_layout(n, k)
    per = n + query_pos.size
    tokens = np.empty((m, per, d), dtype=np.result_type(frames, query))
    tokens[:, patch_pos] = frames
    tokens[:, query_pos] = query
    is_query = np.zeros(per, dtype=bool)
    is_query[query_pos] = True
    return TokenSequence(
        tokens.reshape(m * per, d),
        np.tile(is_query, m),
        np.repeat(np.arange(m), per),
    )


def _check_frames(frames: np.ndarray, cfg: MambaMiaConfig) -> None:
    if frames.ndim != 3 or frames.shape[1:] != (cfg.n_patches, cfg.d):
        raise DimensionError(
            f"frames {frames.shape} do not match config (M, n_patches={cfg.n_patches}, d={cfg.d})")


def _compress_joint(frames, weights, cfg, need_cache):
    m = frames.shape[0]
    seq = insert_queries(frames, weights.query, cfg.k)
    caches = []
    for layer in weights.layers:
        mixed, c_mix = bimamba_forward(seq.tokens, layer.mixer, need_cache)
        seq, c_agg = apply_gated_aggregation(seq.with_tokens(mixed), layer.agg, need_cache)
        caches.append((c_mix, c_agg))
    out = seq.tokens[seq.is_query].reshape(m, cfg.queries_per_frame, cfg.d)
    return out, ((seq, caches) if need_cache else None)


def mambamia_compress(frames: np.ndarray, weights: MambaMiaWeights, cfg: MambaMiaConfig,
                      mode: str = "joint", need_cache: bool = False):
    """Compress ``frames`` (M, N, d) into per-frame queries (M, ceil(N/k), d).

    ``mode="joint"`` scans all frames as one sequence; ``mode="per_frame"``
    compresses each frame in isolation. Returns ``(queries, cache)``.
    """
    frames = np.asarray(frames)
    _check_frames(frames, cfg)
    if len(weights.layers) != cfg.layers:
        raise DimensionError(f"weights hold {len(weights.layers)} layers, config expects {cfg.layers}")
    if mode == "joint":
        return _compress_joint(frames, weights, cfg, need_cache)
    if mode == "per_frame":
        outs, caches = zip(*(_compress_joint(frames[i:i + 1], weights, cfg, need_cache)
                             for i in range(frames.shape[0])))
        return np.concatenate(outs), (list(caches) if need_cache else None)
    raise ValueError(f"unknown compression mode {mode!r}")


def _joint_backward(cache, dout):
    seq, caches = cache
    dx = np.zeros_like(seq.tokens)
    dx[seq.is_query] = dout.reshape(-1, dout.shape[-1])
    grads = []
    for c_mix, c_agg in reversed(caches):
        dx, g_agg = apply_gated_aggregation_backward(c_agg, dx)
        dx, g_mix = bimamba_backward(c_mix, dx)
        grads.append(MambaMiaLayer(g_mix, g_agg))
    grads.reverse()
    dquery = dx[seq.is_query].sum(axis=0)
    dframes = dx[~seq.is_query]
    return MambaMiaWeights(dquery, grads), dframes


def _add_weights(a: MambaMiaWeights, b: MambaMiaWeights) -> MambaMiaWeights:
    for (_, x), (_, y) in zip(named_arrays(a), named_arrays(b)):
        x += y
    return a


def mambamia_compress_backward(cache, dout: np.ndarray, mode: str = "joint"):
    """Gradients for a cached compression: ``(dweights, dframes)``."""
    if mode == "joint":
        grads, dframes = _joint_backward(cache, dout)
        return grads, dframes.reshape(dout.shape[0], -1, dout.shape[-1])
    total = None
    dframes = []
    for i, c in enumerate(cache):
        g, df = _joint_backward(c, dout[i:i + 1])
        total = g if total is None else _add_weights(total, g)
        dframes.append(df)
    return total, np.stack(dframes)


def attention_compress(frames: np.ndarray, query: np.ndarray, blocks: list[AttentionBlockWeights],
                       cfg: MambaMiaConfig) -> np.ndarray:
    """Same query insertion and extraction with bidirectional attention as the mixer."""
    frames = np.asarray(frames)
    _check_frames(frames, cfg)
    seq = insert_queries(frames, query, cfg.k)
    x = seq.tokens
    for block in blocks:
        x, _ = attention_block_forward(x, block)
    return x[seq.is_query].reshape(frames.shape[0], cfg.queries_per_frame, cfg.d)


def secondary_indices(m: int, s) -> np.ndarray:
    """Frame indices kept at sampling ratio ``s``: ``floor(j / s)`` for ``j < ceil(m s)``.

    When the numerator divides the denominator this is the uniform stride
    ``0, 1/s, 2/s, ...`` anchored at frame 0.
    """
    s = parse_ratio(s)
    if not 0 < s <= 1:
        raise ConfigError("s", f"must lie in (0, 1], got {s}")
    count = math.ceil(m * s)
    return np.array([math.floor(j / s) for j in range(count)], dtype=np.int64)


def secondary_sample(per_frame_queries: np.ndarray, s) -> np.ndarray:
    return per_frame_queries[secondary_indices(per_frame_queries.shape[0], s)]


def token_budget(m: int, n: int, k: int, s) -> int:
    """Tokens delivered downstream: ``ceil(m s) * ceil(n / k)``."""
    return math.ceil(m * parse_ratio(s)) * queries_per_frame(n, k)
