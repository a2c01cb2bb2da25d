"""Gated patch aggregation into query tokens.

Each query token closes a chunk of at most ``k`` preceding patch tokens. A
linear map of the query scores the chunk positions, the softmax-weighted
patch average ``a`` is formed, and a clamped sigmoid gate mixes it in:
``q_new = (1 - g) q + g a``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .tensorcore import DimensionError, ParameterError, Rng, sigmoid, softmax_masked

__all__ = [
    "AggregatorWeights",
    "TokenSequence",
    "ChunkLayout",
    "MalformedMaskError",
    "init_aggregator",
    "aggregation_weights",
    "gated_merge",
    "apply_gated_aggregation",
    "apply_gated_aggregation_backward",
]

DEFAULT_EPSILON = 0.01


class MalformedMaskError(ValueError):
    """The query mask does not partition the sequence into chunks."""


@dataclass
class AggregatorWeights:
    w_alpha: np.ndarray  # (d, k)
    b_alpha: np.ndarray  # (k,)
    w_g: np.ndarray  # (d, 1)
    b_g: np.ndarray  # () scalar
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ParameterError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")

    @property
    def k(self) -> int:
        return self.w_alpha.shape[1]


def init_aggregator(d: int, k: int, rng: Rng, dtype=np.float32,
                    epsilon: float = DEFAULT_EPSILON) -> AggregatorWeights:
    return AggregatorWeights(
        w_alpha=rng.normal((d, k), 1.0 / np.sqrt(d), dtype),
        b_alpha=np.zeros(k, dtype),
        w_g=rng.normal((d, 1), 1.0 / np.sqrt(d), dtype),
        b_g=np.array(0.0, dtype),
        epsilon=epsilon,
    )


@dataclass
class ChunkLayout:
    query_pos: np.ndarray  # (n,)
    patch_idx: np.ndarray  # (n, k), padded entries point at position 0
    valid: np.ndarray  # (n, k)


@dataclass
class TokenSequence:
    """Interleaved patch/query tokens with the query mask and source-frame index."""

    tokens: np.ndarray  # (T, d)
    is_query: np.ndarray  # (T,) bool
    frame_of: np.ndarray  # (T,) int

    def __post_init__(self):
        T = self.tokens.shape[0]
        if self.is_query.shape != (T,) or self.frame_of.shape != (T,):
            raise DimensionError("token mask / frame index length differs from token count")

    def with_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        out = TokenSequence(tokens, self.is_query, self.frame_of)
        if "_layouts" in self.__dict__:
            out.__dict__["_layouts"] = self._layouts
        return out

    @cached_property
    def _layouts(self) -> dict:
        return {}

    def chunks(self, k: int, allow_empty: bool = False) -> ChunkLayout:
        key = (k, allow_empty)
        if key not in self._layouts:
            self._layouts[key] = _chunk_layout(self.is_query, k, allow_empty)
        return self._layouts[key]


def _chunk_layout(is_query: np.ndarray, k: int, allow_empty: bool) -> ChunkLayout:
    qpos = np.flatnonzero(is_query)
    T = is_query.shape[0]
    if T and (qpos.size == 0 or qpos[-1] != T - 1):
        raise MalformedMaskError("patch tokens after the last query belong to no chunk")
    start = np.concatenate([[0], qpos[:-1] + 1])
    count = qpos - start
    if np.any(count > k):
        raise MalformedMaskError(f"a chunk holds {count.max()} patches, more than k={k}")
    if np.any(count == 0) and not allow_empty:
        raise MalformedMaskError("two adjacent queries with no patches between them")
    offs = np.arange(k)
    valid = offs[None, :] < count[:, None]
    idx = np.where(valid, start[:, None] + offs[None, :], 0)
    return ChunkLayout(qpos, idx, valid)


def aggregation_weights(q: np.ndarray, w: AggregatorWeights, valid: np.ndarray) -> np.ndarray:
    """Softmax over valid chunk positions of ``q @ w_alpha + b_alpha``."""
    return softmax_masked(q @ w.w_alpha + w.b_alpha, valid)


def _gate(q: np.ndarray, w: AggregatorWeights):
    g_raw = sigmoid(q @ w.w_g[:, 0] + w.b_g)
    return g_raw, np.clip(g_raw, w.epsilon, 1.0 - w.epsilon)


def gated_merge(q: np.ndarray, a: np.ndarray, w: AggregatorWeights):
    """Return ``(q_new, g)`` with ``g`` the clamped gate actually applied."""
    _, g = _gate(q, w)
    g_col = np.asarray(g)[..., None]
    # q + g (a - q) rather than (1 - g) q + g a: rounding can then never leave [q, a]
    return q + g_col * (a - q), g


def apply_gated_aggregation(seq: TokenSequence, w: AggregatorWeights, need_cache: bool = False,
                            allow_empty: bool = False):
    """Update every query from its own chunk; non-query tokens pass through unchanged.

    With ``allow_empty`` a query directly following another query is left as is.
    Returns ``(new_sequence, cache)``.
    """
    lay = seq.chunks(w.k, allow_empty)
    x = seq.tokens
    has = lay.valid.any(axis=1)
    q = x[lay.query_pos]
    patches = np.where(lay.valid[:, :, None], x[lay.patch_idx], 0.0).astype(x.dtype, copy=False)
    valid = lay.valid.copy()
    valid[~has, 0] = True  # placeholder column for flagged empty chunks, zeroed below
    alpha = aggregation_weights(q, w, valid)
    alpha[~has] = 0.0
    a = np.einsum("nk,nkd->nd", alpha, patches)
    g_raw, g = _gate(q, w)
    g = np.where(has, g, 0.0).astype(x.dtype)
    q_new = q + g[:, None] * (a - q)
    out = x.copy()
    out[lay.query_pos] = q_new
    cache = (lay, q, patches, alpha, a, g_raw, g, has, w) if need_cache else None
    return seq.with_tokens(out), cache


def apply_gated_aggregation_backward(cache, dout: np.ndarray):
    """Gradients w.r.t. the input tokens and the aggregator weights."""
    lay, q, patches, alpha, a, g_raw, g, has, w = cache
    dq_new = dout[lay.query_pos]
    dx = dout.copy()
    dq = (1.0 - g)[:, None] * dq_new
    da = g[:, None] * dq_new
    dg = np.einsum("nd,nd->n", dq_new, a - q)
    live = has & (g_raw > w.epsilon) & (g_raw < 1.0 - w.epsilon)
    dlg = np.where(live, dg * g_raw * (1.0 - g_raw), 0.0).astype(dout.dtype)
    dq += np.outer(dlg, w.w_g[:, 0])
    dpatches = alpha[:, :, None] * da[:, None, :]
    dalpha = np.einsum("nkd,nd->nk", patches, da)
    dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dq += dlogits @ w.w_alpha.T
    dx[lay.query_pos] = dq
    dx[lay.patch_idx[lay.valid]] += dpatches[lay.valid]  # each patch sits in exactly one chunk
    grads = AggregatorWeights(
        w_alpha=(q.T @ dlogits).astype(w.w_alpha.dtype),
        b_alpha=dlogits.sum(axis=0).astype(w.b_alpha.dtype),
        w_g=(q.T @ dlg)[:, None].astype(w.w_g.dtype),
        b_g=np.array(dlg.sum(), dtype=w.b_g.dtype),
        epsilon=w.epsilon,
    )
    return dx, grads
