"""Sequence mixers: Mamba, bidirectional Mamba, softmax attention and frame pooling.

Every mixer exposes ``*_forward(x, w, need_cache=...)`` returning
``(out, cache)`` and a matching ``*_backward(cache, dout)`` returning
``(dx, grads)`` where ``grads`` has the same dataclass layout as ``w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ssm import (
    SelectiveSsmParams,
    init_ssm_params,
    selective_scan_backward,
    selective_scan_forward,
)
from .tensorcore import DimensionError, Rng, silu, silu_grad

__all__ = [
    "MambaBlockWeights",
    "BiMambaBlockWeights",
    "AttentionBlockWeights",
    "init_mamba_block",
    "init_bimamba_block",
    "init_attention_block",
    "mamba_core_forward",
    "mamba_core_backward",
    "mamba_block_forward",
    "mamba_block_backward",
    "bimamba_forward",
    "bimamba_backward",
    "attention_block_forward",
    "attention_block_backward",
    "avg_pool_frame",
]


@dataclass
class MambaBlockWeights:
    w_in: np.ndarray  # (d, 2*d_inner): ssm branch then gate branch
    conv_kernel: np.ndarray  # (d_inner, w_conv), last tap multiplies the current step
    ssm: SelectiveSsmParams
    w_out: np.ndarray  # (d_inner, d)

    @property
    def d(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_inner(self) -> int:
        return self.conv_kernel.shape[0]


@dataclass
class BiMambaBlockWeights:
    fwd: MambaBlockWeights
    bwd: MambaBlockWeights
    w_merge: np.ndarray  # (2d, d)


@dataclass
class AttentionBlockWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    head_count: int = field(default=1)


def init_mamba_block(d: int, d_state: int, rng: Rng, expand: int = 2, w_conv: int = 4,
                     dtype=np.float32) -> MambaBlockWeights:
    if expand < 1:
        raise ValueError("expand must be >= 1")
    di = expand * d
    return MambaBlockWeights(
        w_in=rng.normal((d, 2 * di), 1.0 / math.sqrt(d), dtype),
        conv_kernel=rng.normal((di, w_conv), 1.0 / math.sqrt(w_conv), dtype),
        ssm=init_ssm_params(di, d_state, rng, dtype),
        w_out=rng.normal((di, d), 1.0 / math.sqrt(di), dtype),
    )


def init_bimamba_block(d: int, d_state: int, rng: Rng, expand: int = 2, w_conv: int = 4,
                       dtype=np.float32) -> BiMambaBlockWeights:
    fwd = init_mamba_block(d, d_state, rng, expand, w_conv, dtype)
    bwd = init_mamba_block(d, d_state, rng, expand, w_conv, dtype)
    return BiMambaBlockWeights(fwd, bwd, rng.normal((2 * d, d), 1.0 / math.sqrt(2 * d), dtype))


def init_attention_block(d: int, head_count: int, rng: Rng, dtype=np.float32) -> AttentionBlockWeights:
    if d % head_count:
        raise DimensionError(f"d={d} is not divisible by head_count={head_count}")
    s = 1.0 / math.sqrt(d)
    return AttentionBlockWeights(*(rng.normal((d, d), s, dtype) for _ in range(4)), head_count=head_count)


# --- Mamba ---------------------------------------------------------------

def _causal_conv(u: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T = u.shape[0]
    width = kernel.shape[1]
    padded = np.concatenate([np.zeros((width - 1, u.shape[1]), u.dtype), u])
    out = np.zeros_like(u)
    for j in range(width):
        out += padded[j:j + T] * kernel[:, j]
    return out, padded


def mamba_core_forward(x: np.ndarray, w: MambaBlockWeights, need_cache: bool = True):
    """Mamba mixer without the residual: in-proj, causal conv, SiLU, scan, gate, out-proj."""
    if x.ndim != 2 or x.shape[1] != w.d:
        raise DimensionError(f"mamba block expects (T, {w.d}), got {x.shape}")
    di = w.d_inner
    u = x @ w.w_in
    u_ssm, z = u[:, :di], u[:, di:]
    v, padded = _causal_conv(u_ssm, w.conv_kernel)
    xs = silu(v)
    y, scan_cache = selective_scan_forward(xs, w.ssm, need_cache)
    gate = silu(z)
    o = y * gate
    out = o @ w.w_out
    cache = (x, w, z, v, padded, y, gate, o, scan_cache) if need_cache else None
    return out, cache


def mamba_core_backward(cache, dout: np.ndarray):
    x, w, z, v, padded, y, gate, o, scan_cache = cache
    T = x.shape[0]
    width = w.conv_kernel.shape[1]
    dw_out = o.T @ dout
    do = dout @ w.w_out.T
    dy = do * gate
    dz = do * y * silu_grad(z)
    dxs, dssm = selective_scan_backward(scan_cache, dy)
    dv = dxs * silu_grad(v)
    dkernel = np.empty_like(w.conv_kernel)
    dpadded = np.zeros_like(padded)
    for j in range(width):
        dkernel[:, j] = (dv * padded[j:j + T]).sum(axis=0)
        dpadded[j:j + T] += dv * w.conv_kernel[:, j]
    du = np.concatenate([dpadded[width - 1:], dz], axis=1)
    grads = MambaBlockWeights(w_in=x.T @ du, conv_kernel=dkernel, ssm=dssm, w_out=dw_out)
    return du @ w.w_in.T, grads


def mamba_block_forward(x: np.ndarray, w: MambaBlockWeights, need_cache: bool = False):
    """Unidirectional Mamba block with residual: ``x + core(x)``."""
    core, cache = mamba_core_forward(x, w, need_cache)
    return x + core, cache


def mamba_block_backward(cache, dout: np.ndarray):
    dx, grads = mamba_core_backward(cache, dout)
    return dx + dout, grads


# --- Bi-Mamba ------------------------------------------------------------

def bimamba_forward(x: np.ndarray, w: BiMambaBlockWeights, need_cache: bool = False):
    """Left-to-right and right-to-left Mamba cores, concatenated and merged, plus residual."""
    y_f, cache_f = mamba_core_forward(x, w.fwd, need_cache)
    y_b_rev, cache_b = mamba_core_forward(np.ascontiguousarray(x[::-1]), w.bwd, need_cache)
    cat = np.concatenate([y_f, y_b_rev[::-1]], axis=1)
    out = x + cat @ w.w_merge
    cache = (cat, w, cache_f, cache_b) if need_cache else None
    return out, cache


def bimamba_backward(cache, dout: np.ndarray):
    cat, w, cache_f, cache_b = cache
    d = dout.shape[1]
    dw_merge = cat.T @ dout
    dcat = dout @ w.w_merge.T
    dx_f, g_f = mamba_core_backward(cache_f, dcat[:, :d])
    dx_b_rev, g_b = mamba_core_backward(cache_b, np.ascontiguousarray(dcat[::-1, d:]))
    dx = dout + dx_f + dx_b_rev[::-1]
    return dx, BiMambaBlockWeights(g_f, g_b, dw_merge)


# --- attention -----------------------------------------------------------

def attention_block_forward(x: np.ndarray, w: AttentionBlockWeights, need_cache: bool = False,
                            row_block: int = 1024):
    """Bidirectional multi-head softmax attention with residual.

    Without a cache, query rows are processed ``row_block`` at a time so the
    score matrix never materialises in full; the work stays quadratic in T.
    """
    T, d = x.shape
    if d != w.w_q.shape[0]:
        raise DimensionError(f"attention block expects (T, {w.w_q.shape[0]}), got {x.shape}")
    if d % w.head_count:
        raise DimensionError(f"d={d} is not divisible by head_count={w.head_count}")
    h = w.head_count
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    q = (x @ w.w_q).reshape(T, h, dh).transpose(1, 0, 2)
    k = (x @ w.w_k).reshape(T, h, dh).transpose(1, 0, 2)
    v = (x @ w.w_v).reshape(T, h, dh).transpose(1, 0, 2)
    if need_cache:
        s = np.einsum("htd,hsd->hts", q, k) * scale
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hts,hsd->htd", p, v)
    else:
        ctx = np.empty_like(q)
        kt = np.ascontiguousarray(k.transpose(0, 2, 1))
        qs = q * scale
        for lo in range(0, T, row_block):
            s = np.matmul(qs[:, lo:lo + row_block], kt)
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            ctx[:, lo:lo + row_block] = np.matmul(s, v)
        p = None
    merged = ctx.transpose(1, 0, 2).reshape(T, d)
    out = x + merged @ w.w_o
    cache = (x, w, q, k, v, p, merged) if need_cache else None
    return out, cache


def attention_block_backward(cache, dout: np.ndarray):
    x, w, q, k, v, p, merged = cache
    T, d = x.shape
    h = w.head_count
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    dw_o = merged.T @ dout
    dctx = (dout @ w.w_o.T).reshape(T, h, dh).transpose(1, 0, 2)
    dp = np.einsum("htd,hsd->hts", dctx, v)
    dv = np.einsum("hts,htd->hsd", p, dctx)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = np.einsum("hts,hsd->htd", ds, k)
    dk = np.einsum("hts,htd->hsd", ds, q)

    def flat(t):
        return t.transpose(1, 0, 2).reshape(T, d)

    dq, dk, dv = flat(dq), flat(dk), flat(dv)
    grads = AttentionBlockWeights(x.T @ dq, x.T @ dk, x.T @ dv, dw_o, head_count=h)
    dx = dout + dq @ w.w_q.T + dk @ w.w_k.T + dv @ w.w_v.T
    return dx, grads


def avg_pool_frame(frame_tokens: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping groups of ``factor`` consecutive tokens."""
    n, d = frame_tokens.shape
    if factor < 1 or n % factor:
        raise DimensionError(f"cannot pool {n} tokens by factor {factor}")
    return frame_tokens.reshape(n // factor, factor, d).mean(axis=1)
