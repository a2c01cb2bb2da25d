"""Selective state-space scan with zero-order-hold discretisation.

Per step ``k`` the scan computes an input-dependent step size, input and
output projections, discretises the diagonal state matrix and runs

    h_k = exp(delta_k A) * h_{k-1} + bbar_k * x_k
    y_k = sum_s C_k[s] h_k[:, s]

The recurrence is sequential in ``k``; the inner loops are compiled with
numba. The backward pass is an explicit reverse scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .tensorcore import (
    ContractError,
    DimensionError,
    ParameterError,
    Rng,
    sigmoid,
    softplus,
)

__all__ = [
    "SelectiveSsmParams",
    "ScanCache",
    "SERIES_THRESHOLD",
    "discretize_zoh",
    "init_ssm_params",
    "selective_scan_forward",
    "selective_scan_backward",
]

# below this |delta*a| the series form of bbar replaces (exp(z)-1)/z
SERIES_THRESHOLD = 1e-6


@dataclass
class SelectiveSsmParams:
    a_log: np.ndarray  # (d_inner, d_state); A = -exp(a_log)
    w_b: np.ndarray  # (d_inner, d_state)
    w_c: np.ndarray  # (d_inner, d_state)
    w_delta: np.ndarray  # (d_inner, 1)
    b_delta: np.ndarray  # () scalar

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def state_matrix(self) -> np.ndarray:
        return -np.exp(self.a_log)


@dataclass
class ScanCache:
    """Per-step intermediates kept by the forward scan for the reverse pass."""

    x: np.ndarray
    u_delta: np.ndarray  # pre-softplus step-size logits (T,)
    delta: np.ndarray  # (T,)
    b: np.ndarray  # (T, d_state)
    c: np.ndarray  # (T, d_state)
    h: np.ndarray  # (T, d_inner, d_state)
    params: SelectiveSsmParams
    fingerprint: int


def _fingerprint(p: SelectiveSsmParams) -> int:
    return hash((p.a_log.tobytes(), p.w_b.tobytes(), p.w_c.tobytes(),
                 p.w_delta.tobytes(), p.b_delta.tobytes()))


def init_ssm_params(d_inner: int, d_state: int, rng: Rng, dtype=np.float32,
                    dt_min: float = 1e-3, dt_max: float = 0.1) -> SelectiveSsmParams:
    """Stable initialisation: A = -(1..d_state) per channel, softplus(b_delta) log-uniform in [dt_min, dt_max]."""
    a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
    scale = 1.0 / math.sqrt(d_inner)
    w_b = rng.normal((d_inner, d_state), scale)
    w_c = rng.normal((d_inner, d_state), scale)
    w_delta = rng.normal((d_inner, 1), 0.1 * scale)
    dt = math.exp(math.log(dt_min) + rng.uniform(1)[0] * (math.log(dt_max) - math.log(dt_min)))
    b_delta = np.array(dt + math.log(-math.expm1(-dt)))  # softplus^-1(dt)
    return SelectiveSsmParams(*(np.asarray(v, dtype=dtype) for v in (a_log, w_b, w_c, w_delta, b_delta)))


def discretize_zoh(a, b, delta):
    """Zero-order hold for a diagonal state matrix, elementwise.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta*a)`` and
    ``b_bar = (delta*a)^-1 (exp(delta*a) - 1) delta*b``. For
    ``|delta*a| < SERIES_THRESHOLD`` the second-order series is used.
    """
    a, b, delta = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (a, b, delta)))
    if np.any(delta <= 0):
        raise ParameterError("discretize_zoh: delta must be positive")
    z = delta * a
    a_bar = np.exp(z)
    small = np.abs(z) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    exact = np.expm1(z) / safe_a * b
    series = delta * b * (1.0 + 0.5 * z)
    return a_bar, np.where(small, series, exact)


@numba.njit(cache=True, error_model="numpy")
def _scan_kernel(x, delta, b, c, a, h_out, store):
    T, di = x.shape
    ds = a.shape[1]
    h = np.zeros((di, ds), dtype=x.dtype)
    y = np.zeros((T, di), dtype=x.dtype)
    for t in range(T):
        dt = delta[t]
        for ch in range(di):
            xv = x[t, ch]
            acc = 0.0
            for s in range(ds):
                z = dt * a[ch, s]
                em1 = math.expm1(z)
                if abs(z) < 1e-6:
                    fac = dt * (1.0 + 0.5 * z)
                else:
                    fac = em1 / a[ch, s]
                hv = (em1 + 1.0) * h[ch, s] + fac * b[t, s] * xv
                h[ch, s] = hv
                acc += c[t, s] * hv
            y[t, ch] = acc
        if store:
            h_out[t] = h
    return y


@numba.njit(cache=True, error_model="numpy")
def _scan_backward_kernel(x, delta, b, c, a, h, dy):
    T, di = x.shape
    ds = a.shape[1]
    dx = np.zeros((T, di), dtype=x.dtype)
    ddelta = np.zeros(T, dtype=x.dtype)
    db = np.zeros((T, ds), dtype=x.dtype)
    dc = np.zeros((T, ds), dtype=x.dtype)
    da = np.zeros((di, ds), dtype=x.dtype)
    carry = np.zeros((di, ds), dtype=x.dtype)  # abar_{t+1} * dh_{t+1}
    for t in range(T - 1, -1, -1):
        dt = delta[t]
        acc_delta = 0.0
        for ch in range(di):
            xv = x[t, ch]
            gy = dy[t, ch]
            acc_x = 0.0
            for s in range(ds):
                av = a[ch, s]
                z = dt * av
                em1 = math.expm1(z)
                abar = em1 + 1.0
                bv = b[t, s]
                dh = carry[ch, s] + gy * c[t, s]
                dc[t, s] += gy * h[t, ch, s]
                hprev = h[t - 1, ch, s] if t > 0 else 0.0
                d_abar = dh * hprev
                d_bbar = dh * xv
                if abs(z) < 1e-6:
                    fac = dt * (1.0 + 0.5 * z)
                    dfac_ddelta = 1.0 + z
                    dfac_da = 0.5 * dt * dt
                else:
                    fac = em1 / av
                    dfac_ddelta = abar
                    dfac_da = (dt * abar - fac) / av
                acc_x += dh * fac * bv
                db[t, s] += d_bbar * fac
                acc_delta += d_abar * av * abar + d_bbar * bv * dfac_ddelta
                da[ch, s] += d_abar * dt * abar + d_bbar * bv * dfac_da
                carry[ch, s] = dh * abar
            dx[t, ch] = acc_x
        ddelta[t] = acc_delta
    return dx, ddelta, db, dc, da


def _check(x_seq: np.ndarray, params: SelectiveSsmParams) -> None:
    if x_seq.ndim != 2 or x_seq.shape[1] != params.d_inner:
        raise DimensionError(f"scan input {x_seq.shape} does not match d_inner={params.d_inner}")
    if x_seq.shape[0] < 1:
        raise DimensionError("scan needs at least one step")


def selective_scan_forward(x_seq: np.ndarray, params: SelectiveSsmParams, need_cache: bool = True):
    """Run the selective scan over ``x_seq`` of shape (T, d_inner).

    Returns ``(y_seq, cache)``; ``cache`` is ``None`` when ``need_cache`` is false,
    which avoids the O(T * d_inner * d_state) hidden-state history.
    """
    x_seq = np.ascontiguousarray(x_seq)
    _check(x_seq, params)
    dtype = x_seq.dtype
    u_delta = (x_seq @ params.w_delta)[:, 0] + params.b_delta
    delta = softplus(u_delta).astype(dtype)
    b = np.ascontiguousarray(x_seq @ params.w_b)
    c = np.ascontiguousarray(x_seq @ params.w_c)
    a = np.ascontiguousarray(params.state_matrix().astype(dtype))
    T = x_seq.shape[0]
    if need_cache:
        h = np.empty((T, params.d_inner, params.d_state), dtype=dtype)
    else:
        h = np.empty((1, params.d_inner, params.d_state), dtype=dtype)
    y = _scan_kernel(x_seq, delta, b, c, a, h, need_cache)
    if not need_cache:
        return y, None
    cache = ScanCache(x_seq, u_delta, delta, b, c, h, params, _fingerprint(params))
    return y, cache


def selective_scan_backward(cache: ScanCache, dy_seq: np.ndarray):
    """Reverse scan. Returns ``(dx_seq, dparams)`` where ``dparams`` mirrors the params layout."""
    if cache is None:
        raise ContractError("backward called without a forward cache")
    p = cache.params
    if _fingerprint(p) != cache.fingerprint:
        raise ContractError("scan parameters changed since the forward pass; cache is stale")
    if dy_seq.shape != cache.x.shape:
        raise ContractError(f"cotangent {dy_seq.shape} does not match cached output {cache.x.shape}")
    x = cache.x
    dtype = x.dtype
    a = np.ascontiguousarray(p.state_matrix().astype(dtype))
    dx, ddelta, db, dc, da = _scan_backward_kernel(
        x, cache.delta, cache.b, cache.c, a, cache.h, np.ascontiguousarray(dy_seq, dtype=dtype))
    du = ddelta * sigmoid(cache.u_delta).astype(dtype)
    dx += db @ p.w_b.T + dc @ p.w_c.T + np.outer(du, p.w_delta[:, 0])
    grads = SelectiveSsmParams(
        a_log=(da * a).astype(p.a_log.dtype),
        w_b=(x.T @ db).astype(p.w_b.dtype),
        w_c=(x.T @ dc).astype(p.w_c.dtype),
        w_delta=(x.T @ du)[:, None].astype(p.w_delta.dtype),
        b_delta=np.array(du.sum(), dtype=p.b_delta.dtype),
    )
    return dx, grads
