"""Dense numeric primitives shared by every other module.

Tensors are plain row-major ``numpy.ndarray`` values (float32 at runtime,
float64 inside gradient checks). This module adds the few operations the
compressor needs on top of numpy, the activation helpers, and a portable
SplitMix64 generator so weight initialisation is reproducible bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Iterator

import numpy as np
from scipy.special import expit

__all__ = [
    "DimensionError",
    "EmptyChunkError",
    "ParameterError",
    "ContractError",
    "Rng",
    "splitmix64",
    "affine",
    "softmax_masked",
    "rng_standard_normal",
    "sigmoid",
    "softplus",
    "silu",
    "silu_grad",
    "named_arrays",
    "map_arrays",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyChunkError(ValueError):
    """A masked reduction was asked to normalise over zero valid entries."""


class ParameterError(ValueError):
    """A numeric parameter lies outside its admissible range."""


class ContractError(RuntimeError):
    """A cached forward state does not match the arguments of a backward call."""


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once; return ``(new_state, output)``."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _splitmix64_block(state: int, n: int) -> np.ndarray:
    # output i only depends on state + (i+1)*gamma, so the stream vectorises
    with np.errstate(over="ignore"):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(state) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream with Box-Muller normals.

    The stream depends only on the 64-bit seed, so two implementations
    seeded alike draw identical weights.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        out = _splitmix64_block(self.state, n)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 samples in [0, 1) built from the top 53 bits."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def standard_normal(self, n: int) -> np.ndarray:
        return rng_standard_normal(self, n)

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape).tolist()) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return (std * rng_standard_normal(self, n)).reshape(shape).astype(dtype)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (multiply-shift, negligible bias for small ``high``)."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def split(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())


def rng_standard_normal(rng: Rng, n: int) -> np.ndarray:
    """Draw ``n`` standard normals via Box-Muller on consecutive uniform pairs."""
    if n <= 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1-u in (0, 1]
    theta = 2.0 * math.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = radius * np.cos(theta)
    z[:, 1] = radius * np.sin(theta)
    return z.reshape(-1)[:n]


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` with explicit shape checking."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    out = x @ w
    if b is not None:
        b = np.asarray(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"affine: bias {b.shape} does not match output {out.shape}")
        out = out + b
    return out


def softmax_masked(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``valid`` entries.

    Masked entries come out as exact zeros. Works row-wise on batched input.
    """
    logits = np.asarray(logits)
    valid = np.asarray(valid, dtype=bool)
    if logits.shape != valid.shape:
        raise DimensionError(f"softmax_masked: logits {logits.shape} vs mask {valid.shape}")
    if not np.all(valid.any(axis=-1)):
        raise EmptyChunkError("empty chunk")
    shifted = np.where(valid, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(shifted), 0.0)
    return (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype, copy=False)


def sigmoid(x):
    return expit(x)


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(0.0, x).astype(np.result_type(x, np.float32), copy=False)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def named_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every array reachable from a weights dataclass.

    List fields named ``layers`` yield ``layer0.``, ``layer1.`` ... prefixes;
    fields carrying ``metadata={"flatten": True}`` contribute no name segment.
    """
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            yield prefix + f.name, value
        elif dataclasses.is_dataclass(value):
            sub = prefix if f.metadata.get("flatten") else f"{prefix}{f.name}."
            yield from named_arrays(value, sub)
        elif isinstance(value, list):
            stem = f.name[:-1] if f.name.endswith("s") else f.name
            for i, item in enumerate(value):
                yield from named_arrays(item, f"{prefix}{stem}{i}.")


def map_arrays(fn, obj):
    """Rebuild a weights dataclass with ``fn`` applied to every array field."""
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            changes[f.name] = fn(value)
        elif dataclasses.is_dataclass(value):
            changes[f.name] = map_arrays(fn, value)
        elif isinstance(value, list):
            changes[f.name] = [map_arrays(fn, item) for item in value]
    return dataclasses.replace(obj, **changes)
