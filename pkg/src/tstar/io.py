"""File formats: single-tensor container, named-weights archive, JSON model config.

Tensor record (little-endian)::

    b"STTC" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u64 dims | payload

Weights archive::

    b"STTA" | u32 version=1 | u32 count | count x (u16 name_len | utf-8 name | tensor record)
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .pipeline import ConfigError, MambaMiaConfig
from .tensorcore import named_arrays

__all__ = [
    "TensorFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedError",
    "WeightsMismatchError",
    "TensorFileHeader",
    "encode_tensor",
    "decode_tensor",
    "tensor_write",
    "tensor_read",
    "read_header",
    "weights_archive_write",
    "weights_archive_read",
    "load_weights_into",
    "parse_config",
    "config_to_dict",
    "schema_path",
]

TENSOR_MAGIC = b"STTC"
ARCHIVE_MAGIC = b"STTA"
VERSION = 1
MAX_NDIM = 8
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class WeightsMismatchError(ValueError):
    def __init__(self, missing: list[str], extra: list[str]):
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if extra:
            parts.append("unexpected: " + ", ".join(extra))
        super().__init__("weights do not match the model; " + "; ".join(parts))
        self.missing = missing
        self.extra = extra


@dataclass
class TensorFileHeader:
    magic: bytes
    version: int
    dtype: str  # "f32" or "f64"
    dims: tuple
    header_size: int

    @property
    def ndim(self) -> int:
        return len(self.dims)


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TruncatedError(f"truncated {what}: need {n} bytes, have {len(buf) - offset}", offset)
    return buf[offset:offset + n]


def _parse_header(buf: bytes, offset: int = 0) -> TensorFileHeader:
    start = offset
    magic = _take(buf, offset, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}", offset)
    offset += 4
    (version,) = struct.unpack("<I", _take(buf, offset, 4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}", offset)
    offset += 4
    code, ndim = struct.unpack("<BB", _take(buf, offset, 2, "dtype/ndim"))
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", offset)
    if ndim > MAX_NDIM:
        raise TensorFormatError(f"ndim {ndim} exceeds {MAX_NDIM}", offset + 1)
    offset += 2
    dims = struct.unpack(f"<{ndim}Q", _take(buf, offset, 8 * ndim, "dims"))
    offset += 8 * ndim
    return TensorFileHeader(magic, version, "f32" if code == 0 else "f64", dims, offset - start)


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype.kind == "f" and array.dtype.itemsize in (4, 8):
        array = array.astype(array.dtype.newbyteorder("="), copy=False)
    if array.dtype not in _CODES:
        raise TypeError(f"only float32/float64 tensors are storable, got {array.dtype}")
    if array.ndim > MAX_NDIM:
        raise ValueError(f"ndim {array.ndim} exceeds {MAX_NDIM}")
    code = _CODES[array.dtype]
    head = TENSOR_MAGIC + struct.pack("<IBB", VERSION, code, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record at ``offset``; return ``(array, next_offset)``."""
    header = _parse_header(buf, offset)
    offset += header.header_size
    dtype = _DTYPES[0 if header.dtype == "f32" else 1]
    count = int(np.prod(header.dims, dtype=np.int64)) if header.dims else 1
    payload = _take(buf, offset, count * dtype.itemsize, "payload")
    array = np.frombuffer(payload, dtype=dtype).reshape(header.dims).astype(dtype.newbyteorder("="))
    return array, offset + len(payload)


def tensor_write(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def tensor_read(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return array


def read_header(path) -> TensorFileHeader:
    """Parse only the header of a tensor file; the payload is not read."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) == 10:
            ndim = head[9]
            head += fh.read(8 * min(ndim, MAX_NDIM + 1))
    return _parse_header(head)


def weights_archive_write(path, named) -> None:
    """Write ``(name, array)`` pairs (a dict, a pair list, or a weights dataclass)."""
    if hasattr(named, "__dataclass_fields__"):
        named = list(named_arrays(named))
    elif isinstance(named, dict):
        named = list(named.items())
    names = [n for n, _ in named]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValueError(f"duplicate weight names: {', '.join(dupes)}")
    parts = [ARCHIVE_MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, array in named:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"weight name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw + encode_tensor(array))
    Path(path).write_bytes(b"".join(parts))


def weights_archive_read(path) -> dict:
    """Read an archive into an insertion-ordered ``{name: array}`` dict."""
    buf = Path(path).read_bytes()
    magic = _take(buf, 0, 4, "magic")
    if magic != ARCHIVE_MAGIC:
        raise BadMagicError(f"bad archive magic {magic!r}, expected {ARCHIVE_MAGIC!r}", 0)
    version, count = struct.unpack("<II", _take(buf, 4, 8, "archive header"))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported archive version {version}", 4)
    offset = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _take(buf, offset, 2, "name length"))
        offset += 2
        name = _take(buf, offset, n, "name").decode("utf-8")
        if name in out:
            raise TensorFormatError(f"duplicate weight name {name!r}", offset)
        offset += n
        out[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise TensorFormatError(f"{len(buf) - offset} trailing bytes after last entry", offset)
    return out


def load_weights_into(model, named: dict):
    """Copy ``named`` arrays into a freshly initialised weights dataclass of the right layout."""
    slots = dict(named_arrays(model))
    missing = [n for n in slots if n not in named]
    extra = [n for n in named if n not in slots]
    if missing or extra:
        raise WeightsMismatchError(missing, extra)
    for name, dest in slots.items():
        src = named[name]
        if src.shape != dest.shape:
            raise WeightsMismatchError([f"{name} (shape {dest.shape}, file has {src.shape})"], [])
        if src.dtype != dest.dtype:
            raise WeightsMismatchError([f"{name} (dtype {dest.dtype}, file has {src.dtype})"], [])
        dest[...] = src
    return model


# --- config --------------------------------------------------------------

_CONFIG_KEYS = [f.name for f in fields(MambaMiaConfig)]


def parse_config(text: str) -> MambaMiaConfig:
    """Strict JSON config: unknown keys rejected, ``d`` required, ``s`` an exact rational string."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<json>", "config must be a JSON object")
    unknown = sorted(set(raw) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(unknown[0], f"unknown config key(s): {', '.join(unknown)}")
    if "d" not in raw:
        raise ConfigError("d", "required")
    if "s" in raw and not isinstance(raw["s"], (str, int)) or isinstance(raw.get("s"), bool):
        raise ConfigError("s", f"must be a rational string such as \"1/3\", got {raw['s']!r}")
    return MambaMiaConfig(**raw)


def config_to_dict(cfg: MambaMiaConfig) -> dict:
    out = asdict(cfg)
    out["s"] = f"{cfg.s.numerator}/{cfg.s.denominator}"
    return out


def schema_path(name: str) -> Path:
    """Location of a shipped JSON schema (``config`` or ``report``)."""
    return Path(__file__).parent / "schemas" / f"{name}.schema.json"
