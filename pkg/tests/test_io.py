import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tstar.io import (
    BadMagicError,
    TensorFormatError,
    TruncatedError,
    VersionMismatchError,
    WeightsMismatchError,
    config_to_dict,
    decode_tensor,
    encode_tensor,
    load_weights_into,
    parse_config,
    read_header,
    schema_path,
    tensor_read,
    tensor_write,
    weights_archive_read,
    weights_archive_write,
)
from tstar.pipeline import ConfigError, MambaMiaConfig, init_mambamia, mambamia_compress, token_budget
from tstar.tensorcore import Rng, named_arrays


def test_small_tensor_layout_by_hand(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.bin"
    tensor_write(path, x)
    raw = path.read_bytes()
    assert len(raw) == 50
    expected = b"STTC" + struct.pack("<IBB", 1, 0, 2) + struct.pack("<QQ", 2, 3)
    expected += struct.pack("<6f", *range(6))
    assert raw == expected


@settings(max_examples=60, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=True, allow_infinity=True, width=32)))
def test_tensor_round_trip_is_bit_identical(x):
    y, end = decode_tensor(encode_tensor(x))
    assert y.dtype == x.dtype and y.shape == x.shape
    assert y.tobytes() == x.tobytes()
    assert end == len(encode_tensor(x))


def test_big_endian_input_is_stored_little_endian():
    x = np.arange(4, dtype=">f8")
    y, _ = decode_tensor(encode_tensor(x))
    assert np.array_equal(x, y)
    assert encode_tensor(x)[-8:] == struct.pack("<d", 3.0)


def test_rejects_other_dtypes():
    with pytest.raises(TypeError):
        encode_tensor(np.zeros(3, np.int32))


def test_decode_errors_report_offsets():
    good = encode_tensor(np.ones((2, 2)))
    with pytest.raises(BadMagicError) as exc:
        decode_tensor(b"XXXX" + good[4:])
    assert exc.value.offset == 0
    with pytest.raises(VersionMismatchError) as exc:
        decode_tensor(good[:4] + struct.pack("<I", 2) + good[8:])
    assert exc.value.offset == 4
    with pytest.raises(TruncatedError) as exc:
        decode_tensor(good[:14])
    assert exc.value.offset == 10
    assert "byte offset 10" in str(exc.value)
    with pytest.raises(TruncatedError):
        decode_tensor(good[:-1])


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(encode_tensor(np.ones(2)) + b"\0")
    with pytest.raises(TensorFormatError, match="trailing"):
        tensor_read(path)


def test_read_header_skips_payload(tmp_path):
    path = tmp_path / "t.bin"
    full = encode_tensor(np.zeros((3, 4, 5), np.float64))
    path.write_bytes(full[:50])  # payload cut short; header is intact
    header = read_header(path)
    assert header.dims == (3, 4, 5)
    assert header.dtype == "f64"
    assert header.version == 1
    with pytest.raises(TruncatedError):
        tensor_read(path)


def test_weights_archive_round_trip(tmp_path):
    cfg = MambaMiaConfig(d=4, d_state=2, layers=1, k=2, n_patches=4)
    w = init_mambamia(cfg, 3)
    path = tmp_path / "w.stta"
    weights_archive_write(path, w)
    named = weights_archive_read(path)
    assert list(named) == [n for n, _ in named_arrays(w)]
    for n, a in named_arrays(w):
        assert named[n].tobytes() == a.tobytes()
    fresh = load_weights_into(init_mambamia(cfg, 99), named)
    frames = Rng(1).normal((3, 4, 4), 1.0, np.float32)
    assert mambamia_compress(frames, w, cfg)[0].tobytes() == mambamia_compress(frames, fresh, cfg)[0].tobytes()


def test_three_tensor_archive(tmp_path):
    items = [("a", np.ones(2, np.float32)), ("b.c", np.zeros((1, 2))), ("d", np.array(3.5))]
    path = tmp_path / "w.stta"
    weights_archive_write(path, items)
    named = weights_archive_read(path)
    assert list(named) == ["a", "b.c", "d"]
    assert all(named[n].tobytes() == a.tobytes() for n, a in items)


def test_archive_errors(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        weights_archive_write(tmp_path / "x", [("a", np.ones(1)), ("a", np.ones(1))])
    cfg = MambaMiaConfig(d=4, d_state=2, layers=1, k=2, n_patches=4)
    named = dict(named_arrays(init_mambamia(cfg, 0)))
    named.pop("query")
    named["bogus"] = np.ones(1, np.float32)
    with pytest.raises(WeightsMismatchError) as exc:
        load_weights_into(init_mambamia(cfg, 0), named)
    assert exc.value.missing == ["query"] and exc.value.extra == ["bogus"]
    path = tmp_path / "bad.stta"
    path.write_bytes(b"STTC" + b"\0" * 8)
    with pytest.raises(BadMagicError):
        weights_archive_read(path)


def test_parse_config_strict():
    cfg = parse_config('{"d": 64, "s": "1/3", "k": 10}')
    assert cfg.d == 64 and str(cfg.s) == "1/3"
    assert parse_config('{"d": 8, "s": 1}').s == 1
    for text, field in [('{"s": "1/3"}', "d"), ('{"d": 8, "depth": 3}', "depth"), ('{"d": 8, "s": 0.5}', "s"),
                        ('{"d": 8, "s": "3/2"}', "s"), ('{"d": 0}', "d"), ('[1]', "<json>"), ('{"d": ', "<json>")]:
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.field == field


def test_config_round_trips_through_schema():
    jsonschema = pytest.importorskip("jsonschema")
    schema = json.loads(schema_path("config").read_text())
    cfg = MambaMiaConfig(d=32, d_state=8, layers=1, k=4, n_patches=16, s="1/2")
    doc = config_to_dict(cfg)
    jsonschema.validate(doc, schema)
    assert parse_config(json.dumps(doc)) == cfg
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"d": 8, "extra": 1}, schema)


def test_scalar_and_empty_archive(tmp_path):
    tensor_write(tmp_path / "s", np.array(2.5))
    y = tensor_read(tmp_path / "s")
    assert y.shape == () and y == 2.5
    assert (tmp_path / "s").stat().st_size == 10 + 8
    weights_archive_write(tmp_path / "e", [])
    assert weights_archive_read(tmp_path / "e") == {}


def test_flipped_payload_byte_changes_one_element(tmp_path):
    x = np.arange(6, dtype=np.float32)
    path = tmp_path / "t"
    tensor_write(path, x)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    assert np.count_nonzero(tensor_read(path) != x) == 1


def test_config_defaults_and_budget():
    cfg = parse_config('{"d": 32}')
    assert (cfg.k, str(cfg.s), cfg.n_patches, cfg.layers, cfg.d_state, cfg.expand, cfg.w_conv) == \
        (10, "1/3", 100, 2, 16, 2, 4)
    cfg = parse_config('{"d": 32, "k": 10, "s": "1/3", "n_patches": 100}')
    assert token_budget(128, cfg.n_patches, cfg.k, cfg.s) == 430
    with pytest.raises(ConfigError) as exc:
        parse_config('{"d": 32, "s": "0/3"}')
    assert exc.value.field == "s"
