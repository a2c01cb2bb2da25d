"""End-to-end acceptance checks, one test per criterion.

A pass/fail line per criterion is printed in the terminal summary. The
training and benchmark checks are slow (several minutes each).
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from oracles import naive_scan
from tstar.aggregate import AggregatorWeights, gated_merge
from tstar.bench import method_slopes, read_csv
from tstar.cli import main
from tstar.io import (
    load_weights_into,
    tensor_read,
    tensor_write,
    weights_archive_read,
    weights_archive_write,
)
from tstar.pipeline import MambaMiaConfig, init_mambamia, mambamia_compress, token_budget
from tstar.ssm import SERIES_THRESHOLD, SelectiveSsmParams, discretize_zoh, selective_scan_forward
from tstar.tensorcore import Rng, named_arrays
from tstar.train import GROUPS, NeedleTaskSpec, group_errors, probe_gradcheck, train_needle_probe

FROZEN = dict(d=32, d_state=8, layers=1, k=4, n_patches=16)
FROZEN_SEED = 7
FROZEN_STEPS = 2000
FROZEN_THRESHOLD = 0.90


def _compress_cli(tmp_path, m, mode="joint", name="out.sttc"):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d": 8, "d_state": 4, "layers": 1, "k": 10, "s": "1/3", "n_patches": 100}))
    inp = tmp_path / f"in{m}.sttc"
    if not inp.exists():
        tensor_write(inp, Rng(m).normal((m, 100, 8), 1.0, np.float32))
    out = tmp_path / name
    code = main(["compress", "--input", str(inp), "--config", str(cfg), "--seed", "0",
                 "--mode", mode, "--output", str(out)])
    return code, out


@pytest.mark.criterion(1, "token budgets 430 / 860 / 1,280")
def test_token_budgets(tmp_path):
    assert token_budget(128, 100, 10, "1/3") == 430
    assert token_budget(256, 100, 10, "1/3") == 860
    for m, mode, expected in [(128, "joint", 430), (256, "joint", 860), (128, "per_frame", 1280)]:
        code, out = _compress_cli(tmp_path, m, mode)
        assert code == 0
        assert tensor_read(out).shape == (expected, 8)


@pytest.mark.criterion(2, "scan equals unrolled recurrence on 100 instances")
def test_scan_oracle_equivalence():
    rng = Rng(2024)
    worst = 0.0
    for _ in range(100):
        T = 1 + int(rng.integers(64, 1)[0])
        di = 1 + int(rng.integers(8, 1)[0])
        ds = 1 + int(rng.integers(8, 1)[0])
        p = SelectiveSsmParams(rng.normal((di, ds), 0.7), rng.normal((di, ds)), rng.normal((di, ds)),
                               rng.normal((di, 1), 0.5), np.array(rng.normal((1,))[0]))
        x = rng.normal((T, di))
        y, _ = selective_scan_forward(x, p, need_cache=False)
        worst = max(worst, float(np.abs(y - naive_scan(x, p.a_log, p.w_b, p.w_c, p.w_delta, p.b_delta)).max()))
    assert worst < 1e-6


@pytest.mark.criterion(3, "zero-order hold closed forms and series continuity")
def test_zoh_correctness():
    abar, bbar = discretize_zoh(-1.0, 1.0, 0.5)
    assert abs(abar - 0.606531) < 1e-6 and abs(abar - math.exp(-0.5)) < 1e-12
    assert abs(bbar - 0.393469) < 1e-6 and abs(bbar - (1 - math.exp(-0.5))) < 1e-12
    abar, _ = discretize_zoh(-1.0, 1.0, math.log(2))
    assert abs(abar - 0.5) < 1e-12
    for a in (-1.0, -3.0, -0.25):
        delta = SERIES_THRESHOLD / abs(a)
        _, series = discretize_zoh(a, 1.0, delta * (1 - 1e-9))
        _, exact = discretize_zoh(a, 1.0, delta * (1 + 1e-9))
        assert abs(series - exact) < 1e-9


@pytest.mark.criterion(4, "analytic gradients match finite differences for every group")
def test_gradient_suite():
    # one- and two-layer stacks, both above 10^3 coordinates so random probe directions are used
    configs = [MambaMiaConfig(d=8, d_state=4, layers=1, k=4, n_patches=8, s="1/2"),
               MambaMiaConfig(d=8, d_state=4, layers=2, k=4, n_patches=8, s="1/2")]
    seen = {}
    for cfg in configs:
        for seed in range(5):
            report = probe_gradcheck(cfg, seed=seed)
            assert report.mode == "probe"
            for group, err in group_errors(report).items():
                seen[group] = max(seen.get(group, 0.0), err)
    assert set(seen) == set(GROUPS)
    assert max(seen.values()) < 1e-4, seen


@pytest.mark.criterion(5, "gate stays in [0.01, 0.99] and output between q and a")
def test_gate_contract():
    rng = Rng(5)
    d, n = 16, 100_000
    scale = np.logspace(-3, 2, n)[:, None]
    q = rng.normal((n, d)) * scale
    a = rng.normal((n, d)) * scale[::-1]
    a[:500] = q[:500]
    w = AggregatorWeights(np.zeros((d, 2)), np.zeros(2), rng.normal((d, 1), 2.0), np.array(0.0))
    q_new, g = gated_merge(q, a, w)
    assert g.min() >= 0.01 and g.max() <= 0.99
    assert g.min() == 0.01 and g.max() == 0.99  # both clamps are exercised
    assert np.all(q_new >= np.minimum(q, a)) and np.all(q_new <= np.maximum(q, a))


@pytest.mark.criterion(6, "linear vs quadratic scaling over 16..256 frames")
def test_complexity_trends(tmp_path, capsys):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({"d": 64, "d_state": 16}))
    csv_path = tmp_path / "bench.csv"
    code = main(["bench", "--methods", "mambamia,attention", "--frames", "16,32,64,128,256", "--trials", "3",
                 "--config", str(cfg), "--csv", str(csv_path), "--svg", str(tmp_path / "bench.svg")])
    assert code == 0
    records = read_csv(csv_path)
    assert all(r.ok for r in records)
    slopes = method_slopes(records)
    at = {(r.method, r.frames): r for r in records}
    ratio = at["attention", 256].wall_time / at["mambamia", 256].wall_time
    with capsys.disabled():
        print(f"\n  slopes {slopes}; attention/mambamia at M=256: {ratio:.1f}x")
    assert at["mambamia", 256].tokens_out == 860
    assert 0.8 <= slopes["mambamia"] <= 1.3
    assert slopes["attention"] >= 1.7
    assert ratio >= 4.0


def _train(s):
    cfg = MambaMiaConfig(**FROZEN, s=s)
    spec = NeedleTaskSpec(frames=8, patches=16, d=32, codebook_size=8, noise_std=0.1, seed=FROZEN_SEED)
    return train_needle_probe(cfg, spec, FROZEN_STEPS, FROZEN_SEED).final_accuracy


@pytest.mark.criterion(7, "needle retention >= 0.90 at s=1/2, above chance at s=1/8")
def test_needle_retention(capsys):
    with ProcessPoolExecutor(max_workers=2) as pool:
        acc_half, acc_eighth = pool.map(_train, ["1/2", "1/8"])
    with capsys.disabled():
        print(f"\n  held-out accuracy s=1/2: {acc_half:.3f}, s=1/8: {acc_eighth:.3f} (chance 0.125)")
    assert acc_half >= FROZEN_THRESHOLD
    assert acc_eighth > 0.125


@pytest.mark.criterion(8, "joint mode mixes frames, per-frame mode isolates them")
def test_joint_vs_per_frame():
    cfg = MambaMiaConfig(d=8, d_state=4, layers=2, k=3, n_patches=6)
    w = init_mambamia(cfg, 8, np.float64)
    frames = Rng(9).normal((3, 6, 8))
    for target in (0, 2):
        bumped = frames.copy()
        bumped[target] += 0.5
        for mode in ("joint", "per_frame"):
            base, _ = mambamia_compress(frames, w, cfg, mode=mode)
            moved, _ = mambamia_compress(bumped, w, cfg, mode=mode)
            others = [i for i in range(3) if i != target]
            delta = np.abs(moved[others] - base[others]).max(axis=(1, 2))
            if mode == "joint":
                assert np.all(delta > 0)
            else:
                assert np.all(delta == 0.0)
            assert np.abs(moved[target] - base[target]).max() > 0


@pytest.mark.criterion(9, "tensor and archive round trips are bit-identical")
def test_io_round_trips(tmp_path):
    for dtype in (np.float32, np.float64):
        x = Rng(1).normal((3, 4, 5), 1.0, dtype)
        tensor_write(tmp_path / "t", x)
        y = tensor_read(tmp_path / "t")
        assert y.dtype == x.dtype and y.tobytes() == x.tobytes()
    cfg = MambaMiaConfig(d=8, d_state=4, layers=2, k=4, n_patches=8)
    w = init_mambamia(cfg, 21)
    weights_archive_write(tmp_path / "w", w)
    named = weights_archive_read(tmp_path / "w")
    assert all(named[n].tobytes() == a.tobytes() for n, a in named_arrays(w))
    fresh = load_weights_into(init_mambamia(cfg, 0), named)
    probe = Rng(3).normal((4, 8, 8), 1.0, np.float32)
    assert mambamia_compress(probe, w, cfg)[0].tobytes() == mambamia_compress(probe, fresh, cfg)[0].tobytes()


@pytest.mark.criterion(10, "compress output is byte-identical across runs")
def test_determinism(tmp_path):
    _, first = _compress_cli(tmp_path, 32, name="a.sttc")
    _, second = _compress_cli(tmp_path, 32, name="b.sttc")
    assert first.read_bytes() == second.read_bytes()
