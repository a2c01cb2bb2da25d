import math

import numpy as np
import pytest

from tstar.pipeline import MambaMiaConfig
from tstar.tensorcore import DimensionError, named_arrays
from tstar.train import (
    GROUPS,
    AdamState,
    GradcheckError,
    NeedleTaskSpec,
    adam_step,
    count_parameters,
    finite_diff_gradcheck,
    gen_needle_dataset,
    group_errors,
    init_probe,
    lr_multiplier,
    needle_codebook,
    parameter_group,
    probe_gradcheck,
    train_needle_probe,
)

TINY = MambaMiaConfig(d=8, d_state=4, layers=1, k=4, n_patches=8, s="1/2")
FROZEN = MambaMiaConfig(d=32, d_state=8, layers=1, k=4, n_patches=16, s="1/2")


def test_adam_single_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    state = AdamState.for_params(p, lr=0.1)
    adam_step(p, g, state)
    # after one step m_hat = g and v_hat = g^2, so the update is lr * sign(g) (up to eps)
    expected = np.array([1.0, -2.0]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(p["w"], expected, atol=1e-12)


def test_adam_two_steps_against_recurrence():
    p = {"w": np.array([0.3])}
    state = AdamState.for_params(p, lr=0.01, beta1=0.8, beta2=0.9)
    ref, m, v = 0.3, 0.0, 0.0
    for t, grad in enumerate([2.0, -1.0], start=1):
        adam_step(p, {"w": np.array([grad])}, state)
        m = 0.8 * m + 0.2 * grad
        v = 0.9 * v + 0.1 * grad * grad
        ref -= 0.01 * (m / (1 - 0.8 ** t)) / (math.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
    assert math.isclose(p["w"][0], ref, rel_tol=1e-12)


def test_adam_name_mismatch():
    p = {"a": np.zeros(2)}
    with pytest.raises(DimensionError):
        adam_step(p, {"b": np.zeros(2)}, AdamState.for_params(p))


def test_schedule_warmup_then_cosine():
    total = 1000
    warm = math.ceil(0.03 * total)
    assert warm == 30
    assert math.isclose(lr_multiplier(1, total), 1 / 30)
    assert math.isclose(lr_multiplier(15, total), 0.5)
    assert lr_multiplier(30, total) == 1.0
    mid = 30 + (1000 - 30) // 2
    assert math.isclose(lr_multiplier(mid, total), 0.5, abs_tol=1e-3)
    assert lr_multiplier(total, total) == pytest.approx(0.0, abs=1e-15)
    values = [lr_multiplier(s, total) for s in range(30, total + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_schedule_applied_inside_adam():
    p = {"w": np.zeros(1)}
    state = AdamState.for_params(p, lr=1.0, total_steps=100)
    adam_step(p, {"w": np.ones(1)}, state)
    # step 1 of a 3-step warm-up: lr/3 times a unit Adam step
    assert p["w"][0] == pytest.approx(-1 / 3, rel=1e-6)


def test_gradcheck_on_known_function():
    theta = {"x": np.array([0.3, -1.2, 2.0])}

    def f(t):
        return float(np.sum(np.sin(t["x"]) * t["x"] ** 2))

    x = theta["x"]
    good = {"x": np.cos(x) * x ** 2 + 2 * x * np.sin(x)}
    assert finite_diff_gradcheck(f, theta, good).max_error < 1e-8
    bad = {"x": good["x"] * 1.001}
    assert finite_diff_gradcheck(f, theta, bad).max_error > 1e-4
    # parameters are restored after the sweep
    assert np.array_equal(theta["x"], [0.3, -1.2, 2.0])


def test_gradcheck_switches_to_probes_above_threshold():
    theta = {"x": np.linspace(-1, 1, 1500)}

    def f(t):
        return float(np.sum(t["x"] ** 3))

    report = finite_diff_gradcheck(f, theta, {"x": 3 * theta["x"] ** 2})
    assert report.mode == "probe"
    assert report.passed(1e-6)


def test_gradcheck_requires_float64():
    theta = {"x": np.zeros(2, np.float32)}
    with pytest.raises(GradcheckError):
        finite_diff_gradcheck(lambda t: 0.0, theta, {"x": np.zeros(2)})


def test_needle_dataset_is_deterministic_and_balanced():
    spec = NeedleTaskSpec()
    a = gen_needle_dataset(spec, 4000)
    b = gen_needle_dataset(spec, 4000)
    assert all(np.array_equal(x[0], y[0]) and x[1] == y[1] for x, y in zip(a[:20], b[:20]))
    counts = np.bincount([lbl for _, lbl in a], minlength=8)
    # chi-square against uniform, 7 dof; 24.3 is the 0.999 quantile
    expected = 4000 / 8
    assert ((counts - expected) ** 2 / expected).sum() < 24.3
    held_out = gen_needle_dataset(spec, 5, stream=1)
    assert not np.array_equal(held_out[0][0], a[0][0])


def test_needle_is_planted_exactly_once():
    spec = NeedleTaskSpec(noise_std=0.0)
    book = needle_codebook(spec)
    assert np.allclose(np.linalg.norm(book, axis=1), math.sqrt(spec.d))
    video, label = gen_needle_dataset(spec, 1, dtype=np.float64)[0]
    nonzero = np.argwhere(np.abs(video).sum(axis=2) > 0)
    assert len(nonzero) == 1
    f, p = nonzero[0]
    assert np.allclose(video[f, p], book[label])


def test_parameter_groups_cover_all_names():
    model = init_probe(TINY, 4, 0)
    groups = {parameter_group(n) for n, _ in named_arrays(model)}
    assert groups == set(GROUPS)
    assert count_parameters(TINY, 4) == sum(a.size for _, a in named_arrays(model))


@pytest.mark.parametrize("seed", range(3))
def test_probe_gradcheck_passes(seed):
    report = probe_gradcheck(TINY, seed=seed)
    assert report.passed(1e-4), report.failures(1e-4)


@pytest.mark.parametrize("group", ["conv", "agg.w_g", "head"])
def test_probe_gradcheck_flags_corrupted_group(group):
    errors = group_errors(probe_gradcheck(TINY, seed=0, corrupt=group))
    assert errors[group] > 1e-4
    assert all(e <= 1e-4 for g, e in errors.items() if g != group)


def test_untrained_accuracy_is_near_chance():
    report = train_needle_probe(FROZEN, NeedleTaskSpec(), 0, 7, eval_count=400)
    assert report.chance == 0.125
    # binomial(400, 1/8) has sd ~0.017; allow four of them
    assert abs(report.final_accuracy - 0.125) < 0.07


def test_loss_decreases_over_first_100_steps():
    report = train_needle_probe(FROZEN, NeedleTaskSpec(), 100, 7, eval_count=8)
    windows = np.array(report.losses).reshape(5, 20).mean(axis=1)
    assert windows[-1] < windows[0] - 0.1
    assert np.all(np.diff(windows[:3]) < 0)
    # once at the chance-level plateau only sampling noise remains
    assert np.all(np.diff(windows) < 0.01)


def test_task_dims_must_match_config():
    with pytest.raises(DimensionError):
        train_needle_probe(FROZEN, NeedleTaskSpec(d=16), 1, 0)
