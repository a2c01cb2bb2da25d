"""Desk-scale optimisation and gradient verification.

Adam with linear warm-up and cosine decay, a central-difference gradient
oracle, and a synthetic needle-retrieval task: one codebook vector is
planted at a random (frame, patch) position of a noise video and a linear
probe on the mean of the retained query tokens must name it.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .pipeline import (
    MambaMiaConfig,
    MambaMiaWeights,
    init_mambamia,
    mambamia_compress,
    mambamia_compress_backward,
    secondary_indices,
)
from .io import config_to_dict
from .tensorcore import DimensionError, Rng, named_arrays

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "NeedleTaskSpec",
    "NeedleHead",
    "ProbeModel",
    "GradcheckError",
    "GradcheckReport",
    "TrainingDiverged",
    "TrainReport",
    "lr_multiplier",
    "adam_step",
    "gen_needle_dataset",
    "iter_needle_samples",
    "needle_codebook",
    "finite_diff_gradcheck",
    "init_probe",
    "probe_loss_and_grads",
    "probe_predict",
    "train_needle_probe",
    "parameter_group",
    "count_parameters",
    "probe_gradcheck",
    "group_errors",
]


# --- Adam ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    total_steps: int | None = None
    warmup_frac: float = 0.03

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        named = _as_named(params)
        return cls({n: np.zeros_like(p) for n, p in named.items()},
                   {n: np.zeros_like(p) for n, p in named.items()}, **kwargs)


def lr_multiplier(step: int, total: int, warmup_frac: float = 0.03) -> float:
    """Linear warm-up over ``warmup_frac`` of ``total`` steps, then cosine decay to zero.

    ``step`` counts completed updates starting at 1.
    """
    warm = max(1, math.ceil(warmup_frac * total))
    if step <= warm:
        return step / warm
    if total <= warm:
        return 1.0
    frac = min(1.0, (step - warm) / (total - warm))
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def _as_named(params) -> dict:
    if isinstance(params, dict):
        return params
    return dict(named_arrays(params))


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    p_named = _as_named(params)
    g_named = _as_named(grads)
    if p_named.keys() != g_named.keys():
        raise DimensionError(f"gradient names differ from parameter names: "
                             f"{sorted(set(p_named) ^ set(g_named))}")
    state.t += 1
    t = state.t
    lr = state.lr
    if state.total_steps:
        lr *= lr_multiplier(t, state.total_steps, state.warmup_frac)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in p_named.items():
        g = g_named[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)).astype(p.dtype)
    return params, state


# --- gradient oracle -----------------------------------------------------

class GradcheckError(RuntimeError):
    def __init__(self, group: str, message: str):
        super().__init__(f"{group}: {message}")
        self.group = group


@dataclass
class GradcheckReport:
    errors: dict  # parameter name -> max relative error
    mode: str  # "coordinate" or "probe"
    eps: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return all(e <= tol for e in self.errors.values())

    def failures(self, tol: float) -> list[str]:
        return [n for n, e in self.errors.items() if e > tol]


def _rel_err(g_an: float, g_fd: float) -> float:
    return abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)


def finite_diff_gradcheck(f: Callable[[dict], float], theta: dict, analytic: dict, eps: float = 1e-5,
                          max_coordinates: int = 1000, probes: int = 3, seed: int = 0) -> GradcheckReport:
    """Compare ``analytic`` gradients with central differences of ``f``.

    ``theta`` maps names to float64 arrays that ``f`` reads; they are perturbed
    in place and restored. Bundles above ``max_coordinates`` entries are
    checked along ``probes`` random directions per array instead of per
    coordinate.
    """
    total = sum(p.size for p in theta.values())
    mode = "coordinate" if total <= max_coordinates else "probe"
    rng = Rng(seed)
    errors = {}

    def central(name, direction):
        p = theta[name]
        saved = p.copy()
        p += eps * direction
        f_plus = f(theta)
        p[...] = saved - eps * direction
        f_minus = f(theta)
        p[...] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradcheckError(name, "objective is not finite under perturbation")
        return (f_plus - f_minus) / (2.0 * eps)

    for name, p in theta.items():
        if p.dtype != np.float64:
            raise GradcheckError(name, f"gradient checks need float64 parameters, got {p.dtype}")
        g = np.asarray(analytic[name], dtype=np.float64)
        if g.shape != p.shape:
            raise GradcheckError(name, f"analytic gradient {g.shape} vs parameter {p.shape}")
        worst = 0.0
        if mode == "coordinate":
            for idx in np.ndindex(p.shape):
                e = np.zeros_like(p)
                e[idx] = 1.0
                worst = max(worst, _rel_err(float(g[idx]), central(name, e)))
        else:
            for _ in range(probes):
                v = rng.normal(p.shape) if p.shape else np.array(rng.normal((1,))[0])
                worst = max(worst, _rel_err(float((g * v).sum()), central(name, v)))
        errors[name] = worst
    return GradcheckReport(errors, mode, eps)


# --- needle task ---------------------------------------------------------

@dataclass(frozen=True)
class NeedleTaskSpec:
    frames: int = 8
    patches: int = 16
    d: int = 32
    codebook_size: int = 8
    noise_std: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")


def needle_codebook(spec: NeedleTaskSpec) -> np.ndarray:
    """Fixed class vectors: Gaussian rows rescaled to norm sqrt(d)."""
    book = Rng(spec.seed).split().normal((spec.codebook_size, spec.d))
    return book / np.linalg.norm(book, axis=1, keepdims=True) * math.sqrt(spec.d)


def iter_needle_samples(spec: NeedleTaskSpec, stream: int = 0, dtype=np.float32):
    """Endless deterministic sample stream; distinct ``stream`` values never overlap."""
    book = needle_codebook(spec)
    base = Rng(spec.seed)
    base.split()  # codebook stream
    for _ in range(stream + 1):
        stream_rng = base.split()
    while True:
        rng = stream_rng.split()
        label = int(rng.integers(spec.codebook_size, 1)[0])
        frame = int(rng.integers(spec.frames, 1)[0])
        patch = int(rng.integers(spec.patches, 1)[0])
        shape = (spec.frames, spec.patches, spec.d)
        video = rng.normal(shape, spec.noise_std) if spec.noise_std else np.zeros(shape)
        video[frame, patch] = book[label]
        yield video.astype(dtype), label


def gen_needle_dataset(spec: NeedleTaskSpec, count: int, stream: int = 0, dtype=np.float32):
    """``count`` samples ``(video (M, N, d), label)`` from ``stream``."""
    return list(itertools.islice(iter_needle_samples(spec, stream, dtype), count))


@dataclass
class NeedleHead:
    w: np.ndarray  # (d, classes)
    b: np.ndarray  # (classes,)


@dataclass
class ProbeModel:
    compressor: MambaMiaWeights = field(metadata={"flatten": True})
    head: NeedleHead


def init_probe(cfg: MambaMiaConfig, classes: int, seed: int, dtype=np.float32) -> ProbeModel:
    compressor = init_mambamia(cfg, seed, dtype)
    rng = Rng(seed ^ 0x5EED)
    return ProbeModel(compressor, NeedleHead(rng.normal((cfg.d, classes), 1.0 / math.sqrt(cfg.d), dtype),
                                             np.zeros(classes, dtype)))


def probe_predict(model: ProbeModel, video: np.ndarray, cfg: MambaMiaConfig) -> np.ndarray:
    queries, _ = mambamia_compress(video, model.compressor, cfg)
    feat = queries[secondary_indices(queries.shape[0], cfg.s)].reshape(-1, cfg.d).mean(axis=0)
    return feat @ model.head.w + model.head.b


def probe_loss_and_grads(model: ProbeModel, video: np.ndarray, label: int, cfg: MambaMiaConfig,
                         need_grads: bool = True, projection: np.ndarray | None = None):
    """Cross-entropy of the probe on one sample, and its gradient bundle.

    ``projection`` (shape of the un-sampled queries) adds ``<projection, queries>``
    to the loss; gradient checks use it to give every compressor weight an
    O(1) sensitivity.
    """
    queries, cache = mambamia_compress(video, model.compressor, cfg, need_cache=need_grads)
    keep = secondary_indices(queries.shape[0], cfg.s)
    qshape = queries.shape
    feat = queries[keep].reshape(-1, cfg.d).mean(axis=0)
    logits = feat @ model.head.w + model.head.b
    shifted = logits - logits.max()
    logp = shifted - math.log(np.exp(shifted).sum())
    loss = -float(logp[label])
    if projection is not None:
        loss += float((projection * queries).sum())
    if not need_grads:
        return loss, None
    dlogits = np.exp(logp)
    dlogits[label] -= 1.0
    dlogits = dlogits.astype(feat.dtype)
    dfeat = model.head.w @ dlogits
    dqueries = np.zeros(qshape, dtype=feat.dtype)
    dqueries[keep] = dfeat / (keep.size * qshape[1])
    if projection is not None:
        dqueries += projection
    dcomp, _ = mambamia_compress_backward(cache, dqueries)
    return loss, ProbeModel(dcomp, NeedleHead(np.outer(feat, dlogits), dlogits))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: "TrainReport"):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.report = report


@dataclass
class TrainReport:
    task: str
    seed: int
    steps: int
    batch_size: int
    lr: float
    config: dict
    task_spec: dict
    losses: list
    final_accuracy: float | None
    chance: float
    eval_count: int
    diverged_at: int | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(model: ProbeModel, data, cfg: MambaMiaConfig) -> float:
    hits = sum(int(np.argmax(probe_predict(model, v, cfg)) == y) for v, y in data)
    return hits / len(data)


def train_needle_probe(cfg: MambaMiaConfig, spec: NeedleTaskSpec, steps: int, seed: int,
                       batch_size: int = 16, lr: float = 1e-3, eval_count: int = 512,
                       dtype=np.float32, log_every: int = 100) -> TrainReport:
    """Train compressor + linear head on fresh needle samples; report held-out accuracy.

    Training draws from data stream 0, evaluation from stream 1.
    """
    if (spec.patches, spec.d) != (cfg.n_patches, cfg.d):
        raise DimensionError(f"task (N={spec.patches}, d={spec.d}) does not match config "
                             f"(N={cfg.n_patches}, d={cfg.d})")
    model = init_probe(cfg, spec.codebook_size, seed, dtype)
    params = dict(named_arrays(model))
    state = AdamState.for_params(params, lr=lr, total_steps=steps)
    held_out = gen_needle_dataset(spec, eval_count, stream=1, dtype=dtype)
    report = TrainReport("needle", seed, steps, batch_size, lr, config_to_dict(cfg),
                         dataclasses.asdict(spec), [], None, 1.0 / spec.codebook_size, eval_count)
    samples = iter_needle_samples(spec, stream=0, dtype=dtype)
    for step in range(1, steps + 1):
        total = {n: np.zeros_like(p) for n, p in params.items()}
        batch_loss = 0.0
        for _ in range(batch_size):
            video, label = next(samples)
            loss, grads = probe_loss_and_grads(model, video, label, cfg)
            batch_loss += loss
            for n, g in named_arrays(grads):
                total[n] += g
        batch_loss /= batch_size
        if not math.isfinite(batch_loss):
            report.diverged_at = step
            raise TrainingDiverged(step, report)
        for g in total.values():
            g /= batch_size
        adam_step(params, total, state)
        report.losses.append(batch_loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, batch_loss)
    report.final_accuracy = evaluate(model, held_out, cfg)
    return report


# --- whole-model gradient check ------------------------------------------

GROUPS = ("scan", "conv", "in_proj", "out_proj", "merge",
          "agg.w_alpha", "agg.b_alpha", "agg.w_g", "agg.b_g", "query", "head")


def parameter_group(name: str) -> str:
    """Map a canonical weight name onto its reporting group."""
    if name == "query":
        return "query"
    if name.startswith("head."):
        return "head"
    if ".ssm." in name:
        return "scan"
    leaf = name.rsplit(".", 1)[-1]
    if ".agg." in name:
        return f"agg.{leaf}"
    return {"conv_kernel": "conv", "w_in": "in_proj", "w_out": "out_proj", "w_merge": "merge"}[leaf]


def count_parameters(cfg: MambaMiaConfig, classes: int) -> int:
    d, di, ds = cfg.d, cfg.d_inner, cfg.d_state
    mamba = d * 2 * di + di * cfg.w_conv + 3 * di * ds + di + 1 + di * d
    agg = d * cfg.k + cfg.k + d + 1
    return d + cfg.layers * (2 * mamba + 2 * d * d + agg) + d * classes + classes


def _widen_step_sizes(model: ProbeModel, rng: Rng, dt_range: tuple[float, float]) -> None:
    # at init softplus(b_delta) sits in [1e-3, 0.1], which leaves the state matrix
    # with gradients near the finite-difference noise floor
    lo, hi = (math.log(v) for v in dt_range)
    for layer in model.compressor.layers:
        for blk in (layer.mixer.fwd, layer.mixer.bwd):
            dt = math.exp(lo + rng.uniform(1)[0] * (hi - lo))
            blk.ssm.b_delta[...] = dt + math.log(-math.expm1(-dt))


def probe_gradcheck(cfg: MambaMiaConfig, seed: int = 0, frames: int = 2, classes: int = 4,
                    eps: float = 1e-5, corrupt: str | None = None,
                    dt_range: tuple[float, float] | None = (0.1, 1.0)) -> GradcheckReport:
    """Finite-difference check of every probe parameter on one needle sample (float64).

    The objective is the probe cross-entropy plus a fixed random projection of
    all compressed queries. Unless ``dt_range`` is None, each scan's step size
    is redrawn log-uniformly from that range so every group carries a gradient
    well above roundoff.

    ``corrupt`` names a group whose analytic gradient is deliberately scaled,
    as a negative control.
    """
    spec = NeedleTaskSpec(frames, cfg.n_patches, cfg.d, classes, 0.5, seed)
    video, label = gen_needle_dataset(spec, 1, dtype=np.float64)[0]
    model = init_probe(cfg, classes, seed, np.float64)
    if dt_range is not None:
        _widen_step_sizes(model, Rng(seed ^ 0xD7), dt_range)
    projection = Rng(seed).split().normal((frames, cfg.queries_per_frame, cfg.d))
    _, grads = probe_loss_and_grads(model, video, label, cfg, projection=projection)
    analytic = dict(named_arrays(grads))
    if corrupt is not None:
        hit = [n for n in analytic if parameter_group(n) == corrupt]
        if not hit:
            raise ValueError(f"unknown parameter group {corrupt!r}")
        for n in hit:
            analytic[n] = analytic[n] * 1.01 + 1e-3
    theta = dict(named_arrays(model))

    def f(_theta):
        return probe_loss_and_grads(model, video, label, cfg, need_grads=False, projection=projection)[0]

    return finite_diff_gradcheck(f, theta, analytic, eps=eps, seed=seed)


def group_errors(report: GradcheckReport) -> dict:
    out = {}
    for name, err in report.errors.items():
        g = parameter_group(name)
        out[g] = max(out.get(g, 0.0), err)
    return out
