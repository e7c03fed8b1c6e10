"""Cascaded training and bottom-up truncated sampling over a resolution ladder.

Stage indices are 1-based with stage 1 the highest resolution and stage N the
lowest.  Training visits N..1 with an independent backward/update per stage;
sampling runs N..1, each non-final stage stopping early (truncation) and
handing its still-noisy output, upsampled, to the next stage as condition.

Time indices count down: a stage with ``T`` steps starts at time ``T``
(sigma_max) and stops at time ``T_trunc``, i.e. after ``T - T_trunc`` steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .network import ResolutionLadder, UnifiedNet
from .numerics import NonFiniteError, ParamStore, Tape, adam_step, backward
from .schedule import (
    LossWeightConfig,
    SigmaSchedule,
    karras_sigmas,
    loss_weight,
    perturb,
    sample_training_sigma,
)

TRUNC_FRACTION = 0.54  # share of a lower stage's steps run before handing off

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class StageSchedule:
    stage: int
    T: int
    T_trunc: int
    sigma_schedule: SigmaSchedule
    integrator: str = "heun"
    conditional: bool = False

    def __post_init__(self):
        if not 0 <= self.T_trunc < self.T:
            raise ValueError(f"stage {self.stage}: need 0 <= T_trunc < T, got ({self.T_trunc}, {self.T})")
        if self.sigma_schedule.steps != self.T:
            raise ValueError(f"stage {self.stage}: schedule has {self.sigma_schedule.steps} steps, T={self.T}")
        if self.integrator not in ("heun", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    @property
    def steps(self) -> int:
        return self.T - self.T_trunc

    @property
    def trunc_sigma(self) -> float:
        """Noise level the stage stops at (0 for a full run)."""
        return float(self.sigma_schedule.sigmas[self.steps])

    @property
    def nfe(self) -> int:
        if self.integrator == "euler":
            return self.steps
        return 2 * self.steps - (1 if self.trunc_sigma == 0.0 else 0)


def stage_schedule(
    stage: int,
    T: int,
    sigma_min: float,
    sigma_max: float,
    T_trunc: int = 0,
    rho: float = 7.0,
    integrator: str = "heun",
    conditional: bool = False,
) -> StageSchedule:
    return StageSchedule(stage, T, T_trunc, karras_sigmas(T, sigma_min, sigma_max, rho), integrator, conditional)


@dataclass(frozen=True)
class CascadeConfig:
    ladder: ResolutionLadder
    stages: tuple  # StageSchedule for stage 1..N
    jitter: tuple = (0.8, 1.25)

    def __post_init__(self):
        n = self.ladder.n_stages
        if len(self.stages) != n:
            raise ValueError(f"need {n} stage schedules, got {len(self.stages)}")
        for i, s in enumerate(self.stages, start=1):
            if s.stage != i:
                raise ValueError(f"schedule {i} is labelled stage {s.stage}")
            if s.conditional != (i < n):
                raise ValueError(f"stage {i}: conditional flag must be {i < n}")
        if self.stages[0].T_trunc != 0:
            raise ValueError("the final (highest-resolution) stage must not be truncated")
        lo, hi = self.jitter
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"jitter range must bracket 1, got {self.jitter}")

    @property
    def n_stages(self) -> int:
        return self.ladder.n_stages

    def stage(self, i: int) -> StageSchedule:
        self.ladder.check_stage(i)
        return self.stages[i - 1]

    def cond_sigma(self, stage: int) -> float:
        """Noise level of the condition fed to ``stage`` (truncation level of stage+1)."""
        return self.stage(stage + 1).trunc_sigma


def default_cascade_config(
    resolutions: Sequence[int],
    steps: Optional[Sequence[int]] = None,
    trunc: Optional[Sequence[int]] = None,
    sigma_range: Optional[Sequence[tuple]] = None,
    rho: float = 7.0,
    integrator: str = "heun",
    jitter: tuple = (0.8, 1.25),
) -> CascadeConfig:
    """Per-stage schedules with the ablation-optimal defaults.

    Lowest stage: (0.002, 80), 20 steps; intermediate stages: (0.01, 50), 15
    steps; final stage: (0.01, 50), 9 steps.  Non-final stages truncate at
    ``round(0.54 * T)``.  With Heun this spends 18 / 14 / 17 evaluations.
    """
    ladder = ResolutionLadder(tuple(resolutions))
    n = ladder.n_stages
    out = []
    for i in range(1, n + 1):
        lowest, final = i == n, i == 1
        if steps:
            T = steps[i - 1]
        elif n == 1:
            T = 18
        elif final:
            T = 9
        else:
            T = 20 if lowest else 15
        if sigma_range:
            smin, smax = sigma_range[i - 1]
        else:
            smin, smax = (0.002, 80.0) if lowest else (0.01, 50.0)
        if trunc is not None:
            tt = trunc[i - 1]
        else:
            tt = 0 if final else int(round(TRUNC_FRACTION * T))
        out.append(stage_schedule(i, T, smin, smax, tt, rho, integrator, conditional=i < n))
    return CascadeConfig(ladder, tuple(out), tuple(jitter))


# -- integrators ------------------------------------------------------------------


def sampler_step(denoiser: Denoiser, x: np.ndarray, sigma_t: float, sigma_next: float, integrator: str = "heun"):
    """One Euler or Heun step of the probability-flow ODE from ``sigma_t`` to ``sigma_next``."""
    if not sigma_t > sigma_next >= 0:
        raise ValueError(f"need sigma_t > sigma_next >= 0, got ({sigma_t}, {sigma_next})")
    if integrator not in ("heun", "euler"):
        raise ValueError(f"unknown integrator {integrator!r}")
    d = (x - denoiser(x, sigma_t)) / sigma_t
    x_next = x + (sigma_next - sigma_t) * d
    if integrator == "heun" and sigma_next > 0:
        d2 = (x_next - denoiser(x_next, sigma_next)) / sigma_next
        x_next = x + (sigma_next - sigma_t) * 0.5 * (d + d2)
    return x_next


def initial_noise(seed: int, stage: int, batch: int, shape: tuple, start: int = 0) -> np.ndarray:
    """Standard normal draws, one independent stream per (seed, stage, element)."""
    out = np.empty((batch,) + tuple(shape))
    for b in range(batch):
        out[b] = np.random.default_rng([seed, stage, start + b]).standard_normal(shape)
    return out


@dataclass
class StageResult:
    stage: int
    x: np.ndarray
    nfe: int
    seconds: float
    sigma_end: float


def sample_stage(
    denoiser: Callable,
    sched: StageSchedule,
    shape: tuple,
    seed: int,
    batch: int,
    cond: Optional[np.ndarray] = None,
) -> StageResult:
    """Integrate one stage from ``sigma_max`` down to its truncation level.

    ``denoiser(x, sigma, cond)`` returns the denoised estimate.
    """
    if (cond is not None) != sched.conditional:
        raise ValueError(f"stage {sched.stage}: condition must be {'given' if sched.conditional else 'absent'}")
    calls = 0

    def den(x, sigma):
        nonlocal calls
        calls += 1
        return denoiser(x, sigma, cond)

    sig = sched.sigma_schedule.sigmas
    t0 = time.perf_counter()
    x = initial_noise(seed, sched.stage, batch, shape) * sig[0]
    for k in range(sched.steps):
        x = sampler_step(den, x, float(sig[k]), float(sig[k + 1]), sched.integrator)
    seconds = time.perf_counter() - t0
    return StageResult(sched.stage, x, calls, seconds, float(sig[sched.steps]))


class CascadeModel(Protocol):
    image_shape: tuple  # (C, r1, r1)

    def stage_denoiser(self, stage: int) -> Callable: ...


class NetModel:
    """Adapts a :class:`UnifiedNet` to the sampler's denoiser interface."""

    def __init__(self, net: UnifiedNet, label=None):
        self.net = net
        self.label = label
        c = net.config.image_channels
        r = net.ladder.resolutions[0]
        self.image_shape = (c, r, r)

    def stage_denoiser(self, stage: int) -> Callable:
        net, dt = self.net, self.net.dtype

        def f(x, sigma, cond):
            c = None if cond is None else cond.astype(dt, copy=False)
            lab = None
            if self.label is not None:
                lab = np.broadcast_to(np.asarray(self.label), (x.shape[0],))
            out = net.denoise(x.astype(dt, copy=False), c, sigma, stage, lab)
            return out.astype(x.dtype, copy=False)

        return f


class FullResolutionModel:
    """Single-stage full-resolution sampling through the same net's stage-1 path.

    Pair with :func:`single_stage_config`.  When stage 1 expects a condition
    (``N > 1``) it is fed zeros, so the cost per evaluation matches the cascade's
    top stage exactly.
    """

    def __init__(self, net: UnifiedNet, label=None):
        self.inner = NetModel(net, label)
        self.image_shape = self.inner.image_shape
        self.needs_cond = net.ladder.n_stages > 1

    def stage_denoiser(self, stage: int) -> Callable:
        if stage != 1:
            raise ValueError("the full-resolution baseline has a single stage")
        f = self.inner.stage_denoiser(1)
        if not self.needs_cond:
            return f
        return lambda x, sigma, cond: f(x, sigma, np.zeros_like(x))


@dataclass
class CascadeResult:
    images: np.ndarray
    nfe: list  # per stage, index 0 = stage 1
    seconds: list
    stages: list = field(default_factory=list)

    def __iter__(self):
        yield self.images
        yield self.nfe


def sample_cascade(model: CascadeModel, config: CascadeConfig, seed: int, batch: int) -> CascadeResult:
    """Bottom-up sampling: stage N unconditionally, then each higher stage
    conditioned on the upsampled truncated output of the stage below."""
    n = config.n_stages
    c = model.image_shape[0]
    prev = None
    results: dict = {}
    for stage in range(n, 0, -1):
        sched = config.stage(stage)
        r = config.ladder[stage]
        cond = None
        if stage < n:
            cond = nx.upsample2(prev, "bilinear").data
        res = sample_stage(model.stage_denoiser(stage), sched, (c, r, r), seed, batch, cond)
        results[stage] = res
        prev = res.x
    order = [results[i] for i in range(1, n + 1)]
    return CascadeResult(prev, [r.nfe for r in order], [r.seconds for r in order], order)


def prepare_condition_train(x0: np.ndarray, sigma_c, rng: np.random.Generator) -> np.ndarray:
    """``upsample(downsample(x0) + sigma_c * eps_c)`` with fresh noise ``eps_c``."""
    low = nx.avg_pool2(x0).data
    noisy, _ = perturb(low, sigma_c, rng)
    return nx.upsample2(noisy, "bilinear").data


# -- training ------------------------------------------------------------------------


@dataclass
class TrainState:
    net: UnifiedNet
    cascade: CascadeConfig
    loss_cfg: LossWeightConfig = field(default_factory=LossWeightConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    mode: str = "per_stage"  # or "summed"
    step: int = 0
    last_updated: frozenset = frozenset()

    @property
    def params(self) -> ParamStore:
        return self.net.params


def _jitter(rng: np.random.Generator, lo: float, hi: float, size: int) -> np.ndarray:
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def stage_loss(state: TrainState, x0: np.ndarray, stage: int, labels=None):
    """Record one stage's weighted denoising loss; returns ``(tape, loss)``."""
    net, cfg, rng = state.net, state.cascade, state.rng
    bsz = x0.shape[0]
    sigma = sample_training_sigma(rng, state.loss_cfg, size=bsz)
    x, _ = perturb(x0, sigma, rng)
    cond = None
    if stage < cfg.n_stages:
        sigma_c = cfg.cond_sigma(stage) * _jitter(rng, *cfg.jitter, bsz)
        cond = prepare_condition_train(x0, sigma_c, rng)
    w = loss_weight(sigma, state.loss_cfg).astype(net.dtype).reshape(bsz, 1, 1, 1)
    with Tape() as tape:
        d = net.forward(x, cond, sigma, stage, labels)
        loss = nx.mean(nx.mul(nx.square(nx.sub(d, x0)), w))
    return tape, loss


def train_step(state: TrainState, batch: np.ndarray, labels=None) -> list:
    """One pass of the per-resolution training loop; returns losses for stages 1..N."""
    net = state.net
    n = state.cascade.n_stages
    r1 = net.ladder.resolutions[0]
    batch = np.asarray(batch, dtype=net.dtype)
    if batch.ndim != 4 or batch.shape[2:] != (r1, r1):
        raise nx.ShapeError(f"training batch must be [B, C, {r1}, {r1}], got {batch.shape}")
    levels = [batch]
    for _ in range(n - 1):
        levels.append(nx.avg_pool2(levels[-1]).data)
    losses = [0.0] * n
    total: dict = {}
    touched: set = set()
    for stage in range(n, 0, -1):
        try:
            tape, loss = stage_loss(state, levels[stage - 1], stage, labels)
        except NonFiniteError as e:
            raise NonFiniteError(f"stage {stage}: {e}") from e
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"stage {stage}: non-finite loss")
        losses[stage - 1] = value
        grads = backward(tape, loss)
        touched |= set(grads)
        if state.mode == "summed":
            for k, g in grads.items():
                total[k] = total[k] + g if k in total else g
        else:
            adam_step(state.params, grads, state.lr, *state.betas, state.eps)
    if state.mode == "summed":
        adam_step(state.params, total, state.lr, *state.betas, state.eps)
    state.step += 1
    state.last_updated = frozenset(touched)
    return losses


def single_stage_config(resolution: int, steps: int = 18, sigma_min: float = 0.002, sigma_max: float = 80.0) -> CascadeConfig:
    """Degenerate one-rung cascade (plain full-resolution sampling)."""
    sched = stage_schedule(1, steps, sigma_min, sigma_max)
    return CascadeConfig(ResolutionLadder((resolution,)), (sched,))


def with_stage(config: CascadeConfig, stage: int, **changes) -> CascadeConfig:
    stages = list(config.stages)
    s = stages[stage - 1]
    if {"T", "sigma_min", "sigma_max", "rho"} & set(changes):
        sched = karras_sigmas(
            changes.pop("T", s.T),
            changes.pop("sigma_min", s.sigma_schedule.sigma_min),
            changes.pop("sigma_max", s.sigma_schedule.sigma_max),
            changes.pop("rho", s.sigma_schedule.rho),
        )
        changes["sigma_schedule"] = sched
        changes["T"] = sched.steps
    stages[stage - 1] = replace(s, **changes)
    return replace(config, stages=tuple(stages))
