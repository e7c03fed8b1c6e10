"""Quality and efficiency measurements.

* Fréchet distance between Gaussian moment fits (raw-pixel stand-in for FID).
* Effective NFE: low-resolution evaluations converted to full-resolution
  equivalents by their measured per-evaluation latency ratio.
* Wall-clock latency / throughput of a sampling procedure.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MomentFit:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(samples) -> MomentFit:
    """Sample mean and unbiased covariance of row vectors."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"fit_gaussian needs at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    return MomentFit(mean, 0.5 * (cov + cov.T), n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet(a: MomentFit, b: MomentFit) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.cov)
    inner = ra @ b.cov @ ra
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(d, 0.0)


def moment_fit(mean, cov, count: int = 0) -> MomentFit:
    return MomentFit(np.asarray(mean, dtype=np.float64), np.asarray(cov, dtype=np.float64), count)


# -- effective NFE ------------------------------------------------------------------------


@dataclass
class StageCost:
    resolution: int
    nfe: int
    latency: float  # seconds per denoiser evaluation


@dataclass
class EffNfeReport:
    stages: list
    eta: list  # per stage; 1.0 for the highest
    effective_nfe: int
    highest: int

    def record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": "effnfe",
            "stages": [
                {"resolution": s.resolution, "nfe": s.nfe, "latency_s": s.latency, "eta": e}
                for s, e in zip(self.stages, self.eta)
            ],
            "effective_nfe": self.effective_nfe,
        }


def effective_nfe(stages: Sequence, highest: int = 0) -> EffNfeReport:
    """``sum_i ceil(eta_i * NFE_i) + NFE_high`` with ``eta_i = latency_i / latency_high``.

    ``stages`` holds :class:`StageCost` items or ``(nfe, latency)`` /
    ``(resolution, nfe, latency)`` tuples; ``highest`` indexes the target stage.
    """
    costs = []
    for s in stages:
        if isinstance(s, StageCost):
            costs.append(s)
        elif len(s) == 2:
            costs.append(StageCost(0, int(s[0]), float(s[1])))
        else:
            costs.append(StageCost(int(s[0]), int(s[1]), float(s[2])))
    if not 0 <= highest < len(costs):
        raise ValueError(f"highest stage index {highest} out of range")
    for c in costs:
        if not c.latency > 0:
            raise ValueError(f"latency must be positive, got {c.latency}")
        if c.nfe < 0:
            raise ValueError(f"NFE must be non-negative, got {c.nfe}")
    ref = costs[highest].latency
    etas = [c.latency / ref for c in costs]
    total = costs[highest].nfe
    for i, (c, eta) in enumerate(zip(costs, etas)):
        if i != highest:
            # round away float noise before the ceiling so eta*nfe == 4.0 stays 4
            total += math.ceil(round(eta * c.nfe, 9))
    return EffNfeReport(costs, etas, total, highest)


# -- benchmarking ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    label: str
    batch: int
    latency_s: float
    throughput: float
    reps: int
    warmup: int
    hardware: str
    latencies_s: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "record": "bench"}
        out.update(asdict(self))
        out["throughput_img_per_s"] = out.pop("throughput")
        return out


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()} numpy{np.__version__}"


def bench(sample_fn: Callable[[], object], batch: int = 64, warmup: int = 2, reps: int = 10, label: str = "") -> BenchReport:
    """Time ``reps`` calls of ``sample_fn`` after ``warmup`` discarded calls.

    Stable numbers need the machine to be otherwise idle.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        sample_fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sample_fn()
        times.append(time.perf_counter() - t0)
    lat = float(np.mean(times))
    return BenchReport(label, batch, lat, batch / lat, reps, warmup, hardware_note(), times)
