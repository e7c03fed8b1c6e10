"""Flat, typed ``key = value`` run configuration.

One key per line, ``#`` starts a comment.  Lists are comma separated.  Per-stage
cascade knobs carry the stage index in the key (``steps_stage2``,
``sigma_min_stage1`` ...) and are checked against the ladder length.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..cascade import TRUNC_FRACTION, CascadeConfig, default_cascade_config
from ..network import NetConfig, ResolutionLadder
from ..oracle import GaussianMixture, smooth_mixture
from ..schedule import LossWeightConfig


class ConfigError(ValueError):
    """Invalid configuration text or values."""


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


# key -> (parser, default)
SCHEMA: dict = {
    # run
    "seed": (int, 0),
    "batch": (int, 32),
    "steps": (int, 500),
    "lr": (float, 1e-3),
    "checkpoint_every": (int, 0),
    "train_mode": (str, "per_stage"),
    "out": (str, "run"),
    "log_every": (int, 1),
    # data
    "dataset": (str, ""),
    "synthetic": (str, "shapes"),
    "shapes_count": (int, 1024),
    "shapes_palette": (str, "gray"),
    "sample_count": (int, 64),
    # net
    "resolutions": (_ints, (16, 8)),
    "image_channels": (int, 1),
    "base_channels": (int, 32),
    "channel_mult": (_ints, ()),
    "blocks_per_level": (int, 3),
    "embed_dim": (int, 64),
    "label_count": (int, 0),
    "sigma_data": (float, 0.5),
    "dtype": (str, "f32"),
    # loss
    "p_mean": (float, -1.2),
    "p_std": (float, 1.2),
    # cascade (stage-independent)
    "rho": (float, 7.0),
    "integrator": (str, "heun"),
    "jitter_min": (float, 0.8),
    "jitter_max": (float, 1.25),
    # single-stage baseline used by bench / eval comparisons
    "baseline_steps": (int, 18),
    "baseline_sigma_min": (float, 0.002),
    "baseline_sigma_max": (float, 80.0),
    # analytic data law for --oracle
    "oracle_components": (int, 1),
    "oracle_variance": (float, 0.25),
    "oracle_length_scale": (float, 2.0),
    "oracle_nugget": (float, 1e-3),
    "oracle_mean_scale": (float, 0.0),
    "oracle_seed": (int, 0),
    "eval_threshold": (float, 0.0),
}

STAGE_KEYS: dict = {
    "steps": int,
    "trunc": int,
    "sigma_min": float,
    "sigma_max": float,
}
_STAGE_RE = re.compile(r"^(steps|trunc|sigma_min|sigma_max)_stage(\d+)$")

# keys that change the parameter layout; the checkpoint digest covers these
ARCH_KEYS = (
    "resolutions",
    "image_channels",
    "base_channels",
    "channel_mult",
    "blocks_per_level",
    "embed_dim",
    "label_count",
    "sigma_data",
    "dtype",
)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    stage_values: dict = field(default_factory=dict)  # (key, stage) -> value

    def __getattr__(self, key: str) -> Any:
        values = self.__dict__.get("values", {})
        if key in values:
            return values[key]
        if key in SCHEMA:
            return SCHEMA[key][1]
        raise AttributeError(key)

    # -- derived objects -------------------------------------------------------
    def net_config(self) -> NetConfig:
        return NetConfig(
            resolutions=tuple(self.resolutions),
            image_channels=self.image_channels,
            base_channels=self.base_channels,
            channel_mult=tuple(self.channel_mult) or None,
            blocks_per_level=self.blocks_per_level,
            embed_dim=self.embed_dim,
            label_count=self.label_count or None,
            sigma_data=self.sigma_data,
            dtype=self.dtype,
        )

    def loss_config(self) -> LossWeightConfig:
        return LossWeightConfig(self.sigma_data, self.p_mean, self.p_std)

    def cascade_config(self) -> CascadeConfig:
        base = default_cascade_config(self.resolutions, rho=self.rho, integrator=self.integrator)
        steps, trunc, srange = [], [], []
        for i, s in enumerate(base.stages, start=1):
            T = self.stage_values.get(("steps", i), s.T)
            steps.append(T)
            auto = 0 if i == 1 else int(round(TRUNC_FRACTION * T))
            trunc.append(self.stage_values.get(("trunc", i), auto))
            srange.append(
                (
                    self.stage_values.get(("sigma_min", i), s.sigma_schedule.sigma_min),
                    self.stage_values.get(("sigma_max", i), s.sigma_schedule.sigma_max),
                )
            )
        return default_cascade_config(
            self.resolutions,
            steps=steps,
            trunc=trunc,
            sigma_range=srange,
            rho=self.rho,
            integrator=self.integrator,
            jitter=(self.jitter_min, self.jitter_max),
        )

    def mixture(self) -> GaussianMixture:
        return smooth_mixture(
            self.image_channels,
            self.resolutions[0],
            components=self.oracle_components,
            variance=self.oracle_variance,
            length_scale=self.oracle_length_scale,
            nugget=self.oracle_nugget,
            mean_scale=self.oracle_mean_scale,
            seed=self.oracle_seed,
        )

    def digest(self) -> bytes:
        """SHA-256 over the architecture keys (what a checkpoint must agree on)."""
        canon = {k: _jsonable(getattr(self, k)) for k in ARCH_KEYS}
        return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).digest()

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            if v is not None:
                vals[k] = v
        out = RunConfig(vals, dict(self.stage_values))
        validate(out)
        return out

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(getattr(self, k))}" for k in SCHEMA]
        lines += [f"{k}_stage{i} = {_fmt(v)}" for (k, i), v in sorted(self.stage_values.items())]
        return "\n".join(lines) + "\n"


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    stage_values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        m = _STAGE_RE.match(key)
        try:
            if m:
                stage = int(m.group(2))
                if (m.group(1), stage) in stage_values:
                    raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
                stage_values[(m.group(1), stage)] = STAGE_KEYS[m.group(1)](val)
            elif key in SCHEMA:
                if key in values:
                    raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
                values[key] = SCHEMA[key][0](val)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from e
    cfg = RunConfig(values, stage_values)
    validate(cfg)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(p))


def validate(cfg: RunConfig) -> None:
    """Check the whole configuration; raises :class:`ConfigError` on the first problem."""
    try:
        ladder = ResolutionLadder(tuple(cfg.resolutions))
    except ValueError as e:
        raise ConfigError(f"resolutions: {e}") from e
    n = ladder.n_stages
    for (key, stage), _ in cfg.stage_values.items():
        if not 1 <= stage <= n:
            raise ConfigError(f"{key}_stage{stage}: the ladder has stages 1..{n}")
    positive = ("batch", "image_channels", "base_channels", "blocks_per_level", "embed_dim", "shapes_count",
                "sample_count", "baseline_steps", "oracle_components", "log_every")
    for k in positive:
        if getattr(cfg, k) < 1:
            raise ConfigError(f"{k} must be >= 1, got {getattr(cfg, k)}")
    for k in ("steps", "checkpoint_every", "label_count"):
        if getattr(cfg, k) < 0:
            raise ConfigError(f"{k} must be >= 0, got {getattr(cfg, k)}")
    if not cfg.lr > 0:
        raise ConfigError(f"lr must be positive, got {cfg.lr}")
    if cfg.train_mode not in ("per_stage", "summed"):
        raise ConfigError(f"train_mode must be per_stage or summed, got {cfg.train_mode!r}")
    if cfg.synthetic not in ("shapes", "mixture"):
        raise ConfigError(f"synthetic must be shapes or mixture, got {cfg.synthetic!r}")
    if cfg.shapes_palette not in ("gray", "color"):
        raise ConfigError(f"shapes_palette must be gray or color, got {cfg.shapes_palette!r}")
    if cfg.dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {cfg.dtype!r}")
    if cfg.integrator not in ("heun", "euler"):
        raise ConfigError(f"integrator must be heun or euler, got {cfg.integrator!r}")
    if not 0 < cfg.baseline_sigma_min < cfg.baseline_sigma_max:
        raise ConfigError("need 0 < baseline_sigma_min < baseline_sigma_max")
    if cfg.baseline_steps < 2:
        raise ConfigError("baseline_steps must be >= 2")
    try:
        cfg.loss_config()
        cfg.cascade_config()
        _check_net(cfg.net_config())
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _check_net(nc: NetConfig) -> None:
    if nc.depth < nc.ladder.n_stages:
        raise ValueError(f"channel_mult has {nc.depth} levels but the ladder has {nc.ladder.n_stages} rungs")
    if nc.resolutions[0] >> (nc.depth - 1) < 1:
        raise ValueError(f"resolution {nc.resolutions[0]} cannot be halved {nc.depth - 1} times")
    if any(m < 1 for m in nc.mult):
        raise ValueError(f"channel multipliers must be positive, got {nc.mult}")
