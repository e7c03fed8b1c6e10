"""Weight-shared multi-resolution U-Net denoiser.

One trunk serves every rung of the resolution ladder.  Stage ``i`` (1-based,
stage 1 = highest resolution) enters the trunk at spatial level ``i - 1`` through
its own input convolution, runs the sub-U-Net below that level, and leaves
through its own output convolution.  A learnable map from the one-hot stage
index is added to the noise embedding so the shared blocks know which stage
they are serving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, ShapeError, Tensor
from .schedule import edm_precond


@dataclass(frozen=True)
class ResolutionLadder:
    resolutions: tuple

    def __post_init__(self):
        rs = tuple(int(r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", rs)
        if not rs:
            raise ValueError("resolution ladder must be non-empty")
        for r in rs:
            if r < 1 or r & (r - 1):
                raise ValueError(f"resolution {r} is not a positive power of two")
        for hi, lo in zip(rs, rs[1:]):
            if hi != 2 * lo:
                raise ValueError(f"ladder {rs} must halve at every rung")

    def __len__(self) -> int:
        return len(self.resolutions)

    def __getitem__(self, stage: int) -> int:
        """Resolution of 1-based ``stage``."""
        self.check_stage(stage)
        return self.resolutions[stage - 1]

    def check_stage(self, stage: int) -> None:
        if not 1 <= stage <= len(self.resolutions):
            raise ValueError(f"stage {stage} out of range 1..{len(self.resolutions)}")

    @property
    def n_stages(self) -> int:
        return len(self.resolutions)


@dataclass(frozen=True)
class NetConfig:
    resolutions: tuple = (16, 8)
    image_channels: int = 3
    base_channels: int = 32
    channel_mult: Optional[tuple] = None
    blocks_per_level: int = 3
    embed_dim: int = 64
    label_count: Optional[int] = None
    sigma_data: float = 0.5
    dtype: str = "f32"

    @property
    def ladder(self) -> ResolutionLadder:
        return ResolutionLadder(tuple(self.resolutions))

    @property
    def mult(self) -> tuple:
        if self.channel_mult is not None:
            return tuple(self.channel_mult)
        return (2,) * max(len(self.resolutions), 2)

    @property
    def depth(self) -> int:
        return len(self.mult)

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.mult[level]


def _groups(c: int) -> int:
    if c >= 8 and c % 8 == 0:
        return 8
    return 4 if c % 4 == 0 else 1


class _Init:
    def __init__(self, store: ParamStore, rng: np.random.Generator, dtype):
        self.store, self.rng, self.dtype = store, rng, dtype

    def conv(self, name, cin, cout, k, zero=False):
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = self.rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        self.store.add(f"{name}.weight", w.astype(self.dtype))
        self.store.add(f"{name}.bias", np.zeros(cout, self.dtype))

    def dense(self, name, nin, nout):
        w = self.rng.standard_normal((nin, nout)) / np.sqrt(nin)
        self.store.add(f"{name}.weight", w.astype(self.dtype))
        self.store.add(f"{name}.bias", np.zeros(nout, self.dtype))

    def norm(self, name, c):
        self.store.add(f"{name}.gamma", np.ones(c, self.dtype))
        self.store.add(f"{name}.beta", np.zeros(c, self.dtype))


class UnifiedNet:
    """Parameters live in ``self.params``; trunk tensors are shared by identity."""

    def __init__(self, config: NetConfig, params: ParamStore):
        self.config = config
        self.ladder = config.ladder
        self.params = params
        self.dtype = nx.tensor.DTYPES[config.dtype]

    # -- naming -------------------------------------------------------------
    def io_prefixes(self, stage: int) -> tuple:
        r = self.ladder[stage]
        return (f"io.in.r{r}.", f"io.out.r{r}.")

    def trunk_prefix(self, level: int) -> str:
        return f"trunk.l{level}."

    def level_size(self, level: int) -> int:
        return self.ladder.resolutions[0] >> level

    # -- embeddings ------------------------------------------------------------
    def resolution_embed(self, stage: int) -> Tensor:
        """``res_map @ onehot(stage)``: column ``stage`` of the map."""
        self.ladder.check_stage(stage)
        onehot = np.zeros((1, self.ladder.n_stages), self.dtype)
        onehot[0, stage - 1] = 1.0
        w = self.params["embed.res.weight"]
        return nx.reshape(nx.dense(onehot, _T(w)), (self.config.embed_dim,))

    def _sigma_features(self, c_noise: np.ndarray) -> np.ndarray:
        half = self.config.embed_dim // 2
        freqs = (1.0 / 10000.0) ** (np.arange(half) / max(half - 1, 1))
        arg = np.outer(c_noise, freqs)
        return np.concatenate([np.cos(arg), np.sin(arg)], axis=1).astype(self.dtype)

    def _embedding(self, c_noise: np.ndarray, stage: int, label) -> Tensor:
        p = self.params
        feat = self._sigma_features(c_noise)
        h = nx.dense(feat, p["embed.sigma.fc1.weight"], p["embed.sigma.fc1.bias"], act="silu")
        emb = nx.dense(h, p["embed.sigma.fc2.weight"], p["embed.sigma.fc2.bias"])
        emb = nx.add(emb, self.resolution_embed(stage))
        if self.config.label_count:
            if label is None:
                raise ValueError("class-conditional net requires labels")
            lab = np.atleast_1d(np.asarray(label, dtype=np.int64))
            if lab.shape[0] not in (1, len(c_noise)):
                raise ShapeError(f"labels {lab.shape} do not match batch {len(c_noise)}")
            if np.any((lab < 0) | (lab >= self.config.label_count)):
                raise ValueError(f"label out of range 0..{self.config.label_count - 1}")
            onehot = np.zeros((lab.shape[0], self.config.label_count), self.dtype)
            onehot[np.arange(lab.shape[0]), lab] = 1.0
            emb = nx.add(emb, nx.dense(onehot, p["embed.label.weight"]))
        elif label is not None:
            raise ValueError("labels given to an unconditional net")
        return emb

    # -- blocks ----------------------------------------------------------------
    def _block(self, name: str, x: Tensor, emb_act: Tensor) -> Tensor:
        p = self.params
        h = nx.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"])
        h = nx.silu(nx.group_norm(h, p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"], _groups(h.shape[1])))
        proj = nx.dense(emb_act, p[f"{name}.emb.weight"], p[f"{name}.emb.bias"])
        h = nx.add_channel_bias(h, proj)
        h = nx.conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"])
        h = nx.silu(nx.group_norm(h, p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"], _groups(h.shape[1])))
        skip = x
        if f"{name}.skip.weight" in p:
            skip = nx.conv2d(x, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"])
        return nx.mul(nx.add(h, skip), np.sqrt(0.5))

    def _trunk(self, h: Tensor, emb_act: Tensor, entry: int) -> Tensor:
        cfg = self.config
        p = self.params
        skips = []
        for lvl in range(entry, cfg.depth):
            pre = self.trunk_prefix(lvl)
            for b in range(cfg.blocks_per_level):
                h = self._block(f"{pre}enc{b}", h, emb_act)
            skips.append(h)
            if lvl < cfg.depth - 1:
                h = nx.avg_pool2(h)
                if f"{pre}down.weight" in p:
                    h = nx.conv2d(h, p[f"{pre}down.weight"], p[f"{pre}down.bias"])
        for lvl in reversed(range(entry, cfg.depth)):
            pre = self.trunk_prefix(lvl)
            skip = skips.pop()
            if lvl < cfg.depth - 1:
                h = nx.concat([nx.upsample2(h, "bilinear"), skip], axis=1)
            for b in range(cfg.blocks_per_level):
                h = self._block(f"{pre}dec{b}", h, emb_act)
        return h

    # -- public ------------------------------------------------------------------
    def forward(self, x, cond, sigma, stage: int, label=None) -> Tensor:
        """Preconditioned denoised estimate of ``x`` at noise level ``sigma``.

        ``x`` and ``cond`` are ``[B, C, r, r]`` arrays (or tensors); ``cond``
        must be given for every stage except the lowest-resolution one.
        """
        self.ladder.check_stage(stage)
        cfg = self.config
        r = self.ladder[stage]
        x = nx.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != cfg.image_channels or x.shape[2:] != (r, r):
            raise ShapeError(f"stage {stage} expects [B, {cfg.image_channels}, {r}, {r}], got {x.shape}")
        conditional = stage < self.ladder.n_stages
        if conditional and cond is None:
            raise ValueError(f"stage {stage} is conditional and needs a low-resolution condition")
        if not conditional and cond is not None:
            raise ValueError(f"stage {stage} is the lowest resolution and takes no condition")
        bsz = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (bsz,))
        if np.any(sigma <= 0):
            raise ValueError("forward requires sigma > 0")
        c_skip, c_out, c_in, c_noise = edm_precond(sigma, cfg.sigma_data)
        col = lambda v: v.astype(self.dtype).reshape(bsz, 1, 1, 1)  # noqa: E731

        h = nx.mul(x, col(c_in))
        if conditional:
            cond = nx.as_tensor(cond)
            if cond.shape != x.shape:
                raise ShapeError(f"condition {cond.shape} does not match input {x.shape}")
            h = nx.concat([h, cond], axis=1)
        p = self.params
        pin, pout = self.io_prefixes(stage)
        h = nx.conv2d(h, p[f"{pin}weight"], p[f"{pin}bias"])
        emb_act = nx.silu(self._embedding(c_noise, stage, label))
        h = self._trunk(h, emb_act, stage - 1)
        h = nx.silu(nx.group_norm(h, p[f"{pout}norm.gamma"], p[f"{pout}norm.beta"], _groups(h.shape[1])))
        f = nx.conv2d(h, p[f"{pout}weight"], p[f"{pout}bias"])
        return nx.add(nx.mul(x, col(c_skip)), nx.mul(f, col(c_out)))

    def denoise(self, x, cond, sigma, stage: int, label=None) -> np.ndarray:
        return self.forward(x, cond, sigma, stage, label).data

    def active_params(self, stage: int) -> "ActiveSet":
        self.ladder.check_stage(stage)
        entry = stage - 1
        io = self.io_prefixes(stage)
        trunk = tuple(self.trunk_prefix(lvl) for lvl in range(entry, self.config.depth))
        names = frozenset(
            n
            for n in self.params.names()
            if n.startswith(io) or n.startswith(trunk) or n.startswith("embed.")
        )
        return ActiveSet(stage, names)

    def trunk_names(self) -> list:
        return [n for n in self.params.names() if n.startswith("trunk.")]

    def multires_overhead(self) -> int:
        """Parameters a single-resolution U-Net of the same trunk would not have."""
        p = self.params
        total = self.params.count([n for n in p.names() if n.startswith("io.") or n == "embed.res.weight"])
        top_in, top_out = self.io_prefixes(1)
        c_img = self.config.image_channels
        baseline = p.count([n for n in p.names() if n.startswith(top_out)])
        w = p[f"{top_in}weight"]
        baseline += w.shape[0] * c_img * w.shape[2] * w.shape[3] + w.shape[0]
        return total - baseline


@dataclass(frozen=True)
class ActiveSet:
    stage: int
    names: frozenset = field(default_factory=frozenset)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __iter__(self):
        return iter(sorted(self.names))

    def __len__(self) -> int:
        return len(self.names)


def _T(t: Tensor) -> Tensor:
    """Transpose a 2-d parameter, differentiably."""
    return nx.ops.emit("transpose", [t], t.data.T, lambda g: (g.T,))


def build(config: NetConfig, rng: np.random.Generator | int = 0) -> UnifiedNet:
    """Allocate and initialize a :class:`UnifiedNet`."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    ladder = config.ladder
    n = ladder.n_stages
    depth = config.depth
    if depth < n:
        raise ValueError(f"trunk depth {depth} is shallower than the {n}-rung ladder")
    if ladder.resolutions[0] % (1 << (depth - 1)) or (ladder.resolutions[0] >> (depth - 1)) < 1:
        raise ValueError(f"resolution {ladder.resolutions[0]} cannot be halved {depth - 1} times")
    if config.blocks_per_level < 1 or config.base_channels < 1 or config.embed_dim < 2:
        raise ValueError("blocks_per_level, base_channels and embed_dim must be positive")
    if any(m < 1 for m in config.mult):
        raise ValueError(f"channel multipliers must be positive, got {config.mult}")
    if config.image_channels < 1:
        raise ValueError("image_channels must be positive")

    dtype = nx.tensor.DTYPES[config.dtype]
    store = ParamStore()
    init = _Init(store, rng, dtype)
    e = config.embed_dim
    c_img = config.image_channels

    init.dense("embed.sigma.fc1", e, e)
    init.dense("embed.sigma.fc2", e, e)
    store.add("embed.res.weight", np.zeros((e, n), dtype))
    if config.label_count:
        store.add("embed.label.weight", np.zeros((config.label_count, e), dtype))

    def block(name, cin, cout):
        init.conv(f"{name}.conv1", cin, cout, 3)
        init.norm(f"{name}.norm1", cout)
        init.dense(f"{name}.emb", e, cout)
        init.conv(f"{name}.conv2", cout, cout, 3)
        init.norm(f"{name}.norm2", cout)
        if cin != cout:
            init.conv(f"{name}.skip", cin, cout, 1)

    for lvl in range(depth):
        c = config.level_channels(lvl)
        for b in range(config.blocks_per_level):
            block(f"trunk.l{lvl}.enc{b}", c, c)
        if lvl < depth - 1 and config.level_channels(lvl + 1) != c:
            init.conv(f"trunk.l{lvl}.down", c, config.level_channels(lvl + 1), 1)
        for b in range(config.blocks_per_level):
            cin = c + config.level_channels(lvl + 1) if (b == 0 and lvl < depth - 1) else c
            block(f"trunk.l{lvl}.dec{b}", cin, c)

    for stage in range(1, n + 1):
        r = ladder[stage]
        c = config.level_channels(stage - 1)
        cin = 2 * c_img if stage < n else c_img
        init.conv(f"io.in.r{r}", cin, c, 3)
        init.norm(f"io.out.r{r}.norm", c)
        init.conv(f"io.out.r{r}", c, c_img, 3, zero=True)
    return UnifiedNet(config, store)
