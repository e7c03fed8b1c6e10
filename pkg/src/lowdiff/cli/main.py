"""``lowdiff`` command line: train, sample, eval, bench, effnfe, gen-shapes.

Every command parses and validates its whole configuration before touching
the filesystem.  Machine-readable output is JSON lines; each record carries
``schema_version``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .. import network
from ..cascade import (
    CascadeResult,
    FullResolutionModel,
    NetModel,
    TrainState,
    sample_cascade,
    single_stage_config,
    train_step,
)
from ..metrics import SCHEMA_VERSION, StageCost, bench, effective_nfe, fit_gaussian, frechet, moment_fit
from ..numerics import NonFiniteError
from ..oracle import OracleError, OracleModel, sample_mixture
from .config import ConfigError, RunConfig, load_config
from .io import Checkpoint, FormatError, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .shapes import PALETTES, gen_shapes


class CliError(Exception):
    """User-facing failure; reported on stderr with exit status 2."""


def _record(kind: str, **fields) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "record": kind}
    out.update(fields)
    return out


def _emit(rec: dict, fh=None) -> None:
    line = json.dumps(rec, sort_keys=False)
    print(line)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        batch=getattr(args, "batch", None),
        out=getattr(args, "out", None),
        steps=getattr(args, "steps", None),
    )


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- data ------------------------------------------------------------------------------


def _dataset(cfg: RunConfig) -> np.ndarray:
    r1, c = cfg.resolutions[0], cfg.image_channels
    if cfg.dataset:
        try:
            data = load_tensor(cfg.dataset)
        except FormatError as e:
            raise CliError(f"unreadable dataset: {e}") from e
    elif cfg.synthetic == "shapes":
        if PALETTES[cfg.shapes_palette] != c:
            raise CliError(f"shapes_palette {cfg.shapes_palette} has {PALETTES[cfg.shapes_palette]} channels, "
                           f"image_channels is {c}")
        data = gen_shapes(cfg.seed, cfg.shapes_count, r1, cfg.shapes_palette)
    else:
        try:
            flat = sample_mixture(cfg.mixture(), np.random.default_rng([cfg.seed, 7]), cfg.shapes_count)
        except OracleError as e:
            raise CliError(str(e)) from e
        data = flat.reshape(-1, c, r1, r1)
    if data.ndim != 4 or data.shape[1:] != (c, r1, r1):
        raise CliError(f"dataset shape {data.shape} does not match [n, {c}, {r1}, {r1}]")
    if not np.all(np.isfinite(data)):
        raise CliError("dataset contains non-finite values")
    return data


def _load_net(cfg: RunConfig, path: Optional[str], force: bool, seed: int) -> tuple:
    net = network.build(cfg.net_config(), seed)
    ck = None
    if path:
        try:
            ck = load_checkpoint(path, None if force else cfg.digest())
            ck.restore(net.params)
        except FormatError as e:
            raise CliError(str(e)) from e
    return net, ck


# -- commands -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _dataset(cfg)
    net, ck = _load_net(cfg, args.checkpoint, args.force, cfg.seed)
    out = _outdir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    rng = (ck.rng() if ck is not None else None) or np.random.default_rng(cfg.seed)
    state = TrainState(
        net, cfg.cascade_config(), cfg.loss_config(), rng, lr=cfg.lr, mode=cfg.train_mode,
        step=ck.step if ck is not None else 0,
    )

    def checkpoint(name: str) -> None:
        save_checkpoint(out / name, Checkpoint.from_store(net.params, cfg.digest(), state.step, state.rng))

    with open(out / "train.jsonl", "a") as log:
        while state.step < cfg.steps:
            idx = state.rng.integers(0, data.shape[0], size=cfg.batch)
            try:
                losses = train_step(state, data[idx])
            except NonFiniteError as e:
                checkpoint("failed.ldif")
                raise CliError(f"non-finite value at step {state.step + 1}: {e}") from e
            if state.step % cfg.log_every == 0 or state.step == cfg.steps:
                rec = _record("train", step=state.step, losses={f"stage{i + 1}": v for i, v in enumerate(losses)})
                log.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                checkpoint(f"step{state.step:07d}.ldif")
    checkpoint("final.ldif")
    _emit(_record("train_done", step=state.step, checkpoint=str(out / "final.ldif")))
    return 0


def _model(cfg: RunConfig, args, allow_random: bool = False):
    cascade = cfg.cascade_config()
    if args.oracle:
        try:
            return OracleModel(cfg.mixture(), cascade, cfg.image_channels), None
        except OracleError as e:
            raise CliError(str(e)) from e
    if not args.checkpoint and not allow_random:
        raise CliError("need --checkpoint (or --oracle)")
    net, _ = _load_net(cfg, args.checkpoint, args.force, cfg.seed)
    return NetModel(net), net


def cmd_sample(args) -> int:
    cfg = _config(args)
    count = args.count if args.count is not None else cfg.sample_count
    if count < 1:
        raise CliError("--count must be >= 1")
    model, _ = _model(cfg, args)
    cascade = cfg.cascade_config()
    res = sample_cascade(model, cascade, cfg.seed, count)
    out = _outdir(cfg)
    save_tensor(out / "samples.ldtn", res.images.astype(np.float32))
    with open(out / "sample.jsonl", "w") as fh:
        for st in res.stages:
            _emit(
                _record("nfe", stage=st.stage, resolution=cascade.ladder[st.stage], nfe=st.nfe,
                        seconds=st.seconds, sigma_end=st.sigma_end),
                fh,
            )
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if (args.reference is None) == (not args.oracle):
        raise CliError("give exactly one of --reference FILE or --oracle")
    try:
        samples = load_tensor(args.samples)
        ref_arr = load_tensor(args.reference) if args.reference else None
    except FormatError as e:
        raise CliError(str(e)) from e
    a = fit_gaussian(samples.reshape(samples.shape[0], -1))
    if ref_arr is not None:
        b = fit_gaussian(ref_arr.reshape(ref_arr.shape[0], -1))
        source = str(args.reference)
    else:
        mu, cov = cfg.mixture().moments()
        b = moment_fit(mu, cov)
        source = "mixture"
    if a.dim != b.dim:
        raise CliError(f"dimension mismatch: samples {a.dim} vs reference {b.dim}")
    value = frechet(a, b)
    rec = _record("frechet", value=value, samples=str(args.samples), reference=source, count=a.count)
    if cfg.eval_threshold > 0:
        rec["threshold"] = cfg.eval_threshold
        rec["pass"] = bool(value < cfg.eval_threshold)
    _emit(rec)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.reps < 1 or args.warmup < 0:
        raise CliError("--reps must be >= 1 and --warmup >= 0")
    batch = cfg.batch
    r1 = cfg.resolutions[0]
    cascade = cfg.cascade_config()
    single = single_stage_config(r1, cfg.baseline_steps, cfg.baseline_sigma_min, cfg.baseline_sigma_max)
    model, net = _model(cfg, args, allow_random=True)
    if args.oracle:
        base = OracleModel(cfg.mixture(), single, cfg.image_channels)
        weights = "oracle"
    else:
        base = FullResolutionModel(net)
        weights = "checkpoint" if args.checkpoint else "random"
    runs: list = []

    def run_single():
        return sample_cascade(base, single, cfg.seed, batch)

    def run_cascade():
        res = sample_cascade(model, cascade, cfg.seed, batch)
        runs.append(res)
        return res

    rep_s = bench(run_single, batch, args.warmup, args.reps, "single")
    rep_s.extra = {"nfe": single.stage(1).nfe, "resolution": r1, "weights": weights}
    rep_c = bench(run_cascade, batch, args.warmup, args.reps, "cascade")
    timed: list[CascadeResult] = runs[args.warmup:]
    stages = []
    for i in range(cascade.n_stages):
        secs = float(np.mean([r.seconds[i] for r in timed]))
        nfe = timed[0].nfe[i]
        stages.append({"stage": i + 1, "resolution": cascade.ladder[i + 1], "nfe": nfe, "seconds": secs,
                       "latency_per_eval_s": secs / nfe})
    rep_c.extra = {"nfe": timed[0].nfe, "stages": stages, "weights": weights}
    out = _outdir(cfg)
    with open(out / "bench.jsonl", "w") as fh:
        _emit(rep_s.record(), fh)
        _emit(rep_c.record(), fh)
        _emit(
            _record("speedup", speedup=rep_s.latency_s / rep_c.latency_s - 1.0,
                    single_latency_s=rep_s.latency_s, cascade_latency_s=rep_c.latency_s,
                    single_throughput=rep_s.throughput, cascade_throughput=rep_c.throughput),
            fh,
        )
    return 0


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_effnfe(args) -> int:
    if args.bench:
        try:
            lines = Path(args.bench).read_text().splitlines()
        except OSError as e:
            raise CliError(f"cannot read {args.bench}: {e}") from e
        recs = [json.loads(x) for x in lines if x.strip()]
        casc = [r for r in recs if r.get("record") == "bench" and r.get("label") == "cascade"]
        if not casc:
            raise CliError(f"{args.bench}: no cascade bench record")
        try:
            stages = casc[-1]["extra"]["stages"]
            costs = [StageCost(s["resolution"], int(s["nfe"]), float(s["latency_per_eval_s"])) for s in stages]
        except (KeyError, TypeError) as e:
            raise CliError(f"{args.bench}: bench record lacks per-stage latency fields ({e})") from e
        highest = [s["stage"] for s in stages].index(1)
    else:
        if not args.nfe:
            raise CliError("give --bench FILE or --nfe LIST")
        nfes = [int(v) for v in args.nfe.split(",") if v.strip()]
        if args.latency and args.eta:
            raise CliError("give --latency or --eta, not both")
        if args.latency:
            lat = _floats(args.latency)
        elif args.eta:
            lat = _floats(args.eta)
        else:
            raise CliError("explicit NFEs need --latency or --eta")
        if len(lat) != len(nfes):
            raise CliError(f"{len(nfes)} NFEs but {len(lat)} latencies")
        # lists run lowest resolution first; the last entry is the target resolution
        costs = [StageCost(0, n, l) for n, l in zip(nfes, lat)]
        highest = len(costs) - 1
    try:
        report = effective_nfe(costs, highest)
    except ValueError as e:
        raise CliError(str(e)) from e
    _emit(report.record())
    return 0


def cmd_gen_shapes(args) -> int:
    cfg = _config(args)
    res = args.resolution or cfg.resolutions[0]
    count = args.count if args.count is not None else cfg.shapes_count
    palette = args.palette or cfg.shapes_palette
    if res not in cfg.resolutions:
        raise CliError(f"resolution {res} is not on the ladder {cfg.resolutions}")
    if palette not in PALETTES or count < 1:
        raise CliError(f"need a palette in {sorted(PALETTES)} and --count >= 1")
    out = _outdir(cfg)
    imgs = gen_shapes(cfg.seed, count, res, palette)
    path = out / "shapes.ldtn"
    save_tensor(path, imgs)
    _emit(_record("dataset", path=str(path), count=count, resolution=res, channels=imgs.shape[1]))
    return 0


# -- argument parsing -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowdiff", description="Unified multi-resolution cascaded diffusion")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, batch=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        if batch:
            sp.add_argument("--batch", type=int, help="batch size")

    def model_flags(sp):
        sp.add_argument("--checkpoint", help="LDIF checkpoint")
        sp.add_argument("--oracle", action="store_true", help="use analytic mixture denoisers instead of a net")
        sp.add_argument("--force", action="store_true", help="load a checkpoint despite a config digest mismatch")

    sp = sub.add_parser("train", help="run the per-resolution training loop")
    common(sp)
    sp.add_argument("--steps", type=int, help="total training steps")
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.add_argument("--force", action="store_true", help="resume despite a config digest mismatch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="cascaded bottom-up sampling")
    common(sp, batch=False)
    model_flags(sp)
    sp.add_argument("--count", type=int, help="number of images")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="Frechet distance of samples to a reference")
    common(sp, batch=False)
    sp.add_argument("--samples", required=True, help="LDTN samples")
    sp.add_argument("--reference", help="LDTN reference set")
    sp.add_argument("--oracle", action="store_true", help="compare with the configured mixture's exact moments")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="single-stage vs cascade sampling throughput")
    common(sp)
    model_flags(sp)
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=2)
    sp.set_defaults(func=cmd_bench, batch=64)

    sp = sub.add_parser("effnfe", help="latency-scaled effective NFE")
    sp.add_argument("--bench", help="bench JSONL with per-stage latencies")
    sp.add_argument("--nfe", help="comma-separated NFEs, lowest resolution first")
    sp.add_argument("--latency", help="comma-separated per-evaluation latencies, same order")
    sp.add_argument("--eta", help="comma-separated latency ratios to the last stage, same order")
    sp.set_defaults(func=cmd_effnfe)

    sp = sub.add_parser("gen-shapes", help="write a synthetic shapes dataset")
    common(sp, batch=False)
    sp.add_argument("--count", type=int)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--palette", choices=sorted(PALETTES))
    sp.set_defaults(func=cmd_gen_shapes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError) as e:
        print(f"lowdiff {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
