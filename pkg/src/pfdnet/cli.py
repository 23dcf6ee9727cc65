"""Command-line interface: ``pfdnet <command> [options]``.

Every command prints one machine-readable summary line (``key=value``
pairs) on stdout. Commands that write a directory also write the resolved
configuration there as ``config.txt``. Exit codes: 0 success, 2 usage or
configuration, 3 data or format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import io, plots
from .config import RunConfig, float_list, int_list
from .data import density_target, load_scenes, make_density, synth_dataset, write_scene
from .errors import ConfigError, DataError, NumericalError, PfdError, UsageError
from .gradcheck import CSV_HEADER as GRADCHECK_HEADER
from .gradcheck import SUITES, run_gradcheck
from .metrics import game, mae_rmse
from .network import PFDNet, PfdnetConfig, predict_count
from .penet import PENet, PENetConfig, psnr_report
from .perspective import fit_perspective_map, read_heights_csv
from .tensor_core import Rng
from .train import counting_data, penet_data, predict_densities, train_penet, train_pfdnet

log = logging.getLogger("pfdnet")

GAME_LEVELS = (0, 1, 2, 3)


# ---------------------------------------------------------------------------
# helpers


def _summary(command: str, **fields) -> None:
    parts = [command] + [f"{k}={_fmt(v)}" for k, v in fields.items()]
    print(" ".join(parts), flush=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lock(stack: ExitStack, out: Path) -> None:
    lock = FileLock(str(out / ".lock"), timeout=0)
    try:
        stack.enter_context(lock)
    except Timeout:
        raise UsageError(f"output directory {out} is in use by another run") from None


def _shape2(text: str, name: str) -> tuple[int, int]:
    dims = int_list(text, name)
    if len(dims) != 2 or min(dims) < 1:
        raise ConfigError(f"{name}: expected h,w, got {text!r}")
    return dims[0], dims[1]


def _meta(cfg: RunConfig, rng_state=None, **extra) -> dict[str, str]:
    meta = {"config": cfg.echo()}
    if rng_state is not None:
        meta["rng"] = json.dumps(rng_state, sort_keys=True)
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def _pfdnet_config_json(c: PfdnetConfig) -> str:
    return json.dumps(dataclasses.asdict(c), sort_keys=True)


def _load_penet(path) -> tuple[PENet, dict]:
    if not path:
        raise UsageError("a PENet checkpoint is required (--penet / --init)")
    if not Path(path).exists():
        raise UsageError(f"PENet checkpoint {path} does not exist")
    tensors, meta = io.load_checkpoint(path)
    net = PENet(PENetConfig(width_mult=float(meta.get("width_mult", 1 / 8))), rng=None, zero_init=True)
    for k, v in tensors.items():
        if k in net.params:
            if net.params[k].shape != v.shape:
                raise DataError(f"{path}: entry {k} has shape {v.shape}, expected {net.params[k].shape}")
            np.copyto(net.params[k], v)
    net.phase = meta.get("phase", "1")
    return net, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    suites = args.suites.split(",") if args.suites else list(SUITES)
    for s in suites:
        if s not in SUITES:
            raise ConfigError(f"unknown gradcheck suite {s!r}; expected {sorted(SUITES)}")
    checks = run_gradcheck(cfg.seed, suites)
    lines = [GRADCHECK_HEADER] + [c.csv() for c in checks]
    if cfg.out:
        out = _out_dir(cfg)
        cfg.write(out)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    failed = [c for c in checks if not c.ok]
    for c in failed:
        print(c.csv(), file=sys.stderr)
    worst = max(c.rel_err for c in checks)
    _summary("gradcheck", seed=cfg.seed, suites="+".join(suites), checks=len(checks), failed=len(failed), max_rel_err=f"{worst:.3e}")
    if failed:
        raise NumericalError(f"{len(failed)} gradient checks exceeded tolerance")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    shape = int_list(cfg.shape, "shape")
    if len(shape) != 4:
        raise ConfigError(f"shape: expected n,c,h,w, got {cfg.shape!r}")
    ops = list(bench_mod.OPS) if cfg.op == "all" else [cfg.op]
    rows = []
    for op in ops:
        settings = float_list(cfg.windows, "windows") if op == "pgc" else float_list(cfg.rates, "rates")
        for setting in settings:
            rows.append(bench_mod.bench_op(op, shape, cfg.k, setting, cfg.bench_repeats, cfg.seed))
    text = "\n".join([bench_mod.CSV_HEADER] + [bench_mod.format_row(r) for r in rows]) + "\n"
    sys.stdout.write(text)
    if cfg.out:
        out = _out_dir(cfg)
        cfg.write(out)
        (out / "bench.csv").write_text(text)
        plots.plot_bench(rows, out / "bench.png")
    _summary("bench", rows=len(rows), ops="+".join(ops))
    return 0


def cmd_make_density(cfg: RunConfig, args) -> int:
    if not args.ann or not cfg.out:
        raise UsageError("make-density needs --ann and --out")
    if args.image:
        shape = io.read_ppm(args.image).shape[1:]
    elif args.size:
        shape = _shape2(args.size, "size")
    else:
        raise UsageError("make-density needs --image or --size for the map shape")
    points = io.read_annotations(args.ann, shape)
    grid = density_target(points, shape) if args.half else make_density(points, shape)
    io.write_map(cfg.out, grid)
    _summary("make-density", heads=len(points), h=grid.shape[0], w=grid.shape[1], sum=math.fsum(grid.astype(np.float64).ravel()))
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    with ExitStack() as stack:
        _lock(stack, out)
        cfg.write(out)
        shape = _shape2(cfg.image_size, "image_size")
        rng_bounds = int_list(cfg.density_range, "density_range")
        if len(rng_bounds) != 2:
            raise ConfigError(f"density_range: expected lo,hi, got {cfg.density_range!r}")
        lo, hi = rng_bounds
        scenes = synth_dataset(cfg.n_scenes, shape, (lo, hi), cfg.seed)
        for sc in scenes:
            write_scene(out, sc)
        total = sum(len(sc.heads) for sc in scenes)
    _summary("synth", scenes=len(scenes), heads=total, h=shape[0], w=shape[1])
    return 0


def cmd_fit_persp(cfg: RunConfig, args) -> int:
    if not args.heights or not cfg.out or not args.size:
        raise UsageError("fit-persp needs --heights, --size and --out")
    shape = _shape2(args.size, "size")
    grid = fit_perspective_map(read_heights_csv(args.heights), shape)
    io.write_map(cfg.out, grid)
    _summary("fit-persp", h=shape[0], w=shape[1], top=float(grid[0, 0]), bottom=float(grid[-1, 0]))
    return 0


def cmd_train_penet(cfg: RunConfig, args) -> int:
    if cfg.phase not in (1, 2):
        raise ConfigError(f"phase must be 1 or 2, got {cfg.phase}")
    if not cfg.data:
        raise UsageError("train-penet needs --data")
    out = _out_dir(cfg)
    with ExitStack() as stack:
        _lock(stack, out)
        if cfg.phase == 2:
            net, meta = _load_penet(cfg.init)
            if meta.get("phase") != "1":
                raise UsageError(f"phase 2 needs a phase-1 checkpoint, {cfg.init} has phase {meta.get('phase')!r}")
            if abs(net.config.width_mult - cfg.width_mult) > 1e-12:
                log.warning("width_mult taken from checkpoint: %s", net.config.width_mult)
                cfg["width_mult"] = net.config.width_mult
            # the image encoder starts fresh; the decoder is transplanted
            fresh = PENet(net.config, Rng(cfg.seed))
            for k in net.names("enc_i"):
                np.copyto(net.params[k], fresh.params[k])
        else:
            net = PENet(PENetConfig(width_mult=cfg.width_mult), Rng(cfg.seed))
        cfg.write(out)
        scenes = load_scenes(cfg.data)
        if any(sc.persp is None for sc in scenes):
            raise DataError(f"{cfg.data}: every scene needs a perspective map for PENet training")
        data = penet_data(scenes)
        lines = ["epoch,loss,psnr"]
        hist = train_penet(cfg.phase, data, net, cfg.epochs, cfg.batch, cfg.lr, cfg.seed,
                           on_epoch=lambda e, l, p: lines.append(f"{e},{l:.9g},{psnr_report(p):.6f}"))
        (out / "log.csv").write_text("\n".join(lines) + "\n")
        tensors = dict(net.params)
        tensors.update(hist.optimizer.state_tensors())
        io.save_checkpoint(out / "penet.ckpt", tensors,
                           _meta(cfg, hist.rng_state, phase=str(cfg.phase), width_mult=repr(cfg.width_mult)))
        plots.plot_psnr(hist.epochs, [psnr_report(p) for p in hist.psnr], out / "psnr.png", cfg.phase)
    final = psnr_report(hist.psnr[-1]) if hist.psnr else float("nan")
    _summary("train-penet", phase=cfg.phase, epochs=cfg.epochs, scenes=len(scenes), psnr=final)
    return 0


def _build_model(cfg: RunConfig) -> PFDNet:
    penet = None
    if cfg.persp_source == "penet":
        penet, meta = _load_penet(cfg.penet)
        if meta.get("phase") != "2":
            raise UsageError(f"persp_source=penet needs a phase-2 PENet checkpoint, {cfg.penet} has phase {meta.get('phase')!r}")
    model_cfg = PfdnetConfig(persp_source=cfg.persp_source, n_pfc=cfg.n_pfc)
    return PFDNet(model_cfg, Rng(cfg.seed), penet=penet)


def cmd_train(cfg: RunConfig, args) -> int:
    if not cfg.data:
        raise UsageError("train needs --data")
    out = _out_dir(cfg)
    with ExitStack() as stack:
        _lock(stack, out)
        model = _build_model(cfg)
        cfg.write(out)
        data = counting_data(load_scenes(cfg.data))
        lines = ["step,loss,mae"]
        hist = train_pfdnet(model, data, cfg.iters, cfg.batch, cfg.lr, cfg.seed, penet_mode=cfg.penet_mode,
                            lambda_persp=cfg.lambda_persp, flip_prob=cfg.flip_prob,
                            on_step=lambda s, p, d, l, m: lines.append(f"{s},{l:.9g},{m:.9g}"))
        if not all(math.isfinite(v) for v in hist.loss):
            raise NumericalError("training loss became non-finite")
        (out / "log.csv").write_text("\n".join(lines) + "\n")
        tensors = dict(model.params)
        tensors.update(hist.optimizer.state_tensors())
        io.save_checkpoint(out / "model.ckpt", tensors,
                           _meta(cfg, hist.rng_state, model=_pfdnet_config_json(model.config),
                                 width_mult=repr(model.penet.config.width_mult if model.penet else cfg.width_mult),
                                 mae_initial=repr(hist.mae_initial), mae_final=repr(hist.mae_final)))
        plots.plot_training(hist.steps, hist.loss, hist.mae, out / "curves.png")
    _summary("train", iters=cfg.iters, scenes=len(data.ids), persp_source=cfg.persp_source,
             mae_initial=hist.mae_initial, mae_final=hist.mae_final)
    return 0


def _load_model(path) -> PFDNet:
    if not path or not Path(path).exists():
        raise UsageError(f"model checkpoint {path!r} does not exist")
    tensors, meta = io.load_checkpoint(path)
    if "model" not in meta:
        raise DataError(f"{path}: not a PFDNet checkpoint")
    model_cfg = PfdnetConfig(**json.loads(meta["model"]))
    penet = None
    if model_cfg.persp_source == "penet":
        penet = PENet(PENetConfig(width_mult=float(meta["width_mult"])), rng=None, zero_init=True)
    model = PFDNet(model_cfg, Rng(0), penet=penet)
    model.load_params({k: v for k, v in tensors.items() if k in model.params})
    if penet is not None:
        for k in penet.params:
            np.copyto(penet.params[k], model.params[f"penet.{k}"])
    return model


def cmd_predict(cfg: RunConfig, args) -> int:
    if not cfg.data:
        raise UsageError("predict needs --data")
    out = _out_dir(cfg)
    with ExitStack() as stack:
        _lock(stack, out)
        model = _load_model(cfg.model)
        cfg.write(out)
        data = counting_data(load_scenes(cfg.data))
        dens = predict_densities(model, data)
        lines = ["id,count"]
        for sid, d in zip(data.ids, dens):
            io.write_map(out / f"{sid}.density.f32m", d)
            lines.append(f"{sid},{predict_count(d):.6f}")
        (out / "counts.csv").write_text("\n".join(lines) + "\n")
        plots.plot_density(dens[0], data.density[0], out / f"{data.ids[0]}.density.png", data.ids[0])
    total = math.fsum(predict_count(d) for d in dens)
    _summary("predict", images=len(dens), total_count=total)
    return 0


def _gt_map(gt_dir: Path, sid: str, shape) -> np.ndarray:
    path = gt_dir / f"{sid}.density.f32m"
    if path.exists():
        return io.read_map(path)
    ann, ppm = gt_dir / f"{sid}.csv", gt_dir / f"{sid}.ppm"
    if not ann.exists():
        raise DataError(f"no ground truth for {sid} in {gt_dir}")
    image_shape = io.read_ppm(ppm).shape[1:] if ppm.exists() else shape
    points = io.read_annotations(ann, image_shape)
    if tuple(shape) == tuple(image_shape):
        return make_density(points, image_shape)
    return density_target(points, image_shape)


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.pred or not args.gt:
        raise UsageError("eval needs --pred and --gt")
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    sids = sorted(p.name[:-len(".density.f32m")] for p in pred_dir.glob("*.density.f32m"))
    if not sids:
        raise DataError(f"no predictions (*.density.f32m) in {pred_dir}")
    preds, gts, games = [], [], {L: [] for L in GAME_LEVELS}
    rows = ["id,pred,gt," + ",".join(f"game{L}" for L in GAME_LEVELS)]
    for sid in sids:
        p = io.read_map(pred_dir / f"{sid}.density.f32m")
        g = _gt_map(gt_dir, sid, p.shape)
        if g.shape != p.shape:
            raise DataError(f"{sid}: prediction shape {p.shape} != ground truth {g.shape}")
        pc, gc = math.fsum(p.astype(np.float64).ravel()), math.fsum(g.astype(np.float64).ravel())
        preds.append(pc)
        gts.append(gc)
        per = [game(p, g, L) for L in GAME_LEVELS]
        for L, v in zip(GAME_LEVELS, per):
            games[L].append(v)
        rows.append(f"{sid},{pc:.6f},{gc:.6f}," + ",".join(f"{v:.6f}" for v in per))
    mae, rmse = mae_rmse(preds, gts)
    fields = {"images": len(sids), "mae": mae, "rmse": rmse}
    fields.update({f"game{L}": math.fsum(games[L]) / len(sids) for L in GAME_LEVELS})
    if cfg.out:
        out = _out_dir(cfg)
        cfg.write(out)
        (out / "eval.csv").write_text("\n".join(rows) + "\n")
    _summary("eval", **fields)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "make-density": cmd_make_density,
    "synth": cmd_synth,
    "fit-persp": cmd_fit_persp,
    "train-penet": cmd_train_penet,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}

# flags that map onto RunConfig keys, per command
_CONFIG_FLAGS = {
    "gradcheck": ["out"],
    "bench": ["op", "shape", "k", "rates", "windows", "bench_repeats", "out"],
    "make-density": ["out"],
    "synth": ["n_scenes", "image_size", "density_range", "out"],
    "fit-persp": ["out"],
    "train-penet": ["phase", "data", "out", "init", "epochs", "batch", "lr", "width_mult"],
    "train": ["data", "out", "persp_source", "penet", "penet_mode", "lambda_persp", "iters", "batch", "lr",
              "n_pfc", "flip_prob"],
    "eval": ["out"],
    "predict": ["model", "data", "out"],
}
_ALIASES = {"bench_repeats": "--repeats"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfdnet", description="Perspective-guided fractional-dilation counting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file (flags override it)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
        for key in _CONFIG_FLAGS[name]:
            flag = _ALIASES.get(key, "--" + key.replace("_", "-"))
            p.add_argument(flag, dest=key, default=None)
        if name == "gradcheck":
            p.add_argument("--suites", default=None, help=f"comma list of {','.join(SUITES)}")
        if name == "make-density":
            p.add_argument("--ann", required=True)
            p.add_argument("--image", default=None)
            p.add_argument("--size", default=None, help="h,w")
            p.add_argument("--half", action="store_true", help="sum-pool to half resolution")
        if name == "fit-persp":
            p.add_argument("--heights", required=True)
            p.add_argument("--size", required=True, help="h,w")
        if name == "eval":
            p.add_argument("--pred", required=True)
            p.add_argument("--gt", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS[args.command]}
        overrides["seed"] = args.seed
        overrides["command"] = args.command
        cfg = RunConfig.resolve(args.config, overrides)
        with ExitStack() as stack:
            if args.threads is not None:
                if args.threads < 1:
                    raise ConfigError("--threads must be >= 1")
                stack.enter_context(threadpool_limits(limits=args.threads))
            return COMMANDS[args.command](cfg, args)
    except PfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
