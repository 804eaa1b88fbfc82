"""Command-line harness: fit, compress, decompress, eval, sweep, synth.

Configuration is key=value text (one per line, # comments); --set k=v
overrides file entries, and dedicated flags override both. Exit codes:
0 success, 2 config/usage error, 3 bitstream error, 4 training divergence,
5 I/O error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import checkpoint as ckpt
from . import codec, metrics, training, video as media
from .errors import ConfigError, DivergenceError
from .model import ModelConfig, SHARE_MODES, count_params, match_budget
from .training import TrainConfig, compress_model, fit, write_log_csv

EXIT_CONFIG = 2
EXIT_BITSTREAM = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5

_MODEL_KEYS = {"M": int, "L": int, "C": int, "K": int, "r": int,
               "grid_T": int, "grid_C0": int, "share_mode": str}
_TRAIN_KEYS = {f.name: type(f.default) for f in fields(TrainConfig)}


def _parse_kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def read_config_file(path: str) -> dict[str, str]:
    opts: dict[str, str] = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = _parse_kv(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        opts[key] = value
    return opts


def gather_options(args) -> dict[str, str]:
    opts: dict[str, str] = {}
    if getattr(args, "config", None):
        opts.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, value = _parse_kv(item)
        opts[key] = value
    unknown = set(opts) - set(_MODEL_KEYS) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return opts


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            return value.lower() in ("1", "true", "yes")
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def make_train_config(opts: dict[str, str], seed: int | None) -> TrainConfig:
    kwargs = {k: _convert(k, v, _TRAIN_KEYS[k]) for k, v in opts.items() if k in _TRAIN_KEYS}
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig(**kwargs).validate()


def make_model_config(shape, opts: dict[str, str]) -> ModelConfig:
    T, H, W = int(shape[0]), int(shape[1]), int(shape[2])
    kw = {k: _convert(k, v, _MODEL_KEYS[k]) for k, v in opts.items() if k in _MODEL_KEYS}
    M = kw.pop("M", 2)
    if H % (1 << M) or W % (1 << M):
        raise ConfigError(f"{H}x{W} frames are not divisible by 2^{M}")
    cfg = ModelConfig(M=M, L=kw.pop("L", 2), C=kw.pop("C", 16),
                      grid_T=kw.pop("grid_T", T), grid_H0=H >> M, grid_W0=W >> M,
                      grid_C0=kw.pop("grid_C0", 8), T=T, H=H, W=W, **kw)
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = media.SynthSpec(kind=args.kind, T=args.frames, H=args.height,
                           W=args.width, seed=args.seed,
                           square_size=args.square_size,
                           velocity=tuple(int(v) for v in args.velocity.split(",")),
                           cell=args.cell, scene_interval=args.scene_interval,
                           pan_speed=args.pan_speed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    media.save_video(media.synth_video(spec), args.out)
    print(f"wrote {args.out} ({spec.T}x{spec.H}x{spec.W}, kind={spec.kind})")
    return 0


def cmd_fit(args) -> int:
    vid = media.load_video(args.video)
    opts = gather_options(args)
    mcfg = make_model_config(vid.shape, opts)
    tcfg = make_train_config(opts, args.seed)
    store, log = fit(vid, mcfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt.save_checkpoint(store, os.path.join(args.out, "checkpoint.srnc"))
    write_log_csv(os.path.join(args.out, "train_log.csv"), log)
    final = log[-1]["psnr"] if log else float("nan")
    print(f"fit done: {len(log)} steps, params={count_params(mcfg)['total']}, "
          f"final batch psnr {final!r} dB")
    return 0


def cmd_compress(args) -> int:
    store = ckpt.load_checkpoint(args.checkpoint)
    vid = media.load_video(args.video)
    opts = gather_options(args)
    tcfg = make_train_config(opts, args.seed)
    if args.prune is not None:
        tcfg = replace(tcfg, prune_fraction=args.prune).validate()
    blob, report, _ = compress_model(store, vid, tcfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "model.srnv"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(args.out, "report.csv"), "w", newline="") as fh:
        fh.write("bpp,est_sm_bits,est_cm_bits,est_total_bits,psnr\n")
        fh.write(f"{report['bpp']!r},{report['est_sm_bits']!r},{report['est_cm_bits']!r},"
                 f"{report['est_total_bits']!r},{report['psnr']!r}\n")
    print(f"compressed to {len(blob)} bytes, bpp {report['bpp']!r}, "
          f"quantized psnr {report['psnr']!r} dB")
    return 0


def cmd_decompress(args) -> int:
    try:
        with open(args.bitstream, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise media.VideoIOError(str(exc)) from exc
    vid = codec.decode_video(data)
    media.save_video(vid, args.out)
    print(f"decoded {vid.shape[0]} frames to {args.out}")
    if args.reference:
        ref = media.load_video(args.reference)
        print(f"psnr {metrics.psnr(vid, ref)!r} dB")
    return 0


def cmd_eval(args) -> int:
    if args.anchor or args.test:
        if not (args.anchor and args.test):
            raise ConfigError("--anchor and --test must be given together")
        try:
            anchor = metrics.read_rd_csv(args.anchor)
            test = metrics.read_rd_csv(args.test)
            print(f"bd_rate_pct {metrics.bd_rate(anchor, test)!r}")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return 0
    if not (args.video and args.reference):
        raise ConfigError("eval needs --video/--reference or --anchor/--test")
    a = media.load_video(args.video)
    b = media.load_video(args.reference)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    mean_ssim = float(np.mean([metrics.ssim(a[t], b[t]) for t in range(a.shape[0])]))
    print(f"psnr {metrics.psnr(a, b)!r} dB")
    print(f"ssim {mean_ssim!r}")
    return 0


def _sweep_cell(payload):
    """One (mode, budget) cell: budget-matched fit -> compress -> RD point."""
    vid, template, tcfg, mode, budget, cell_dir = payload
    try:
        mcfg = match_budget(budget, replace(template, share_mode=mode))
        store, log = fit(vid, mcfg, tcfg)
        blob, report, _ = compress_model(store, vid, tcfg)
        os.makedirs(cell_dir, exist_ok=True)
        with open(os.path.join(cell_dir, "model.srnv"), "wb") as fh:
            fh.write(blob)
        write_log_csv(os.path.join(cell_dir, "train_log.csv"), log)
        return mode, budget, (report["bpp"], report["psnr"]), None
    except (ConfigError, DivergenceError, ValueError) as exc:
        return mode, budget, None, f"{type(exc).__name__}: {exc}"


def run_sweep(vid, template: ModelConfig, tcfg: TrainConfig, budgets, modes,
              out_dir, jobs: int = 1, debug_tied: bool = False):
    """Fit/compress every (mode, budget) cell and emit RD curves + BD summary."""
    os.makedirs(out_dir, exist_ok=True)
    run_modes = modes[:1] if debug_tied else modes
    cells = [(vid, template, tcfg, mode, budget,
              os.path.join(out_dir, "cells", f"{mode}_{budget}"))
             for mode in run_modes for budget in budgets]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    points: dict[str, list[metrics.RDPoint]] = {m: [] for m in modes}
    failures = []
    for mode, budget, point, err in results:
        targets = modes if debug_tied else [mode]
        if point is None:
            failures.append((mode, budget, err))
            continue
        for m in targets:
            points[m].append(metrics.RDPoint(*point))
    for mode in modes:
        points[mode].sort(key=lambda p: p.bpp)
        metrics.write_rd_csv(os.path.join(out_dir, f"rd_{mode}.csv"), points[mode])

    summary = []
    if "none" in modes:
        anchor = points["none"]
        for mode in modes:
            complete = len(points[mode]) == len(budgets) and len(anchor) == len(budgets)
            if complete and len(budgets) >= 4:
                try:
                    summary.append((mode, metrics.bd_rate(anchor, points[mode])))
                except ValueError as exc:
                    failures.append((mode, -1, f"bd_rate: {exc}"))
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        fh.write("mode,bd_rate_vs_none_pct\n")
        for mode, bd in summary:
            fh.write(f"{mode},{bd!r}\n")
    return points, dict(summary), failures


def cmd_sweep(args) -> int:
    if args.synth:
        spec = media.SynthSpec(kind=args.synth, T=args.frames, H=args.height,
                               W=args.width, seed=args.seed)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        vid = media.synth_video(spec)
    elif args.video:
        vid = media.load_video(args.video)
    else:
        raise ConfigError("sweep needs --video or --synth")
    opts = gather_options(args)
    template = make_model_config(vid.shape, opts)
    tcfg = make_train_config(opts, args.seed)
    budgets = [int(b) for b in args.budgets.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    for mode in modes:
        if mode not in SHARE_MODES:
            raise ConfigError(f"unknown share mode {mode!r}")
    if len(budgets) < 4 and "none" in modes:
        print("note: fewer than 4 budgets, BD-rate summary will be empty", file=sys.stderr)
    points, summary, failures = run_sweep(
        vid, template, tcfg, budgets, modes, args.out,
        jobs=args.jobs, debug_tied=args.debug_tied)
    for mode, budget, err in failures:
        print(f"cell {mode}/{budget} failed: {err}", file=sys.stderr)
    for mode, bd in summary.items():
        print(f"bd_rate {mode} vs none: {bd!r} %")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--out", required=out_required, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srnerv",
                                     description="per-instance neural video codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic test video")
    p.add_argument("--kind", required=True, choices=media.SYNTH_KINDS)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--square-size", type=int, default=12)
    p.add_argument("--velocity", default="3,2")
    p.add_argument("--cell", type=int, default=8)
    p.add_argument("--scene-interval", type=int, default=4)
    p.add_argument("--pan-speed", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="overfit a model to a video")
    p.add_argument("--video", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compress", help="prune + QAT + serialize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--prune", type=float, default=None,
                   help="override prune fraction (0 disables masking)")
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a bitstream to video")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--reference", help="original video; prints PSNR when given")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR/SSIM between videos or BD-rate between RD CSVs")
    p.add_argument("--video")
    p.add_argument("--reference")
    p.add_argument("--anchor", help="anchor RD csv")
    p.add_argument("--test", help="test RD csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="RD sweep over share modes and budgets")
    p.add_argument("--video")
    p.add_argument("--synth", choices=media.SYNTH_KINDS)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--budgets", required=True, help="comma-separated parameter budgets")
    p.add_argument("--modes", default="none,full,hybrid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--debug-tied", action="store_true",
                   help="run one mode and alias its RD points to every mode")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except codec.BitstreamError as exc:
        print(f"bitstream error: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (media.VideoIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
