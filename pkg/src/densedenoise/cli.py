"""Command-line entry point.

Subcommands: count-params, train, denoise, eval, selftest.  Every run echoes
its effective configuration (including all seeds) so results can be
reproduced exactly.  Exit codes: 0 success, 2 usage, 3 file/format error,
4 training divergence, 5 self-test failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import GrayImage, NoiseSpec, PgmError, add_awgn, make_dataset, read_pgm, write_pgm
from .evaluation import diff_image, evaluate, file_hash
from .metrics import ms_ssim, psnr, ssim
from .model import ModelConfig, build, build_dncnn_ref, config_from_dict
from .training import DivergenceError, TrainConfig, train_stage1, train_stage2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_DIVERGENCE = 4
EXIT_CHECK = 5

_MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _echo_config(sections: dict):
    print("# effective configuration")
    for sec, kv in sections.items():
        print(f"[{sec}]")
        for k in sorted(kv):
            print(f"{k} = {kv[k]}")


def _load_config_file(path: str) -> dict:
    """Strict key = value config with [model]/[train]/[noise] sections."""
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)
    allowed = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "noise": {"sigma", "seed"}}
    out: dict = {}
    for sec in cp.sections():
        if sec not in allowed:
            raise ValueError(f"unknown config section [{sec}]")
        out[sec] = {}
        for k, v in cp.items(sec):
            if k not in allowed[sec]:
                raise ValueError(f"unknown key {k!r} in section [{sec}]")
            out[sec][k] = v
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return target_type(value)


def _model_config(args, file_cfg) -> ModelConfig:
    d: dict = dict(file_cfg.get("model", {}))
    for k, v in list(d.items()):
        f = ModelConfig.__dataclass_fields__[k]
        d[k] = _coerce(v, f.type if isinstance(f.type, type) else type(f.default))
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "tiny", False):
        d["pairs"] = 2
    return config_from_dict(d)


def _build_variant(name: str):
    if name == "dncnn_ref":
        return build_dncnn_ref()
    return build(ModelConfig(variant=name))


def cmd_count_params(args) -> int:
    try:
        net = _build_variant(args.variant)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    total, breakdown = net.count_parameters()
    _echo_config({"model": {"variant": args.variant}})
    print(f"{'parameter':<40} {'count':>10}")
    for name, count in breakdown:
        print(f"{name:<40} {count:>10}")
    print(f"{'TOTAL':<40} {total:>10}")
    if args.expect is not None:
        rel = abs(total - args.expect) / args.expect
        print(f"expected {args.expect}, relative deviation {rel:.5f}")
        if rel > 0.01:
            return EXIT_CHECK
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = _load_config_file(args.config)
        except (OSError, ValueError, configparser.Error) as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_USAGE
    if args.stage == 2 and not args.resume:
        print("error: --stage 2 requires --resume with a stage-1 checkpoint", file=sys.stderr)
        return EXIT_USAGE

    tc_kwargs: dict = dict(file_cfg.get("train", {}))
    for k, v in list(tc_kwargs.items()):
        default = TrainConfig.__dataclass_fields__[k].default
        tc_kwargs[k] = _coerce(v, type(default))
    tc_kwargs["stage"] = "stage1_full_mse" if args.stage == 1 else "stage2_lastlayer_combined"
    if args.epochs is not None:
        tc_kwargs["epochs"] = args.epochs
    if args.lr is not None:
        tc_kwargs["learning_rate"] = args.lr
    elif "learning_rate" not in tc_kwargs:
        tc_kwargs["learning_rate"] = 1e-3 if args.stage == 1 else 1e-4
    if args.seed is not None:
        tc_kwargs["seed"] = args.seed
    try:
        tconf = TrainConfig(**tc_kwargs)
    except (TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    noise_cfg = file_cfg.get("noise", {})
    sigma = args.sigma if args.sigma is not None else float(noise_cfg.get("sigma", 25))
    nseed = int(noise_cfg.get("seed", args.noise_seed))
    noise = NoiseSpec(sigma=sigma, seed=nseed)

    try:
        if args.resume:
            net = load_checkpoint(args.resume)
            mconf = net.config
        else:
            mconf = _model_config(args, file_cfg)
            net = build(mconf, seed=tconf.seed)
    except (CheckpointError, OSError, ValueError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_FORMAT

    _echo_config({
        "model": {k: getattr(mconf, k) for k in _MODEL_KEYS},
        "train": {k: getattr(tconf, k) for k in _TRAIN_KEYS},
        "noise": {"sigma": noise.sigma, "seed": noise.seed},
        "data": {"dir": args.data_dir, "patch_size": args.patch_size,
                 "stride": args.stride, "limit": args.patches,
                 "augment": args.augment, "shuffle_seed": tconf.seed},
    })

    try:
        dataset = make_dataset(args.data_dir, noise, patch_size=args.patch_size,
                               stride=args.stride, shuffle_seed=tconf.seed,
                               augment=args.augment, limit=args.patches)
    except (ValueError, PgmError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    print(f"dataset: {len(dataset)} patches, manifest sha256 {dataset.manifest_hash()[:16]}")

    try:
        if args.stage == 1:
            log = train_stage1(net, dataset, tconf)
        else:
            log = train_stage2(net, dataset, tconf)
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE

    save_checkpoint(net, args.out)
    if args.log:
        with open(args.log, "w") as f:
            f.write(log.text())
    if log.losses:
        print(f"steps={len(log.losses)} first_loss={log.losses[0]:.6e} last_loss={log.losses[-1]:.6e}")
    print(f"checkpoint written: {args.out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    try:
        clean_img = read_pgm(args.input)
    except (PgmError, OSError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_FORMAT

    _echo_config({"denoise": {"checkpoint": args.checkpoint, "input": args.input,
                              "output": args.output, "sigma": args.sigma,
                              "seed": args.seed}})
    clean = clean_img.to_unit(np.float32)
    if args.sigma is not None:
        noise = NoiseSpec(sigma=args.sigma, seed=args.seed)
        noisy = add_awgn(clean, noise, stream=0)
        print(f"noisy PSNR (unclipped): {psnr(clean, noisy, 1.0):.3f} dB")
        print(f"noisy PSNR (clipped):   {psnr(clean, np.clip(noisy, 0, 1), 1.0):.3f} dB")
    else:
        noisy = clean

    from .evaluation import denoise_image

    denoised = denoise_image(net, noisy)
    if args.sigma is not None:
        dc = np.clip(denoised, 0, 1)
        print(f"denoised PSNR: {psnr(clean, dc, 1.0):.3f} dB  "
              f"SSIM: {ssim(clean, dc):.4f}  MS-SSIM: {ms_ssim(clean, dc):.4f}")
    write_pgm(GrayImage.from_unit(denoised), args.output)
    if args.emit_diff:
        write_pgm(diff_image(clean, np.clip(denoised, 0, 1), gain=args.diff_gain), args.emit_diff)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    noise = NoiseSpec(sigma=args.sigma, seed=args.seed)
    _echo_config({"eval": {"checkpoint": args.checkpoint, "dir": args.dataset_dir,
                           "sigma": noise.sigma, "seed": noise.seed}})
    try:
        report = evaluate(net, args.dataset_dir, noise,
                          checkpoint_hash=file_hash(args.checkpoint))
    except ValueError as e:
        print(f"eval error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    print(report.to_text())
    print(report.to_tsv())
    return EXIT_OK


def cmd_selftest(_args) -> int:
    from .selftest import run_selftest

    ok = run_selftest()
    return EXIT_OK if ok else EXIT_CHECK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densedenoise",
                                description="dense-block residual denoiser")
    p.add_argument("--threads", type=int, default=1,
                   help="worker parallelism cap (1 = bit-exact single order)")
    p.add_argument("--bit-exact", action="store_true",
                   help="force deterministic single-order reductions")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("count-params", help="parameter count and breakdown")
    c.add_argument("variant", choices=["v1", "v2", "dncnn_ref"])
    c.add_argument("--expect", type=int, default=None,
                   help="fail (exit 5) if total deviates more than 1%%")
    c.set_defaults(fn=cmd_count_params)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("data_dir")
    t.add_argument("out", help="output checkpoint path")
    t.add_argument("--stage", type=int, choices=[1, 2], default=1)
    t.add_argument("--resume", default=None, help="stage-1 checkpoint to refine")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--variant", choices=["v1", "v2"], default=None)
    t.add_argument("--tiny", action="store_true", help="pairs=2 desk-scale model")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--sigma", type=float, default=None)
    t.add_argument("--noise-seed", type=int, default=0)
    t.add_argument("--patch-size", type=int, default=40)
    t.add_argument("--stride", type=int, default=10)
    t.add_argument("--patches", type=int, default=None, help="cap patch count")
    t.add_argument("--augment", choices=["none", "flips+rot90"], default="none")
    t.add_argument("--log", default=None, help="write the per-step loss log here")
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("denoise", help="denoise one PGM image")
    d.add_argument("checkpoint")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--sigma", type=float, default=None,
                   help="corrupt the input with seeded AWGN first")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--emit-diff", default=None, help="difference-image PGM path")
    d.add_argument("--diff-gain", type=float, default=4.0)
    d.set_defaults(fn=cmd_denoise)

    e = sub.add_parser("eval", help="evaluate a checkpoint over a directory")
    e.add_argument("checkpoint")
    e.add_argument("dataset_dir")
    e.add_argument("--sigma", type=float, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selftest", help="run the embedded verification battery")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
