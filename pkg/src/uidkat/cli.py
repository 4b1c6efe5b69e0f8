"""Command-line surface: training, inference, evaluation, audit, gradient
checks, synthetic haze generation, and runtime benchmarks."""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time

import numpy as np

from . import __version__
from .audit import REFERENCE_BUDGETS, audit_model
from .gradcheck import run_suite
from .metrics import eval_folder
from .networks import VARIANT_PRESETS, build_variant
from .training import (TrainConfig, Trainer, UnpairedDataset, substream,
                       synthesize_haze)

USAGE_ERROR = 1
RUNTIME_ERROR = 2

DEFAULT_SIZE_CAP = 4096


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def parse_config_file(path):
    """Flat key=value text; blank lines and '#' comments ignored."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _build_train_config(args):
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    overrides = {
        "variant": args.variant, "epochs": args.epochs,
        "decay_start_epoch": args.decay_start, "lr": args.lr,
        "batch_size": args.batch_size, "image_size": args.image_size,
        "seed": args.seed, "tau": args.tau, "locations": args.locations,
        "hazy_dir": args.hazy, "clean_dir": args.clean, "out_dir": args.out,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = _build_train_config(args)
    if not cfg.hazy_dir or not cfg.clean_dir:
        print("error: --hazy and --clean are required", file=sys.stderr)
        return USAGE_ERROR
    dataset = UnpairedDataset.from_folders(cfg.hazy_dir, cfg.clean_dir,
                                           cfg.image_size)
    os.makedirs(cfg.out_dir, exist_ok=True)
    trainer = Trainer(cfg)
    trainer.fit(dataset,
                log_path=os.path.join(cfg.out_dir, "train_log.csv"),
                checkpoint_dir=os.path.join(cfg.out_dir, "checkpoint"))
    print(f"finished {trainer.step} steps; checkpoint in {cfg.out_dir}")
    return 0


def _pad_to_multiple(img, mult=16):
    _, _, h, w = img.shape
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, h, w


def restore_image(gen, arr01):
    """Dehaze one HWC [0,1] image of arbitrary size; returns HWC [0,1]."""
    x = (arr01.astype(np.float32).transpose(2, 0, 1) * 2.0 - 1.0)[None]
    x, h, w = _pad_to_multiple(x)
    y, _, _ = gen.forward(x)
    y = y[0, :, :h, :w].transpose(1, 2, 0)
    return (y + 1.0) / 2.0


def cmd_infer(args):
    from PIL import Image

    trainer = Trainer.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    inputs = []
    for path in args.input:
        if os.path.isdir(path):
            inputs.extend(sorted(
                os.path.join(path, n) for n in os.listdir(path)
                if n.lower().endswith((".png", ".jpg", ".jpeg"))))
        else:
            inputs.append(path)
    if not inputs:
        print("error: no input images", file=sys.stderr)
        return USAGE_ERROR
    for path in inputs:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if max(im.size) > args.max_size:
                raise ValueError(
                    f"{path}: {im.size} exceeds the {args.max_size} px cap")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        out01 = restore_image(trainer.gen, arr)
        data = np.rint(np.clip(out01, 0.0, 1.0) * 255.0).astype(np.uint8)
        base = os.path.splitext(os.path.basename(path))[0] + ".png"
        Image.fromarray(data).save(os.path.join(args.out, base))
        print(f"{path} -> {os.path.join(args.out, base)}")
    return 0


def cmd_eval(args):
    rows, (mp, ms) = eval_folder(args.pred, args.gt, csv_path=args.csv)
    for name, p, s in rows:
        print(f"{name},{p:.6f},{s:.6f}")
    print(f"mean,{mp:.6f},{ms:.6f}")
    return 0


def cmd_audit(args):
    report = audit_model(args.variant, input_size=args.input_size)
    print(report.to_json() if args.json else report.to_text())
    return 0


def cmd_gradcheck(args):
    failed = False
    for name, rep in run_suite(args.seed):
        status = "pass" if rep.passed else "FAIL"
        print(f"{name:<18} {status}  max_rel={rep.max_rel_error:.3e}"
              f"  tol={rep.tolerance:.0e}")
        if not rep.passed:
            failed = True
            print("  " + rep.failure_message())
    return RUNTIME_ERROR if failed else 0


def cmd_synth_haze(args):
    from PIL import Image

    rng = substream(args.seed, "synth-haze")
    os.makedirs(args.out, exist_ok=True)
    names = sorted(n for n in os.listdir(args.clean)
                   if n.lower().endswith((".png", ".jpg", ".jpeg")))
    if not names:
        print(f"error: no images in {args.clean}", file=sys.stderr)
        return USAGE_ERROR
    for name in names:
        with Image.open(os.path.join(args.clean, name)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        hazy = synthesize_haze(arr, rng)
        data = np.rint(np.clip(hazy, 0.0, 1.0) * 255.0).astype(np.uint8)
        base = os.path.splitext(name)[0] + ".png"
        Image.fromarray(data).save(os.path.join(args.out, base))
    print(f"wrote {len(names)} hazy images to {args.out}")
    return 0


def cmd_bench(args):
    if args.checkpoint:
        gen = Trainer.load_checkpoint(args.checkpoint).gen
    else:
        gen, _, _ = build_variant(args.variant, np.random.default_rng(0))
    x = np.zeros((1, 3, args.input_size, args.input_size), dtype=np.float32)
    for _ in range(max(args.warmup, 3)):
        gen.forward(x)
    samples = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        gen.forward(x)
        samples.append(time.perf_counter() - t0)
    print(f"variant={gen.cfg.variant} size={args.input_size}"
          f" repeats={args.repeats}")
    print(f"mean   {statistics.mean(samples) * 1e3:.1f} ms")
    print(f"median {statistics.median(samples) * 1e3:.1f} ms")
    print(f"min    {min(samples) * 1e3:.1f} ms")
    threads = os.environ.get("OMP_NUM_THREADS", "default")
    print(f"env: numpy {np.__version__}, python {sys.version.split()[0]},"
          f" OMP_NUM_THREADS={threads}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="uidkat",
                     description="Unpaired image dehazing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="run the unpaired training loop")
    p.add_argument("--hazy", help="hazy-domain image folder")
    p.add_argument("--clean", help="clean-domain image folder")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--variant", choices=sorted(VARIANT_PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-start", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--locations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dehaze images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True,
                   help="image files or folders")
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=DEFAULT_SIZE_CAP)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over matching folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", help="also write the metric CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter/MAC audit for a variant")
    p.add_argument("--variant", default="S", choices=sorted(REFERENCE_BUDGETS))
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-haze", help="make hazy copies of clean images")
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_haze)

    p = sub.add_parser("bench", help="forward-pass wall-clock benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", default="T", choices=sorted(VARIANT_PRESETS))
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code or 0
    if not getattr(args, "func", None):
        parser.print_help()
        return USAGE_ERROR
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return RUNTIME_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
