"""Command-line interface: gen-data, train, eval, infer, inspect, selftest.

Exit codes: 0 success, 1 invariant/selftest failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("convcaps3d")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("size needs one or three extents")
    return vals


def _load_manifest(path):
    path = Path(path)
    manifest = json.loads(path.read_text())
    from .pipeline import read_labels, read_volume

    cases = []
    for entry in manifest["cases"]:
        img, meta = read_volume(path.parent / entry["image"])
        lab, _ = read_labels(path.parent / entry["labels"])
        cases.append((entry, img, lab, tuple(meta["spacing"])))
    return manifest, cases


def cmd_gen_data(args) -> int:
    from .pipeline import PhantomSpec, generate_phantom, write_labels, write_volume

    if any(n % 8 for n in args.size):
        raise UsageError(f"extents {args.size} must be divisible by 8")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(args.count):
        seed = args.seed + i
        spec = PhantomSpec(tuple(args.size), args.classes, args.modalities, args.noise, seed)
        img, lab = generate_phantom(spec)
        name = f"case_{i:03d}"
        write_volume(out / f"{name}_image.vol", img)
        write_labels(out / f"{name}_labels.vol", lab)
        cases.append({"name": name, "image": f"{name}_image.vol",
                      "labels": f"{name}_labels.vol", "seed": seed})
    manifest = {"classes": args.classes, "modalities": args.modalities,
                "size": list(args.size), "noise": args.noise, "cases": cases}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(cases)} phantom(s) to {out}")
    return EXIT_OK


def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key, value in args.overrides:
        cfg.set(key, value)
    if getattr(args, "arch", None):
        cfg.set("architecture", "conv_baseline" if args.arch == "baseline" else args.arch)
    return cfg


def cmd_train(args) -> int:
    from .model import build
    from .pipeline import fit
    from .plotting import plot_training

    run = _run_config(args)
    sys.stdout.write(run.to_text())
    model_cfg, train_cfg = run.model_config(), run.train_config()
    manifest_path = Path(run["data"])
    if not manifest_path.exists():
        raise FileNotFoundError(f"data manifest {manifest_path} not found")
    manifest, cases = _load_manifest(manifest_path)
    if manifest["classes"] != model_cfg.classes or manifest["modalities"] != model_cfg.in_channels:
        raise UsageError("model classes/in_channels do not match the data manifest")
    data = [(img, lab) for _, img, lab, _ in cases]
    train_set = data[:-1] or data
    val_set = data[-1:]
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    net = build(model_cfg, run["architecture"], seed=train_cfg.seed)
    result = fit(net, train_set, val_set, train_cfg, log_path=out / "train_log.csv",
                 checkpoint_path=out / "checkpoint.ckpt")
    plot_training(result.history, out / "train_log.png", title=net.architecture)
    print(f"trained {result.iterations} iterations, best val DSC {result.best_dsc:.4f}; "
          f"checkpoint {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate, merge_reports
    from .model import load_checkpoint
    from .pipeline import sliding_window_infer
    from .plotting import plot_metrics

    manifest, cases = _load_manifest(args.data)
    classes = manifest["classes"]
    net = None
    if not args.oracle:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --oracle is given")
        net = load_checkpoint(args.checkpoint)
        if net.config.classes != classes:
            raise UsageError(f"checkpoint has {net.config.classes} classes, data has {classes}")
    reports = []
    for entry, img, lab, spacing in cases:
        pred = lab if args.oracle else sliding_window_infer(net, img, args.patch, args.overlap)
        reports.append(evaluate(lab, pred, range(1, classes), spacing))
    report = merge_reports(reports).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        plot_metrics(report, out.with_suffix(".png"))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import load_checkpoint
    from .pipeline import read_volume, sliding_window_infer, write_labels
    from .plotting import plot_slices

    net = load_checkpoint(args.checkpoint)
    img, meta = read_volume(args.input)
    if img.shape[-1] != net.config.in_channels:
        raise UsageError(f"image has {img.shape[-1]} channels, model expects "
                         f"{net.config.in_channels}")
    labels = sliding_window_infer(net, img, args.patch, args.overlap)
    write_labels(args.out, labels, meta["spacing"])
    plot_slices(img, labels, Path(args.out).with_suffix(".png"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .model import build, count_params, layer_table, load_checkpoint

    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        run = _run_config(args)
        net = build(run.model_config(), run["architecture"])
    spatial = tuple(args.size)
    print(f"architecture: {net.architecture}")
    print(f"{'layer':<14} {'output shape':<24} {'params':>10}")
    for name, shape, n in layer_table(net, spatial):
        print(f"{name:<14} {'x'.join(map(str, shape)):<24} {n:>10,}")
    print(f"{'total':<14} {'':<24} {count_params(net):>10,}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    results = selftest.run(args.sabotage)
    for name, ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({msg})" if msg else ""))
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"selftest failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"selftest passed: {len(results)} checks")
    return EXIT_OK


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for token in it:
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"missing value for {token}")
        pairs.append((key, value))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convcaps3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantoms and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--size", type=_size, default=(64, 64, 64))
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--modalities", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network; extra --key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--arch", choices=("convcaps", "baseline", "conv_baseline"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class DSC/ASD/precision/recall as JSON")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--patch", type=_size, default=(32, 32, 32))
    e.add_argument("--overlap", type=float, default=0.5)
    e.add_argument("--out", help="also write the report (and a .png figure) here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="sliding-window segmentation of one volume")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--patch", type=_size, default=(32, 32, 32))
    i.add_argument("--overlap", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    n = sub.add_parser("inspect", help="per-layer shapes and parameter counts")
    src = n.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    n.add_argument("--arch", choices=("convcaps", "baseline", "conv_baseline"))
    n.add_argument("--size", type=_size, default=(32, 32, 32))
    n.set_defaults(func=cmd_inspect)

    s = sub.add_parser("selftest", help="run gradient, routing, loss and metric checks")
    s.add_argument("--sabotage", choices=("squash",))
    s.set_defaults(func=cmd_selftest)
    return p


def _limit_threads():
    value = os.environ.get("CAPS_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    from .config import ConfigError
    from .model import CheckpointError
    from .pipeline import TrainingError

    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        if extra and args.command not in ("train", "inspect"):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = _overrides(extra)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
