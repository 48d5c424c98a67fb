"""Command-line entry points: train, eval, bench, inspect-table, make-data, experiment.

Every command that produces files also writes a JSON manifest holding all
effective settings; passing that manifest back through ``--config`` reruns
the command with the same settings.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import model_io
from .bench import DEFAULT_REPEATS, first_layer_methods, model_methods, run_bench, set_threads
from .data import DatasetError, prepare, synthetic, write_cifar_binary
from .embedding import merge_table
from .network import PRESETS, build_model
from .quant import QuantConfig
from .trainer import TrainConfig, TrainingDivergedError, evaluate, run_experiment, train

log = logging.getLogger("pixemb")

TRAIN_DEFAULTS = {
    "preset": None, "data": None, "out": None, "seed": 0, "steps": None, "epochs": 3.0,
    "d": 8, "bits": 2, "batch_size": 64, "lr": 0.1, "eval_every": 10, "augment": True,
    "float_head": False, "train_per_class": None, "eval_per_class": None, "threads": None,
}
EXPERIMENT_DEFAULTS = {
    **TRAIN_DEFAULTS, "presets": list(PRESETS), "seeds": [0, 1, 2],
}


class CommandError(Exception):
    """A user-facing failure: printed without a traceback, exit status 1."""


def resolve_threads(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("PIXEMB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CommandError(f"PIXEMB_THREADS must be an integer, got {env!r}") from None
    return None


def _merged_settings(args: argparse.Namespace, defaults: dict, parser) -> dict:
    """Defaults, then the --config file, then flags given on the command line."""
    settings = dict(defaults)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise CommandError(f"cannot read config {args.config}: {e}") from e
        cfg = cfg.get("settings", cfg)
        unknown = set(cfg) - set(defaults)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _train_config(s: dict, n_train: int) -> TrainConfig:
    common = dict(base_lr=s["lr"], seed=s["seed"], eval_every=s["eval_every"], augment=s["augment"])
    if s["steps"] is None:
        return TrainConfig.desk(n_train, epochs=s["epochs"], batch_size=s["batch_size"], **common)
    steps = s["steps"]
    bounds = tuple(b for b in (steps // 2, (3 * steps) // 4) if 0 < b < steps)
    bounds = tuple(sorted(set(bounds)))
    return TrainConfig(batch_size=s["batch_size"], total_steps=steps, lr_decay_steps=bounds, **common)


def _load_sets(s: dict):
    try:
        return prepare(s["data"], s["train_per_class"], s["eval_per_class"])
    except (DatasetError, OSError) as e:
        raise CommandError(str(e)) from e


def _write_manifest(path: Path, command: str, settings: dict, extra: dict | None = None) -> None:
    body = {"command": command, "settings": settings}
    if extra:
        body.update(extra)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _require(settings: dict, parser, *keys: str) -> None:
    for k in keys:
        if settings.get(k) is None:
            parser.error(f"--{k.replace('_', '-')} is required")


# ---------------------------------------------------------------- commands

def cmd_train(args, parser) -> int:
    s = _merged_settings(args, TRAIN_DEFAULTS, parser)
    _require(s, parser, "preset", "data", "out")
    if s["preset"] not in PRESETS:
        parser.error(f"invalid preset {s['preset']!r}; choose from {', '.join(PRESETS)}")
    s["threads"] = resolve_threads(s["threads"])
    set_threads(s["threads"])
    train_set, eval_set = _load_sets(s)
    cfg = _train_config(s, len(train_set))
    model = build_model(s["preset"], d=s["d"], num_classes=train_set.num_classes,
                        float_head=s["float_head"], seed=s["seed"],
                        quant=QuantConfig(activation_bits=s["bits"]))
    try:
        model, metrics = train(model, train_set, cfg, eval_set)
    except TrainingDivergedError as e:
        raise CommandError(f"training diverged: {e}") from e

    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.to_csv())
    ckpt = model_io.save(model, "train")
    (out / "checkpoint.pxeb").write_bytes(ckpt)
    bundle = model_io.save(model, "infer")
    (out / "bundle.pxeb").write_bytes(bundle)
    _write_manifest(out / "manifest.json", "train", s, {
        "train_config": cfg.to_dict(),
        "n_train": len(train_set), "n_eval": len(eval_set),
        "files": {"checkpoint": "checkpoint.pxeb", "bundle": "bundle.pxeb", "metrics": "metrics.csv"},
        "sizes": {"checkpoint": len(ckpt), "bundle": len(bundle), **model_io.size_report(model)},
    })
    last = metrics.records[-1]
    print(f"{s['preset']}: {cfg.total_steps} steps, final loss {last.loss:.4f}, top1 {last.top1:.4f}")
    print(f"wrote {out / 'checkpoint.pxeb'}, {out / 'bundle.pxeb'}, {out / 'metrics.csv'}")
    return 0


def _load_checkpoint(path):
    try:
        return model_io.load_file(path)
    except OSError as e:
        raise CommandError(f"cannot read checkpoint: {e}") from e
    except model_io.CheckpointError as e:
        raise CommandError(f"{path}: {e}") from e


def cmd_eval(args, parser) -> int:
    set_threads(resolve_threads(args.threads))
    model = _load_checkpoint(args.checkpoint)
    _, eval_set = _load_sets({"data": args.data, "train_per_class": None,
                              "eval_per_class": args.eval_per_class})
    path = f"infer-{args.path}"
    if path == "infer-packed" and model.layer("conv") is not None:
        raise CommandError(f"{model.preset} has a float first layer; use --path float")
    acc = evaluate(model, eval_set, path)
    top5 = "" if acc["top5"] is None else f"{acc['top5']:.6f}"
    print(f"preset={model.preset} path={args.path} top1={acc['top1']:.6f}"
          + (f" top5={top5}" if top5 else ""))
    if args.out:
        out = Path(args.out)
        new = not out.exists() or out.stat().st_size == 0
        with out.open("a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["preset", "path", "top1", "top5"])
            w.writerow([model.preset, args.path, f"{acc['top1']:.6f}", top5])
        _write_manifest(Path(f"{out}.manifest.json"), "eval", {
            "checkpoint": str(args.checkpoint), "data": args.data, "path": args.path,
            "eval_per_class": args.eval_per_class, "n_eval": len(eval_set)})
    return 0


def cmd_bench(args, parser) -> int:
    threads = resolve_threads(args.threads)
    if args.first_layer or not args.checkpoint:
        methods = first_layer_methods(d=args.d, batch=args.batch, seed=args.seed)
    else:
        data, _ = _load_sets({"data": args.image, "train_per_class": None, "eval_per_class": None})
        images = data.images[:args.batch]  # decoded and sized before timing starts
        models = {}
        for i, path in enumerate(args.checkpoint):
            m = _load_checkpoint(path)
            kind = "packed" if m.layer("conv") is None else "float"
            models[f"{i}:{m.preset}:{kind}"] = m
        methods = model_methods(models, images)
    report = run_bench(methods, repeats=args.repeats, threads=threads)
    text = report.to_csv()
    sys.stdout.write(text)
    print(f"# threads={report.threads} machine={report.machine}")
    if args.out:
        Path(args.out).write_text(text)
        _write_manifest(Path(f"{args.out}.manifest.json"), "bench", {
            "checkpoint": args.checkpoint, "image": args.image, "repeats": args.repeats,
            "batch": args.batch, "first_layer": bool(args.first_layer or not args.checkpoint),
            "d": args.d, "seed": args.seed, "threads": threads,
        }, {"environment": report.environment()})
    return 0


def cmd_inspect_table(args, parser) -> int:
    model = _load_checkpoint(args.checkpoint)
    merged = model.frozen.get("embed.merged")
    if merged is None:
        table = model.table()
        if table is None:
            raise CommandError(f"{args.checkpoint}: {model.preset} checkpoint has no embedding table")
        merged = merge_table(table)
    lines = [(f"{p:3d} " if args.index else "") + merged.code_string(p) for p in range(256)]
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_make_data(args, parser) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cifar_binary(synthetic(args.n, args.classes, args.seed), out / "data_batch_1.bin")
    write_cifar_binary(synthetic(args.n_test, args.classes, args.seed + 1), out / "test_batch.bin")
    print(f"wrote {args.n} train / {args.n_test} test images to {out}")
    return 0


def cmd_experiment(args, parser) -> int:
    s = _merged_settings(args, EXPERIMENT_DEFAULTS, parser)
    _require(s, parser, "data", "out")
    bad = [p for p in s["presets"] if p not in PRESETS]
    if bad:
        parser.error(f"invalid preset(s) {', '.join(bad)}; choose from {', '.join(PRESETS)}")
    s["threads"] = resolve_threads(s["threads"])
    set_threads(s["threads"])
    train_set, eval_set = _load_sets(s)
    cfg = _train_config(s, len(train_set))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        (out / f"metrics_{r.preset}_seed{r.seed}.csv").write_text(r.metrics.to_csv())
        packed = "" if r.packed_top1 is None else f" packed {r.packed_top1:.4f}"
        print(f"{r.preset} seed {r.seed}: top1 {r.top1:.4f}{packed} roughness {r.roughness:.4f}",
              flush=True)

    try:
        results = run_experiment(s["presets"], s["seeds"], train_set, eval_set, cfg, d=s["d"],
                                 progress=progress)
    except TrainingDivergedError as e:
        raise CommandError(f"training diverged: {e}") from e
    except ValueError as e:
        raise CommandError(str(e)) from e
    with (out / "summary.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["preset", "seed", "top1", "top5", "packed_top1", "roughness"])
        for r in results:
            w.writerow([r.preset, r.seed, repr(r.top1), "" if r.top5 is None else repr(r.top5),
                        "" if r.packed_top1 is None else repr(r.packed_top1), repr(r.roughness)])
    print("preset         mean top1  mean roughness")
    for p in s["presets"]:
        rs = [r for r in results if r.preset == p]
        print(f"{p:14s} {np.mean([r.top1 for r in rs]):.4f}     {np.mean([r.roughness for r in rs]):.4f}")
    _write_manifest(out / "manifest.json", "experiment", s, {
        "train_config": cfg.to_dict(), "n_train": len(train_set), "n_eval": len(eval_set)})
    return 0


# ---------------------------------------------------------------- parser

def _train_flags(p: argparse.ArgumentParser, experiment: bool = False) -> None:
    if experiment:
        p.add_argument("--presets", nargs="+", choices=PRESETS, default=None)
        p.add_argument("--seeds", nargs="+", type=int, default=None)
    else:
        p.add_argument("--preset", choices=PRESETS, default=None)
        p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None,
                   help="CIFAR binary directory/file, or synthetic[:N[:classes[:seed]]]")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="total SGD steps (default: --epochs worth)")
    p.add_argument("--epochs", type=float, default=None)
    p.add_argument("--d", type=int, default=None, help="embedding dimension")
    p.add_argument("--bits", type=int, default=None, help="activation bits Q")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None)
    p.add_argument("--float-head", action="store_const", const=True, default=None)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--eval-per-class", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON settings or a previous run's manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixemb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one preset, write checkpoint + metrics")
    _train_flags(p)
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("experiment", help="train several presets over several seeds")
    _train_flags(p, experiment=True)
    p.set_defaults(func=cmd_experiment, subparser=p)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--path", choices=("float", "packed"), default="float")
    p.add_argument("--eval-per-class", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV file to append a result row to")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("bench", help="time inference, methods alternated round-robin")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--image", default="synthetic:16", help="data spec supplying the input images")
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--first-layer", action="store_true",
                   help="first-layer microbenchmark (default without checkpoints)")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_bench, subparser=p)

    p = sub.add_parser("inspect-table", help="print each pixel value's embedding code")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", action="store_true", help="prefix each line with the pixel value")
    p.set_defaults(func=cmd_inspect_table, subparser=p)

    p = sub.add_parser("make-data", help="write a synthetic set in CIFAR-10 binary format")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args, args.subparser)
    except CommandError as e:
        print(f"pixemb {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
