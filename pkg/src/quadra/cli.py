"""``quadra`` command line: train / convert / profile / inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric
divergence, 3 I/O or integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autobuild, datasets, diagnostics, trainer
from .errors import (ConfigError, IngestError, InputError, IntegrityError,
                     NumericError, ParseError, QuadraError)
from .model import Model, load_checkpoint, save_checkpoint
from .tensor import Tensor

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _build_parser():
    p = _Parser(prog="quadra", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", default=None, help="output directory "
                   "(default $QUADRA_OUT or ./runs/<name>)")
    t.add_argument("--mode", choices=("auto", "hybrid"), default="hybrid")
    t.add_argument("--seed", type=int, default=None)

    c = sub.add_parser("convert", help="convert a first-order config")
    c.add_argument("config")
    c.add_argument("--family", required=True)
    c.add_argument("--reduce", action="store_true",
                   help="train, then greedily remove low-value layers")
    c.add_argument("--budget", type=float, default=0.01,
                   help="allowed accuracy drop for --reduce")
    c.add_argument("--data", default=None, help="dataset directory (--reduce)")
    c.add_argument("--out", default=None, help="output config path")

    f = sub.add_parser("profile", help="project cached-intermediate bytes")
    f.add_argument("config")
    f.add_argument("--batch", type=int, default=None)
    f.add_argument("--out", default=None, help="optional CSV path")

    i = sub.add_parser("inspect", help="attention maps and gradient stats "
                       "from a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--data", required=True)
    i.add_argument("--out", default=None)
    i.add_argument("--attention", type=int, default=0,
                   help="test-image index for the attention map")
    i.add_argument("--layer", type=int, default=0)
    return p


def _out_dir(arg, name):
    if arg:
        return arg
    env = os.environ.get("QUADRA_OUT")
    if env:
        return os.path.join(env, name)
    return os.path.join("runs", name)


def _load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    return autobuild.parse_config(text)


def _write_manifest(out_dir, cfg, seed, mode, data_files):
    manifest = {
        "version": VERSION,
        "config": autobuild.serialize_config(cfg),
        "seed": seed,
        "mode": mode,
        "dataset_checksums": data_files,
        "out_dir": os.path.abspath(out_dir),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return path


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    train_data, test_data = datasets.load_dataset(args.data, cfg.train.dataset)
    out_dir = _out_dir(args.out, cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    files = dict(train_data.files)
    files.update(test_data.files)
    _write_manifest(out_dir, cfg, cfg.train.seed, args.mode, files)

    result = trainer.train(cfg, train_data, test_data, mode=args.mode)
    trainer.metrics_to_csv(result.metrics, os.path.join(out_dir, "metrics.csv"))
    diagnostics.emit_csv(result.grad_stats,
                         os.path.join(out_dir, "gradient_stats.csv"))
    diagnostics.emit_stats_files(result.grad_stats, out_dir)
    save_checkpoint(result.model, os.path.join(out_dir, "model.qckpt"))
    if result.status == "diverged":
        print(f"diverged after {len(result.metrics)} epochs; "
              f"last-good checkpoint written to {out_dir}")
        return EXIT_DIVERGED
    last = result.metrics[-1]
    print(f"trained {cfg.name}: {len(result.metrics)} epochs, "
          f"train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f} "
          f"peak_cached_bytes={last.peak_cached_bytes}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_convert(args):
    cfg = _load_config(args.config)
    converted = autobuild.replace_layers(cfg, args.family)
    out_path = args.out or f"{converted.name}.cfg"
    if not args.reduce:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(autobuild.serialize_config(converted))
        print(f"wrote {out_path} ({len(converted.layers)} layers)")
        return EXIT_OK
    if not args.data:
        raise UsageError("--reduce requires --data")
    train_data, test_data = datasets.load_dataset(args.data,
                                                  converted.train.dataset)
    result = trainer.train(converted, train_data, test_data)
    if result.status != "ok":
        print("training diverged; not reducing")
        return EXIT_DIVERGED
    reduced_cfg, _, log, report = autobuild.reduce(
        result.model, train_data, test_data, acc_budget=args.budget)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(autobuild.serialize_config(reduced_cfg))
    base = os.path.splitext(out_path)[0]
    diagnostics.emit_csv(
        report, base + "_ri.csv",
        header=("layer_index", "layer", "p_mpar", "p_tlat", "delta_acc",
                "ri", "acc_ablated"))
    with open(base + "_removals.log", "w", encoding="utf-8") as f:
        for step in log:
            f.write(f"removed layer {step.layer_index} ({step.layer}) "
                    f"ri={step.ri:.6g} accuracy_after={step.accuracy_after:.4f}\n")
    print(f"wrote {out_path}: {len(cfg.layers)} -> {len(reduced_cfg.layers)} "
          f"layers, {len(log)} removal(s)")
    return EXIT_OK


def cmd_profile(args):
    cfg = _load_config(args.config)
    ledger = trainer.profile_memory(cfg, batch=args.batch)
    batch = args.batch or cfg.train.batch
    print(f"model {cfg.name} batch {batch}")
    print(f"{'layer':<8}{'auto_bytes':>14}{'hybrid_bytes':>14}")
    for tag in ledger.per_layer_auto:
        print(f"{tag:<8}{ledger.per_layer_auto[tag]:>14}"
              f"{ledger.per_layer_hybrid.get(tag, 0):>14}")
    print(f"{'peak':<8}{ledger.peak_auto:>14}{ledger.peak_hybrid:>14}")
    print(f"hybrid saving: {ledger.saving_fraction * 100:.1f}%")
    if args.out:
        rows = [(tag, ledger.per_layer_auto[tag],
                 ledger.per_layer_hybrid.get(tag, 0))
                for tag in ledger.per_layer_auto]
        rows.append(("peak", ledger.peak_auto, ledger.peak_hybrid))
        diagnostics.emit_csv(rows, args.out,
                             header=("layer", "auto_bytes", "hybrid_bytes"))
    return EXIT_OK


def cmd_inspect(args):
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    train_data, test_data = datasets.load_dataset(args.data, cfg.train.dataset)
    out_dir = _out_dir(args.out, cfg.name + "-inspect")
    os.makedirs(out_dir, exist_ok=True)
    if args.attention < 0 or args.attention >= test_data.images.shape[0]:
        raise InputError(f"image index {args.attention} out of range")
    image = test_data.images[args.attention]
    amap = diagnostics.activation_attention(model, image, args.layer)
    amap.image_id = args.attention
    pgm = diagnostics.attn_path(out_dir, args.attention, args.layer)
    diagnostics.emit_pgm(amap, pgm)

    # gradient stats from one backward pass over the first training batch
    n = min(cfg.train.batch, train_data.images.shape[0])
    x = Tensor._wrap(train_data.images[:n])
    _, grads, _ = trainer.hybrid_backward(model, x, train_data.labels[:n])
    id_to_key = {p.id: (tag, role) for tag, role, p in model.param_items()}
    named = {id_to_key[i]: g.data for i, g in grads.items() if i in id_to_key}
    rows = diagnostics.collect_gradient_stats(named, epoch=0)
    paths = diagnostics.emit_stats_files(rows, out_dir)
    print(f"wrote {pgm} and {len(paths)} stats files to {out_dir}")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "convert":
            return cmd_convert(args)
        if args.command == "profile":
            return cmd_profile(args)
        return cmd_inspect(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ConfigError, InputError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IngestError, IntegrityError, OSError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except QuadraError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
