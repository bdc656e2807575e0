"""Command-line entry points: catalog, audit, attack, pretrain."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import catalog, dataio, harness, metrics, pretrain as pretrain_mod
from .errors import GradleakError
from .network import init_weights


def _cmd_catalog(args):
    for name, spec in catalog.catalog().items():
        convs = ", ".join(
            f"({l.kernel_width},{l.out_channels},{l.stride},{l.padding})"
            for l in spec.layers if l.kind == "conv")
        fc = spec.layers[-1]
        print(f"{name}: conv {convs}; fc {fc.in_channels}->{fc.out_channels}")
    return 0


def _cmd_audit(args):
    spec = catalog.get(args.architecture)
    weights = init_weights(spec, seed=args.seed)
    if args.dataset is not None:
        record = dataio.load_cifar10_batch(
            harness.resolve_dataset(args.dataset), args.image)
        probe, label = record.flat(), record.label
    else:
        rng = np.random.default_rng(args.seed)
        probe = rng.uniform(0.0, 1.0, int(np.prod(spec.input_shape)))
        label = 0
    audit = metrics.security_metric(spec, weights, probe, label,
                                    seed=args.seed)
    payload = {
        "architecture": args.architecture,
        "rank_deficiencies": audit.deficiencies,
        "c_exact": audit.c_exact,
        "c_rounded": audit.c_rounded,
        "c_truncated": audit.c_truncated,
        "seed": args.seed,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    return 0


def _cmd_attack(args):
    config = harness.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.methods:
        config.methods = tuple(args.methods)
    rows, _, had_error = harness.run_experiment(config, args.out)
    for row in rows:
        status = row.get("status", "ok")
        extra = row.get("error", "") if status != "ok" else \
            f"mse={row.get('mse')} psnr={row.get('psnr_db')} dB"
        print(f"{row['architecture']} {row['method']} img{row['image_index']}: "
              f"{status} {extra}")
    return 1 if had_error else 0


def _cmd_pretrain(args):
    spec = catalog.get(args.architecture)
    records = dataio.load_cifar10_all(harness.resolve_dataset(args.dataset))
    if args.max_images:
        records = records[:args.max_images]
    weights, curves = pretrain_mod.pretrain(
        spec, records, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.learning_rate, classes=tuple(args.classes), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "weights.npz",
             **{f"w{i}": lw.weight for i, lw in enumerate(weights.layers)},
             **{f"b{i}": lw.bias for i, lw in enumerate(weights.layers)
                if lw.bias is not None})
    with open(out / "curves.json", "w") as fh:
        json.dump({"train_loss": curves.train_loss,
                   "test_loss": curves.test_loss}, fh, indent=2)
    print(f"trained {args.epochs} epochs; final train loss "
          f"{curves.train_loss[-1]:.4f}" if curves.train_loss else "0 epochs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradleak",
        description="Gradient-leakage reconstruction attacks and "
                    "architecture security audits for shallow CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("catalog", help="list the benchmark architectures")

    p = sub.add_parser("audit", help="rank-deficiency security audit")
    p.add_argument("architecture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="CIFAR-10 binary batch for the probe image")
    p.add_argument("--image", type=int, default=0)
    p.add_argument("--out", help="write the audit JSON here too")

    p = sub.add_parser("attack", help="run a configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--methods", nargs="*", help="filter methods")

    p = sub.add_parser("pretrain", help="pre-train a catalog model")
    p.add_argument("architecture")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--classes", nargs="*", default=list(pretrain_mod.DEFAULT_CLASSES))
    p.add_argument("--max-images", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="pretrained")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"catalog": _cmd_catalog, "audit": _cmd_audit,
               "attack": _cmd_attack, "pretrain": _cmd_pretrain}[args.command]
    try:
        return handler(args)
    except GradleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
