"""Command-line entry point: ``ndsnn <subcommand> ...``.

On failure every subcommand prints one JSON line
``{"error": <kind>, "message": <text>}`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .errors import ConfigError, NdsnnError
from .gradcheck import REL_TOL, run_gradcheck
from .sparse import FootprintParams, memory_footprint_bits, memory_footprint_bits_exact, read_csr
from .trainer import (
    build_network,
    evaluate,
    load_checkpoint,
    load_dataset,
    relative_training_cost,
    save_checkpoint,
    train,
    write_outputs,
)


def _load_config(args) -> config_mod.RunConfig:
    raw = config_mod.apply_overrides(config_mod.load_raw(args.config), list(args.set or []))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    if getattr(args, "policy", None) is not None:
        raw.setdefault("sparsity", {})["policy"] = args.policy
    if getattr(args, "epochs", None) is not None:
        raw.setdefault("optimizer", {})["epochs"] = args.epochs
    return config_mod.from_dict(raw)


def _read_rates(path) -> list[float]:
    with open(path, newline="") as f:
        return [float(row["spike_rate"]) for row in csv.DictReader(f)]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    reference = _read_rates(args.reference) if args.reference else None
    result = train(cfg, reference_rates=reference)
    out = write_outputs(result, cfg, cfg.out)
    final = result.history[-1] if result.history else None
    if final:
        print(f"val_acc={final.val_acc!r} sparsity={final.sparsity!r} rel_cost={final.rel_cost!r}")
    print(f"outputs written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    _, val = load_dataset(cfg)
    acc = evaluate(net, val, cfg.data.encoding)
    print(f"accuracy={acc!r} samples={len(val)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.networks, args.seed, args.max_params)
    worst = max(r.max_rel_error for r in results)
    ok = worst <= REL_TOL
    print(f"networks={len(results)} max_rel_error={worst:.3e} tolerance={REL_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_export_csr(args) -> int:
    if args.inspect:
        m = read_csr(args.inspect)
        print(json.dumps({"rows": m.rows, "cols": m.cols, "nnz": m.nnz}))
        return 0
    if not args.config:
        raise ConfigError("export-csr needs --config or --inspect")
    cfg = _load_config(args)
    train_ds, _ = load_dataset(cfg)
    iters = -(-len(train_ds) // cfg.optimizer.batch_size) * cfg.optimizer.epochs
    net, _, _ = build_network(cfg, train_ds.image_shape, train_ds.class_count, iters)
    path = save_checkpoint(net, Path(cfg.out) / "checkpoint")
    print(f"wrote {len(net.layers)} CSR layers, manifest {path}")
    return 0


def _fmt_bits(x: float) -> str:
    return str(int(round(x))) if abs(x - round(x)) < 1e-6 * max(1.0, abs(x)) else repr(x)


def cmd_estimate_memory(args) -> int:
    p = FootprintParams(args.n, args.sparsity, args.t, args.bw, args.bidx)
    print(f"{_fmt_bits(memory_footprint_bits(p))} bits")
    if args.filters:
        filters = [int(f) for f in args.filters.split(",")]
        print(f"exact: {_fmt_bits(memory_footprint_bits_exact(p, filters))} bits")
    return 0


def cmd_estimate_cost(args) -> int:
    if args.metrics:
        if not args.reference:
            raise ConfigError("--metrics needs --reference (the dense run's metrics.csv)")
        dense = _read_rates(args.reference)
        with open(args.metrics, newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) > len(dense):
            raise ConfigError(f"{args.metrics} has {len(rows)} epochs but the reference only {len(dense)}")
        for row, rd in zip(rows, dense):
            cost = relative_training_cost(float(row["spike_rate"]), float(row["sparsity"]), rd)
            print(f"epoch={row['epoch']} rel_cost={cost!r}")
        return 0
    if args.rs is None or args.rd is None or args.sparsity is None:
        raise ConfigError("estimate-cost needs --rs, --rd and --sparsity (or --metrics/--reference)")
    print(repr(relative_training_cost(args.rs, args.sparsity, args.rd)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ndsnn", description="Dynamic sparse SNN training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, need_config=True):
        p.add_argument("--config", required=need_config, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. sparsity.theta_f=0.95")

    p = sub.add_parser("train", help="train a model")
    config_args(p)
    p.add_argument("--policy", choices=config_mod.POLICIES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--reference", help="dense run metrics.csv for the relative cost")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare BPTT against the forward-mode oracle")
    p.add_argument("--networks", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-params", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-csr", help="write the initial sparse model as CSR, or inspect a CSR file")
    config_args(p, need_config=False)
    p.add_argument("--inspect", metavar="FILE")
    p.set_defaults(func=cmd_export_csr)

    p = sub.add_parser("estimate-memory", help="training memory footprint in bits")
    p.add_argument("--n", type=int, required=True, help="total weights")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--t", type=int, default=5, help="timesteps")
    p.add_argument("--bw", type=int, default=32)
    p.add_argument("--bidx", type=int, default=32)
    p.add_argument("--filters", help="comma-separated F_l per layer for the exact form")
    p.set_defaults(func=cmd_estimate_memory)

    p = sub.add_parser("estimate-cost", help="training cost relative to a dense run")
    p.add_argument("--rs", type=float, help="sparse model spike rate")
    p.add_argument("--rd", type=float, help="dense model spike rate")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--metrics", help="sparse run metrics.csv")
    p.add_argument("--reference", help="dense run metrics.csv")
    p.set_defaults(func=cmd_estimate_cost)
    return parser


def _thread_limit():
    value = os.environ.get("NDSNN_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NdsnnError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
