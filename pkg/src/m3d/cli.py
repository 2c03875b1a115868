"""``m3d`` command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .graph import GraphFormatError, SbmConfig, generate_hierarchical_sbm, load_graph, save_graph
from .harness import (
    TrainConfig,
    benchmark_schemes,
    ensemble_study,
    evaluate,
    gate_profile,
    load_model,
    parse_degree_bins,
    train,
    write_tsv,
)
from .masks import build_designed_masks, build_mask, export_mask, extend_universe, mask_stats
from .model import ModelConfig
from .partition import load_partition, partition_graph, partition_metrics, save_partition
from .tensor import PreconditionError
from .theory import (
    SCAN_AXES,
    ScenarioError,
    c4_c3_support_check,
    exact_probability,
    make_scenario,
    mc_probability,
    monotonicity_scan,
    probability_bounds,
)

SUBCOMMANDS = ("gen-sbm", "partition", "masks", "train", "eval", "ensemble", "theory", "gate-profile", "bench")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Config and manifest helpers


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Model config from ``--config``; an optional ``"train"`` key holds the train config."""
    raw = _read_json(args.config) if getattr(args, "config", None) else {}
    train_raw = raw.pop("train", {})
    if getattr(args, "train_config", None):
        train_raw = {**train_raw, **_read_json(args.train_config)}
    model_cfg = ModelConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_raw = {**train_raw, "seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        train_raw = {**train_raw, "epochs": args.epochs}
    return model_cfg.validate(), TrainConfig.from_dict(train_raw)


def _write_manifest(directory, args, **extra) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "versions": {
            "m3d": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "threads": args.threads,
        **extra,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _emit(rows, header, out):
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_tsv(out, header, rows)
    else:
        sys.stdout.write("\t".join(header) + "\n")
        for row in rows:
            sys.stdout.write("\t".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")


def _instance(args, g, n_clusters, seed):
    if getattr(args, "partition", None):
        part = load_partition(args.partition, g.n_nodes)
    else:
        part = partition_graph(g, n_clusters, seed=seed)
    u = extend_universe(g, part)
    return part, u, build_designed_masks(u, g, part)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_sbm(args):
    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SbmConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad SBM config: {exc}") from None
    g = generate_hierarchical_sbm(cfg)
    save_graph(g, args.out)
    _write_manifest(args.out, args, seed=cfg.seed, config=asdict(cfg))
    print(f"wrote {g.n_nodes} nodes, {g.n_edges} directed edges to {args.out}")


def cmd_partition(args):
    g = load_graph(args.data)
    part = partition_graph(g, args.clusters, seed=args.seed, eps=args.eps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_partition(part, out)
    cut, balance = partition_metrics(g, part)
    _write_manifest(out.parent, args, seed=args.seed, clusters=args.clusters, eps=args.eps)
    _emit([(args.clusters, cut, balance)], ("clusters", "edge_cut", "balance"), None)


def cmd_masks(args):
    g = load_graph(args.data)
    part = load_partition(args.partition, g.n_nodes) if args.partition else partition_graph(g, args.clusters, seed=args.seed)
    u = extend_universe(g, part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in args.kinds.split(","):
        mask = build_mask(u, g, part, kind.strip())
        export_mask(mask, out / f"mask_{mask.kind}")
        stats = mask_stats(mask, d_head=args.d_head)
        for i, reg in enumerate(stats["regions"]):
            rows.append((mask.kind, mask.nnz, i, reg["n_queries"], reg["n_keys"], reg["nnz"], reg["kappa"], reg["mode"]))
    write_tsv(out / "mask_stats.tsv", ("kind", "nnz", "region", "n_queries", "n_keys", "region_nnz", "kappa", "mode"), rows)
    _write_manifest(out, args, seed=args.seed, kinds=args.kinds)
    print(f"wrote {len(args.kinds.split(','))} masks to {out}")


def cmd_train(args):
    g = load_graph(args.data)
    model_cfg, train_cfg = _configs(args)
    part, u, masks = _instance(args, g, model_cfg.n_clusters, model_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_partition(part, out / "partition.tsv")
    model = train(g, u, masks, model_cfg, train_cfg, checkpoint=out / "model.ckpt")
    model.record.to_tsv(out / "runrecord.tsv")
    _write_manifest(out, args, seed=model_cfg.seed, model_config=asdict(model_cfg), train_config=asdict(train_cfg))
    _emit(
        [(model.record.best_epoch, model.record.best_metric("valid"), model.record.best_metric("test"), model.record.peak_units)],
        ("best_epoch", "valid", "test", "peak_units"),
        None,
    )


def _checkpoint_instance(args, g):
    store, cfg = load_model(args.checkpoint)
    part_path = args.partition or Path(args.checkpoint).parent / "partition.tsv"
    if Path(part_path).exists():
        part = load_partition(part_path, g.n_nodes)
    else:
        part = partition_graph(g, cfg.n_clusters, seed=cfg.seed)
    u = extend_universe(g, part)
    return store, cfg, u, build_designed_masks(u, g, part)


def cmd_eval(args):
    g = load_graph(args.data)
    store, cfg, u, masks = _checkpoint_instance(args, g)
    score = evaluate((store, cfg), g, u, masks, split=args.split, metric=args.metric)
    _emit([(args.split, args.metric, score)], ("split", "metric", "score"), args.out)
    if args.out:
        _write_manifest(Path(args.out).parent, args, checkpoint=args.checkpoint)


def cmd_ensemble(args):
    g = load_graph(args.data)
    model_cfg, train_cfg = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = ensemble_study(g, model_cfg, train_cfg, out_dir=out, seed=model_cfg.seed)
    _write_manifest(out, args, seed=model_cfg.seed, model_config=asdict(model_cfg), train_config=asdict(train_cfg))
    _emit([(k, float(v)) for k, v in results.items()], ("model", "test_accuracy"), None)


def cmd_gate_profile(args):
    g = load_graph(args.data)
    store, cfg, u, masks = _checkpoint_instance(args, g)
    rows = gate_profile(store, cfg, g, u, masks, parse_degree_bins(args.bins))
    _emit(rows, ("layer", "degree_bin", "n_nodes", "g_local", "g_cluster", "g_global"), args.out)
    if args.out:
        _write_manifest(Path(args.out).parent, args, checkpoint=args.checkpoint, bins=args.bins)


def cmd_bench(args):
    g = load_graph(args.data)
    model_cfg, _ = _configs(args)
    _, u, masks = _instance(args, g, model_cfg.n_clusters, model_cfg.seed)
    rows = []
    for scheme in args.schemes.split(","):
        r = benchmark_schemes(g, u, masks, model_cfg, scheme.strip(), repeats=args.repeats, unit_cap=args.unit_cap)
        rows.append((r.scheme, r.peak_units, "OOM" if r.oom else "ok", r.median_seconds))
    _emit(rows, ("scheme", "peak_units", "status", "median_seconds"), args.out)
    if args.out:
        _write_manifest(Path(args.out).parent, args, model_config=asdict(model_cfg))


def _scenario(args):
    sigma = args.sigma
    return make_scenario(len(sigma), args.k, args.rho_c, args.alpha_c, sigma, args.delta, args.target)


def cmd_theory(args):
    _theory_rows(args)
    if args.out:
        echo = {k: v for k, v in vars(args).items() if k not in ("func", "argv", "command", "threads")}
        _write_manifest(Path(args.out).parent, args, config=echo)


def _theory_rows(args):
    if args.theory_command == "prop1":
        g = load_graph(args.data)
        part = partition_graph(g, args.clusters, seed=args.seed)
        rep = c4_c3_support_check(g, part, seed=args.seed)
        rows = [(args.clusters, rep.support_equal, rep.n_mismatch, rep.max_row_sum_error, rep.composite_support_equal)]
        _emit(rows, ("clusters", "support_equal", "n_mismatch", "max_row_sum_error", "composite_support_equal"), args.out)
        return
    s = _scenario(args)
    head = ("k", "rho_c", "alpha_c", "delta")
    params = (float(s.k), s.rho_c, s.alpha_c, s.delta)
    if args.theory_command == "bounds":
        lo, hi = probability_bounds(s)
        _emit([(*params, exact_probability(s), lo, hi)], (*head, "exact", "lower", "upper"), args.out)
    elif args.theory_command == "mc":
        est = mc_probability(s, args.samples, seed=args.seed)
        _emit([(*params, exact_probability(s), est.estimate, est.stderr)], (*head, "exact", "mc", "stderr"), args.out)
    else:
        rep = monotonicity_scan(s, args.axis, args.grid)
        bad = {(v, w) for _, v, w in rep.violations}
        rows = [
            (args.axis, v, lo, hi, any(v in pair for pair in bad)) for v, lo, hi in zip(rep.values, rep.lower, rep.upper)
        ]
        _emit(rows, ("axis", "value", "lower", "upper", "flagged"), args.out)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="m3d", description="Hierarchical-mask graph transformer toolkit.")
    parser.add_argument("--version", action="version", version=f"m3d {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $M3D_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-sbm", help="generate a hierarchical block-model graph")
    p.add_argument("--config", help="SbmConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("partition", help="balanced partition -> partition.tsv")
    p.add_argument("--data", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("masks", help="build and export attention masks")
    p.add_argument("--data", required=True)
    p.add_argument("--partition")
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default="L2,C4,G3")
    p.add_argument("--d-head", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_masks)

    for name, func, helptext in (
        ("train", cmd_train, "train a model; writes runrecord.tsv and model.ckpt"),
        ("ensemble", cmd_ensemble, "single-expert models plus Mean/Max/Oracle and the full model"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--config", help="ModelConfig JSON; optional 'train' object")
        p.add_argument("--train-config")
        p.add_argument("--partition")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", default="run")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--metric", choices=("accuracy", "roc_auc"), default="accuracy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gate-profile", help="mean gate weights per degree bin")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition")
    p.add_argument("--bins", default="0-2,3-8,9+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gate_profile)

    p = sub.add_parser("bench", help="dense / sparse / dual cost comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--partition")
    p.add_argument("--seed", type=int)
    p.add_argument("--schemes", default="dense,sparse,dual")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--unit-cap", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("theory", help="classification-probability lab")
    tsub = p.add_subparsers(dest="theory_command", parser_class=_Parser)
    for name in ("bounds", "mc", "monotone"):
        t = tsub.add_parser(name)
        t.add_argument("--k", type=float, required=True)
        t.add_argument("--rho-c", type=float, required=True)
        t.add_argument("--alpha-c", type=float, required=True)
        t.add_argument("--sigma", type=_floats, required=True, help="one std per class, comma-separated")
        t.add_argument("--delta", type=float, required=True)
        t.add_argument("--target", type=int, default=0)
        t.add_argument("--out")
        if name == "mc":
            t.add_argument("--samples", type=int, default=100_000)
            t.add_argument("--seed", type=int, default=0)
        if name == "monotone":
            t.add_argument("--axis", choices=SCAN_AXES, required=True)
            t.add_argument("--grid", type=_floats, required=True)
        t.set_defaults(func=cmd_theory)
    t = tsub.add_parser("prop1")
    t.add_argument("--data", required=True)
    t.add_argument("--clusters", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_theory)
    return parser


def _thread_count(value) -> int:
    if value is None:
        value = os.environ.get("M3D_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def _first_command(argv):
    skip = False
    for token in argv:
        if skip:
            skip = False
        elif token == "--threads":
            skip = True
        elif not token.startswith("-"):
            return token
    return None


VALIDATION_ERRORS = (UsageError, ValueError, GraphFormatError, ScenarioError, FileNotFoundError, KeyError, TypeError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        command = _first_command(argv)
        if command is not None and command not in SUBCOMMANDS:
            raise UsageError(f"unknown subcommand {command!r}")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; expected one of " + ", ".join(SUBCOMMANDS))
        if args.command == "theory" and args.theory_command is None:
            raise UsageError("missing theory subcommand; expected bounds, mc, monotone or prop1")
        args.threads = _thread_count(args.threads)
        args.argv = argv
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"m3d: error: {exc}", file=sys.stderr)
        return 1
    except (PreconditionError, RuntimeError, FloatingPointError, OSError, MemoryError) as exc:
        print(f"m3d: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
