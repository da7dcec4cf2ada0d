"""Command-line entry point.

Every subcommand takes ``--config PATH`` (YAML), ``--seed N`` (overrides
the config's seed list) and ``--out DIR``. Failures print one JSON object
on stderr and exit nonzero (2 for configuration errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, harness, metrics, nn


def _load(args) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.from_dict({"protocols": ["qkt"]})
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _out(args, cfg) -> Path:
    root = Path(args.out or cfg.output_dir or ".")
    root.mkdir(parents=True, exist_ok=True)
    return root


def _emit(doc) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True))


def cmd_gen_data(args):
    cfg = _load(args)
    root = _out(args, cfg)
    written = []
    for seed in cfg.seeds:
        ds = harness.build_dataset(cfg, seed)
        for split in ("train", "test"):
            path = root / f"seed{seed}_{split}.csv"
            data.save_csv(getattr(ds, split), path)
            written.append(str(path))
    _emit({"written": written})


def cmd_partition(args):
    cfg = _load(args)
    root = _out(args, cfg)
    written = []
    for seed in cfg.seeds:
        clients = harness.build_clients(cfg, harness.build_dataset(cfg, seed), seed)
        path = root / f"seed{seed}_partition.json"
        path.write_text(data.partition_manifest(clients))
        written.append(str(path))
    _emit({"written": written})


def cmd_pretrain(args):
    cfg = _load(args)
    root = _out(args, cfg)
    summary = {}
    for seed in cfg.seeds:
        ds = harness.build_dataset(cfg, seed)
        clients = harness.build_clients(cfg, ds, seed)
        models = harness.pretrain_all(cfg, clients, seed)
        entries = {}
        for c, m in zip(clients, models):
            path = root / f"checkpoints/seed{seed}/pretrained/client{c.client_id}.qktm"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(nn.save_checkpoint(m))
            acc = metrics.per_class_accuracy(m, ds.test.x, ds.test.y)
            entries[c.client_id] = {
                "checkpoint": str(path),
                "sha256": harness.checkpoint_hash(m),
                "local_acc": float(np.mean([acc[k] for k in c.local_classes])),
            }
        summary[seed] = entries
    _emit(summary)


def _run(cfg, kind=None):
    if kind is not None:
        kept = tuple(p for p in cfg.protocols if p.kind == kind)
        if not kept:
            raise cfgmod.ConfigError("protocols", f"config lists no {kind} protocol")
        cfg = replace(cfg, protocols=kept)
    records = harness.run_experiment(cfg)
    failed = [e for r in records for e in r.errors if r.failed]
    _emit({
        "config_hash": cfg.config_hash(),
        "output_dir": cfg.output_dir,
        "rows": sum(len(r.reports) for r in records),
        "errors": [e for r in records for e in r.errors],
    })
    if failed:
        raise RuntimeError(f"{len(failed)} seed(s) aborted; see errors above")
    if cfg.output_dir:
        print((Path(cfg.output_dir) / "summary.txt").read_text(), file=sys.stderr)


def cmd_transfer(args):
    cfg = _load(args)
    _out(args, cfg)
    _run(cfg, "transfer")


def cmd_baseline(args):
    cfg = _load(args)
    _out(args, cfg)
    _run(cfg, "baseline")


def cmd_sweep(args):
    cfg = _load(args)
    if args.dry_run:
        _emit({"config_hash": cfg.config_hash(), "runs": [p.name for p in cfg.protocols], "seeds": list(cfg.seeds)})
        return
    _out(args, cfg)
    _run(cfg)


def cmd_evaluate(args):
    """Per-class test accuracy of stored checkpoints on a seed's dataset."""
    cfg = _load(args)
    seed = cfg.seeds[0]
    ds = harness.build_dataset(cfg, seed)
    out = {}
    for path in args.checkpoint:
        model = nn.load_checkpoint(Path(path).read_bytes())
        acc = metrics.per_class_accuracy(model, ds.test.x, ds.test.y)
        out[path] = {"per_class_acc": acc, "uniform_acc": metrics.uniform_accuracy(acc)}
    _emit(out)


def cmd_report(args):
    root = Path(args.results or args.out or ".")
    path = root / "results.csv" if root.is_dir() else root
    rows = harness.read_results(path)
    group_by = tuple(args.group_by.split(",")) if args.group_by else ("method",)
    summary = harness.summarize_rows(rows, group_by)
    dest = path.parent
    (dest / "summary.csv").write_text(harness.summary_csv(summary, group_by))
    table = harness.summary_table(summary, group_by)
    (dest / "summary.txt").write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkt", description="Query-based knowledge transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="experiment YAML")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "write the dataset as CSV")
    add("partition", cmd_partition, "write the client partition manifest")
    add("pretrain", cmd_pretrain, "pretrain every client and store checkpoints")
    add("transfer", cmd_transfer, "run the configured transfer protocols")
    add("baseline", cmd_baseline, "run the configured baselines")
    ev = add("evaluate", cmd_evaluate, "per-class accuracy of checkpoints")
    ev.add_argument("checkpoint", nargs="+")
    rep = add("report", cmd_report, "summarise a results.csv")
    rep.add_argument("--results", help="results.csv or the directory holding it (default --out)")
    rep.add_argument("--group-by", help="comma-separated columns (default method)")
    sw = add("sweep", cmd_sweep, "run every protocol and sweep combination")
    sw.add_argument("--dry-run", action="store_true", help="list the expanded runs only")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except cfgmod.ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc), "path": exc.path, "line": exc.line}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
