"""Experiment orchestration: data, local pretraining, transfer, baselines, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import baselines, data, metrics, nn, transfer
from .config import ExperimentConfig, PretrainConfig
from .seeding import BASELINE, DATA, INIT, PARTITION, PRETRAIN, QUERY, TRANSFER, stream, stream_int

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("avg_acc", "query_acc_gain", "forgetting", "uniform_acc")


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    reports: list[metrics.MetricsReport] = field(default_factory=list)
    wall_clock: float = 0.0
    comm_rounds: dict[str, int] = field(default_factory=dict)
    checkpoint_hashes: dict[int, str] = field(default_factory=dict)
    instrumentation: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    failed: bool = False


def checkpoint_hash(model: nn.ModelParams) -> str:
    return hashlib.sha256(nn.save_checkpoint(model)).hexdigest()


def local_pretrain(
    client: data.ClientDataset,
    spec: PretrainConfig = PretrainConfig(),
    seed=0,
    hidden: Sequence[int] = (64, 32),
    split_index: int | None = None,
    init: nn.ModelParams | None = None,
    history: list | None = None,
) -> nn.ModelParams:
    """Train on the client's train split and return the best-validation checkpoint.

    Validation accuracy drives early stopping (``spec.patience`` epochs
    without improvement); equal accuracy with lower validation loss also
    counts as an improvement. Without a validation split the training split
    is scored instead.
    """
    train = client.train
    if len(train) == 0:
        raise ValueError(f"client {client.client_id} has an empty training split")
    val = client.val if len(client.val_idx) else train
    init_ss, train_ss = _split(seed)
    model = init if init is not None else nn.init_mlp(
        train.x.shape[1], client.num_classes, hidden, np.random.default_rng(init_ss), split_index
    )
    best = {"key": None, "model": model, "stale": 0}

    def on_epoch(epoch, m, loss):
        fwd = nn.forward(m, val.x)
        acc = float(np.mean(fwd.logits.argmax(axis=1) == val.y))
        vloss = float(nn.cross_entropy(fwd.logits, val.y).mean())
        key = (acc, -vloss)
        if history is not None:
            history.append({"epoch": epoch, "train_loss": loss, "val_acc": acc, "val_loss": vloss})
        if best["key"] is None or key > best["key"]:
            best.update(key=key, model=m, stale=0)
        else:
            best["stale"] += 1
        return best["stale"] >= spec.patience

    state = nn.AdamState.for_model(model, learning_rate=spec.learning_rate, weight_decay=spec.weight_decay)
    nn.train_supervised(
        model, train.x, train.y, spec.max_epochs, np.random.default_rng(train_ss),
        spec.batch_size, None, state, on_epoch,
    )
    return best["model"]


def _split(seed):
    from .seeding import seed_sequence

    return seed_sequence(seed).spawn(2)


def build_dataset(config: ExperimentConfig, seed: int) -> data.GlobalDataset:
    d = config.dataset
    if d.kind == "csv":
        return data.load_csv(d.path, d.num_classes, d.test_fraction, stream_int(seed, DATA))
    return data.generate_synthetic(
        d.num_classes, d.dims, d.per_class, d.cluster_spread, stream_int(seed, DATA),
        d.test_per_class, d.center_scale, d.modes_per_class,
    )


def build_clients(config: ExperimentConfig, dataset: data.GlobalDataset, seed: int) -> list[data.ClientDataset]:
    p = config.partition
    spec = data.PartitionSpec(
        p.scheme, p.num_clients, p.classes_per_client, p.alpha, tuple(p.count_range),
        p.val_fraction, stream_int(seed, PARTITION),
    )
    return data.partition(dataset, spec)


def pretrain_all(config: ExperimentConfig, clients, seed: int) -> list[nn.ModelParams]:
    return [
        local_pretrain(
            c, config.pretrain, stream(seed, PRETRAIN, c.client_id),
            config.model.hidden, config.model.split_index,
        )
        for c in clients
    ]


def select_queries(config: ExperimentConfig, clients, seed: int, errors: list) -> dict[int, data.QuerySpec]:
    ids = config.query.students if config.query.students is not None else range(len(clients))
    out = {}
    for s in ids:
        try:
            out[s] = data.select_query(
                clients[s], config.query.mode, config.query.sample_threshold,
                np.random.default_rng(stream(seed, QUERY, s)), config.query.max_multi,
            )
        except data.QuerySelectionError as exc:
            errors.append(f"seed {seed} client {s}: {exc}")
    return out


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", name).strip("_")


class _Writer:
    """Writes per-seed artefacts below ``root`` (no-op when root is None)."""

    def __init__(self, root):
        self.root = Path(root) if root else None

    def bytes(self, rel, payload: bytes):
        if self.root is None:
            return None
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        return str(path)

    def text(self, rel, payload: str):
        return self.bytes(rel, payload.encode())


def run_seed(config: ExperimentConfig, seed: int) -> RunRecord:
    """Full pipeline for one seed. Stage failures mark the record failed."""
    start = time.perf_counter()
    record = RunRecord(config.config_hash(), seed)
    out = _Writer(config.output_dir)
    try:
        _run_seed(config, seed, record, out)
    except Exception as exc:  # one bad seed must not sink the others
        log.exception("seed %d aborted", seed)
        record.failed = True
        record.errors.append(f"seed {seed} aborted: {type(exc).__name__}: {exc}")
    record.wall_clock = time.perf_counter() - start
    return record


def _run_seed(config, seed, record, out):
    dataset = build_dataset(config, seed)
    clients = build_clients(config, dataset, seed)
    out.text(f"manifest/seed{seed}_partition.json", data.partition_manifest(clients))
    models = pretrain_all(config, clients, seed)
    for i, m in enumerate(models):
        record.checkpoint_hashes[i] = checkpoint_hash(m)
        out.bytes(f"checkpoints/seed{seed}/pretrained/client{i}.qktm", nn.save_checkpoint(m))
    test_x, test_y = dataset.test.x, dataset.test.y
    pre = [metrics.per_class_accuracy(m, test_x, test_y) for m in models]
    queries = select_queries(config, clients, seed, record.errors)

    for entry in config.transfer_entries():
        record.comm_rounds[entry.name] = 1
        for s, q in queries.items():
            if checkpoint_hash(models[s]) != record.checkpoint_hashes[s]:
                raise RuntimeError(f"pretrained checkpoint of client {s} changed between protocols")
            teachers = {i: m for i, m in enumerate(models) if i != s}
            try:
                result = transfer.run_protocol(
                    models[s], clients[s], teachers, q, entry.transfer, stream(seed, TRANSFER, s)
                )
            except transfer.NoCompetentTeacherError as exc:
                record.errors.append(f"seed {seed} {entry.name} client {s}: {exc}")
                continue
            record.comm_rounds[entry.name] = result.comm_rounds
            rep = metrics.evaluate_transfer(
                models[s], result.model, test_x, test_y, clients[s].class_counts, q.query_classes,
                s, entry.protocol, seed, result.comm_rounds, dict(entry.tags), pre_acc=pre[s],
            )
            rep.method = entry.name
            record.reports.append(rep)
            slug = _slug(entry.name)
            out.bytes(f"checkpoints/seed{seed}/{slug}/client{s}.qktm", nn.save_checkpoint(result.model))
            path = out.text(
                f"logs/seed{seed}/{slug}/client{s}.jsonl",
                "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log.events),
            )
            if path:
                record.instrumentation.append(path)

    for entry in config.baseline_entries():
        per_client, comm = _run_baseline(entry, config, clients, models, seed)
        record.comm_rounds[entry.name] = comm
        for s, q in queries.items():
            rep = metrics.evaluate_transfer(
                models[s], per_client(s), test_x, test_y, clients[s].class_counts, q.query_classes,
                s, entry.protocol, seed, comm, dict(entry.tags), pre_acc=pre[s],
            )
            rep.method = entry.name
            record.reports.append(rep)


def _run_baseline(entry, config, clients, models, seed):
    """Returns ``(client_id -> model or predictor, comm_rounds)``."""
    kind, fed = entry.protocol, entry.fed
    init = nn.init_mlp(
        clients[0].x.shape[1], clients[0].num_classes, config.model.hidden,
        np.random.default_rng(stream(seed, BASELINE, 0)), config.model.split_index,
    )
    train_ss = stream(seed, BASELINE, 1)
    if kind == "ensemble":
        predictor = baselines.ensemble_classifier(models)
        return (lambda s: predictor), 1
    if kind == "fedavg1":
        res = baselines.fedavg_one_round(clients, fed, init, train_ss)
    elif kind == "fedavg":
        res = baselines.fedavg(clients, fed, init, train_ss)
    else:
        res = baselines.ft_fedavg(clients, fed, init, train_ss)
        return (lambda s: res.client_models[s]), res.comm_rounds
    return (lambda s: res.model), res.comm_rounds


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """Run every seed, then write ``results.csv``, ``metrics.jsonl`` and summaries."""
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            records = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        records = [run_seed(config, s) for s in config.seeds]
    if config.output_dir:
        write_outputs(records, config)
    return records


def records_to_rows(records: Iterable[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        for rep in rec.reports:
            rows.append(dict(zip(metrics.MetricsReport.CSV_COLUMNS, rep.csv_row())))
    return rows


def results_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics.MetricsReport.CSV_COLUMNS)
    for rec in sorted(records, key=lambda r: r.seed):
        for rep in rec.reports:
            w.writerow(rep.csv_row())
    return buf.getvalue()


def write_outputs(records: Sequence[RunRecord], config: ExperimentConfig) -> None:
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "results.csv").write_text(results_csv(records))
    with (root / "metrics.jsonl").open("w") as fh:
        for rec in sorted(records, key=lambda r: r.seed):
            for rep in rec.reports:
                fh.write(rep.to_json() + "\n")
    rows = records_to_rows(records)
    if rows:
        group_by = ("method",)
        summary = summarize_rows(rows, group_by)
        (root / "summary.csv").write_text(summary_csv(summary, group_by))
        (root / "summary.txt").write_text(summary_table(summary, group_by))
    run_info = {
        "config_hash": config.config_hash(),
        "seeds": [
            {"seed": r.seed, "wall_clock_s": round(r.wall_clock, 3), "failed": r.failed,
             "errors": r.errors, "comm_rounds": r.comm_rounds}
            for r in records
        ],
    }
    (root / "run.json").write_text(json.dumps(run_info, indent=1, sort_keys=True))


def read_results(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def summarize_rows(rows: Sequence[dict], group_by: Sequence[str] = ("method",)) -> list[dict]:
    """Mean and std over seeds of the client-averaged metrics, per group.

    Network-level numbers are first averaged over clients within a seed;
    the spread is the population std across seeds (0 for a single seed).
    Grouping keys missing from the rows collapse into one group. Groups
    appear in the order they first occur in ``rows``.
    """
    groups: dict[tuple, dict[str, list[dict]]] = {}
    for row in rows:
        key = tuple(row.get(k, "") for k in group_by)
        groups.setdefault(key, {}).setdefault(str(row["seed"]), []).append(row)
    out = []
    for key in groups:  # first-appearance order follows the config
        by_seed = groups[key]
        entry = dict(zip(group_by, key))
        entry["n_seeds"] = len(by_seed)
        entry["n_rows"] = sum(len(v) for v in by_seed.values())
        for m in SUMMARY_METRICS:
            per_seed = [np.mean([float(r[m]) for r in rs]) for rs in by_seed.values()]
            entry[f"{m}_mean"] = float(np.mean(per_seed))
            entry[f"{m}_std"] = float(np.std(per_seed))
        comm = {int(r["comm_rounds"]) for rs in by_seed.values() for r in rs}
        entry["comm_rounds"] = comm.pop() if len(comm) == 1 else -1
        out.append(entry)
    return out


def report(records: Sequence[RunRecord], group_by: Sequence[str] = ("method",)) -> list[dict]:
    return summarize_rows(records_to_rows(records), group_by)


def _summary_columns(group_by):
    cols = list(group_by) + ["n_seeds", "comm_rounds"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols


def summary_csv(summary: Sequence[dict], group_by: Sequence[str] = ("method",)) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = _summary_columns(group_by)
    w.writerow(cols)
    for e in summary:
        w.writerow([f"{e[c]:.6f}" if isinstance(e[c], float) else e[c] for c in cols])
    return buf.getvalue()


def summary_table(summary: Sequence[dict], group_by: Sequence[str] = ("method",)) -> str:
    """Aligned text table with metrics in percent as ``mean ± std``."""
    head = list(group_by) + ["seeds", "comm"] + ["Acc", "QueryGain", "Forgetting", "UniformAcc"]
    body = []
    for e in summary:
        row = [str(e[k]) for k in group_by] + [str(e["n_seeds"]), str(e["comm_rounds"])]
        for m in SUMMARY_METRICS:
            row.append(f"{100 * e[m + '_mean']:.2f} ± {100 * e[m + '_std']:.2f}")
        body.append(row)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"
