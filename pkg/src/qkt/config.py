"""Experiment configuration: YAML in, validated dataclasses out.

Errors name the offending key path and, when the config came from a file,
its line number, e.g. ``exp.yaml:14: protocols[1].lam: must be > 0``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .baselines import BASELINES, FedConfig
from .transfer import PROTOCOLS, ConfigError as TransferConfigError, TransferConfig

SWEEPABLE = ("lam", "tau", "alpha_kd", "epochs", "phase2_epochs", "selective_mask_z", "probe_samples")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(f"{where}{path or '<root>'}: {message}")
        self.path, self.line, self.source = path, line, source


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dims: int = 20
    per_class: int = 1000
    test_per_class: int = 100
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    modes_per_class: int = 1
    path: str | None = None
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "pathological"
    num_clients: int = 10
    classes_per_client: int = 3
    alpha: float = 0.1
    count_range: tuple[float, float] = (0.3, 1.0)
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 32)
    split_index: int | None = None


@dataclass(frozen=True)
class PretrainConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 4e-4


@dataclass(frozen=True)
class QueryConfig:
    mode: str = "single"
    sample_threshold: int = 50
    students: tuple[int, ...] | None = None  # None: every client
    max_multi: int = 4


@dataclass(frozen=True)
class ProtocolEntry:
    name: str
    kind: str  # "transfer" | "baseline"
    transfer: TransferConfig | None = None
    fed: FedConfig | None = None
    baseline: str | None = None
    tags: tuple[tuple[str, Any], ...] = ()

    @property
    def protocol(self) -> str:
        return self.transfer.protocol if self.transfer is not None else self.baseline


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...]
    protocols: tuple[ProtocolEntry, ...]
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    sweep: tuple[tuple[str, tuple], ...] = ()
    output_dir: str | None = None
    workers: int = 1

    def config_hash(self) -> str:
        """Digest of everything that affects results (not output_dir or workers)."""
        doc = asdict(self)
        doc.pop("output_dir")
        doc.pop("workers")
        blob = json.dumps(doc, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def transfer_entries(self):
        return [p for p in self.protocols if p.kind == "transfer"]

    def baseline_entries(self):
        return [p for p in self.protocols if p.kind == "baseline"]


class _Lines:
    """Map key paths to source line numbers using the YAML node tree."""

    def __init__(self, text: str | None):
        self.lines: dict[str, int] = {}
        if text:
            try:
                self._walk(yaml.compose(text), "")
            except yaml.YAMLError:
                pass

    def _walk(self, node, path):
        if node is None:
            return
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                sub = f"{path}.{k.value}" if path else str(k.value)
                self.lines[sub] = k.start_mark.line + 1
                self._walk(v, sub)
                self.lines[sub] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def get(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rsplit(".", 1)[0] if "." in path else path.rsplit("[", 1)[0] if "[" in path else ""
        return None


class _Validator:
    def __init__(self, lines: _Lines, source: str | None):
        self.lines, self.source = lines, source

    def fail(self, path, message):
        raise ConfigError(path, message, self.lines.get(path), self.source)

    def mapping(self, value, path) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        return value

    def dataclass_from(self, cls, value, path, exclude=()):
        value = self.mapping(value, path)
        known = {f.name: f for f in fields(cls) if f.name not in exclude}
        kwargs = {}
        for key, raw in value.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in known:
                self.fail(sub, f"unknown key; expected one of {sorted(known)}")
            kwargs[key] = self.coerce(raw, known[key].type, sub)
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))

    def coerce(self, raw, annotation, path):
        ann = str(annotation)
        if raw is None:
            if "None" in ann:
                return None
            self.fail(path, "value required")
        if ann.startswith("tuple"):
            if not isinstance(raw, (list, tuple)):
                self.fail(path, "expected a list")
            inner = "float" if "float" in ann else "int" if "int" in ann else "str"
            return tuple(self.scalar(v, inner, f"{path}[{i}]") for i, v in enumerate(raw))
        for kind in ("bool", "int", "float", "str"):
            if ann.startswith(kind):
                return self.scalar(raw, kind, path)
        return raw

    def scalar(self, raw, kind, path):
        if kind == "bool":
            if not isinstance(raw, bool):
                self.fail(path, "expected true/false")
            return raw
        if kind == "int":
            if isinstance(raw, bool) or not isinstance(raw, int):
                self.fail(path, f"expected an integer, got {raw!r}")
            return raw
        if kind == "float":
            if isinstance(raw, str):
                # YAML 1.1 reads 1e-3 (no dot) as a string
                try:
                    return float(raw)
                except ValueError:
                    pass
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                self.fail(path, f"expected a number, got {raw!r}")
            return float(raw)
        if not isinstance(raw, str):
            self.fail(path, f"expected a string, got {raw!r}")
        return raw


def _protocol_entry(v: _Validator, raw, path) -> ProtocolEntry:
    if isinstance(raw, str):
        raw = {"protocol": raw}
    raw = dict(v.mapping(raw, path))
    if "protocol" not in raw:
        v.fail(path, "missing 'protocol'")
    proto = raw.pop("protocol")
    name = raw.pop("name", proto)
    if proto in PROTOCOLS:
        try:
            cfg = v.dataclass_from(TransferConfig, {"protocol": proto, **raw}, path)
        except TransferConfigError as exc:
            v.fail(path, str(exc))
        return ProtocolEntry(name, "transfer", transfer=cfg)
    if proto in BASELINES:
        fed = v.dataclass_from(FedConfig, raw, path)
        return ProtocolEntry(name, "baseline", fed=fed, baseline=proto)
    v.fail(f"{path}.protocol", f"unknown protocol {proto!r}; expected one of {PROTOCOLS + BASELINES}")


def from_dict(doc: dict, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    v = _Validator(_Lines(text), source)
    doc = v.mapping(doc, "")
    allowed = {f.name for f in fields(ExperimentConfig)}
    for key in doc:
        if key not in allowed:
            v.fail(str(key), f"unknown key; expected one of {sorted(allowed)}")
    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        v.fail("seeds", "expected a non-empty list of integers")
    seeds = tuple(v.scalar(s, "int", f"seeds[{i}]") for i, s in enumerate(seeds))
    protos = doc.get("protocols")
    if not isinstance(protos, list) or not protos:
        v.fail("protocols", "at least one protocol is required")
    entries = [_protocol_entry(v, p, f"protocols[{i}]") for i, p in enumerate(protos)]

    sweep = v.mapping(doc.get("sweep"), "sweep")
    sweep_items = []
    for key, values in sweep.items():
        if key not in SWEEPABLE:
            v.fail(f"sweep.{key}", f"not sweepable; expected one of {list(SWEEPABLE)}")
        if not isinstance(values, list) or not values:
            v.fail(f"sweep.{key}", "expected a non-empty list")
        sweep_items.append((key, tuple(values)))
    if sweep_items:
        entries = _expand_sweep(v, entries, sweep_items)

    names = [e.name for e in entries]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        v.fail("protocols", f"duplicate protocol names {sorted(dupes)}; set 'name' to disambiguate")

    dataset = v.dataclass_from(DatasetConfig, doc.get("dataset"), "dataset")
    if dataset.kind not in ("synthetic", "csv"):
        v.fail("dataset.kind", "expected 'synthetic' or 'csv'")
    if dataset.kind == "csv" and not dataset.path:
        v.fail("dataset.path", "csv datasets need a path")
    partition = v.dataclass_from(PartitionConfig, doc.get("partition"), "partition")
    if partition.scheme not in ("pathological", "dirichlet"):
        v.fail("partition.scheme", "expected 'pathological' or 'dirichlet'")
    if partition.num_clients < 2:
        v.fail("partition.num_clients", "need at least two clients")
    query = v.dataclass_from(QueryConfig, doc.get("query"), "query")
    if query.mode not in ("single", "multi"):
        v.fail("query.mode", "expected 'single' or 'multi'")
    if query.students is not None:
        for i, s in enumerate(query.students):
            if not 0 <= s < partition.num_clients:
                v.fail(f"query.students[{i}]", f"client id {s} out of range")
    for e in entries:
        if e.fed is not None and e.fed.participants is not None:
            for s in e.fed.participants:
                if not 0 <= s < partition.num_clients:
                    v.fail("protocols", f"{e.name}: participant {s} out of range")
    workers = doc.get("workers", 1)
    return ExperimentConfig(
        seeds=seeds,
        protocols=tuple(entries),
        name=v.scalar(doc.get("name", "experiment"), "str", "name"),
        dataset=dataset,
        partition=partition,
        model=v.dataclass_from(ModelConfig, doc.get("model"), "model"),
        pretrain=v.dataclass_from(PretrainConfig, doc.get("pretrain"), "pretrain"),
        query=query,
        sweep=tuple(sweep_items),
        output_dir=doc.get("output_dir"),
        workers=v.scalar(workers, "int", "workers"),
    )


def _expand_sweep(v: _Validator, entries, sweep_items):
    """Cross every transfer protocol with the sweep grid; baselines run once."""
    keys = [k for k, _ in sweep_items]
    out = []
    for e in entries:
        if e.kind != "transfer":
            out.append(e)
            continue
        for combo in itertools.product(*(vals for _, vals in sweep_items)):
            overrides = dict(zip(keys, combo))
            try:
                cfg = TransferConfig(**{**asdict(e.transfer), **overrides})
            except (TransferConfigError, TypeError) as exc:
                v.fail("sweep", str(exc))
            label = ",".join(f"{k}={val}" for k, val in overrides.items())
            out.append(ProtocolEntry(f"{e.name}[{label}]", "transfer", transfer=cfg, tags=tuple(overrides.items())))
    return out


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("", f"invalid YAML: {exc}", mark.line + 1 if mark else None, str(path)) from exc
    return from_dict(doc, text, str(path))
