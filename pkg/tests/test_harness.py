import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from qkt import config, data, harness, metrics, nn
from qkt.config import PretrainConfig


def small_config(**over):
    doc = {
        "seeds": [0, 1, 2],
        "dataset": {"num_classes": 6, "dims": 8, "per_class": 150, "test_per_class": 30},
        "partition": {"num_clients": 5, "classes_per_client": 2},
        "pretrain": {"max_epochs": 8, "patience": 3},
        "protocols": [
            {"protocol": "qkt", "epochs": 2, "phase2_epochs": 1},
            {"protocol": "naive_kd", "epochs": 2},
        ],
    }
    doc.update(over)
    return config.from_dict(doc)


@pytest.fixture(scope="module")
def two_class_client():
    g = data.generate_synthetic(4, 6, 200, cluster_spread=0.5, seed=0, test_per_class=100)
    keep = np.flatnonzero(np.isin(g.train.y, [0, 1]))
    client = data._make_client(0, g.train, keep, 0.1, np.random.default_rng(0))
    return g, client


def test_pretrain_separable_local_vs_unseen(two_class_client):
    g, client = two_class_client
    model = harness.local_pretrain(client, PretrainConfig(max_epochs=40, patience=10), seed=0, hidden=(16,))
    acc = metrics.per_class_accuracy(model, g.test.x, g.test.y)
    assert min(acc[0], acc[1]) > 0.9
    assert acc[2] == 0.0 and acc[3] == 0.0


def test_pretrain_runs_to_max_when_validation_keeps_improving(two_class_client):
    _, client = two_class_client
    hist = []
    harness.local_pretrain(client, PretrainConfig(max_epochs=8, patience=2, learning_rate=1e-4), 0, (16,), history=hist)
    keys = [(h["val_acc"], -h["val_loss"]) for h in hist]
    assert all(b > a for a, b in zip(keys, keys[1:])), "precondition: monotone validation improvement"
    assert len(hist) == 8


def test_pretrain_stops_after_patience_and_returns_best(two_class_client):
    _, client = two_class_client
    hist = []
    spec = PretrainConfig(max_epochs=200, patience=3, learning_rate=1e-2)
    model = harness.local_pretrain(client, spec, 0, (16,), history=hist)
    assert len(hist) < 200
    keys = [(h["val_acc"], -h["val_loss"]) for h in hist]
    best = max(range(len(keys)), key=lambda i: keys[i])
    assert len(hist) == best + 1 + 3
    val = client.val
    fwd = nn.forward(model, val.x)
    assert float(nn.cross_entropy(fwd.logits, val.y).mean()) == pytest.approx(hist[best]["val_loss"], abs=1e-12)


def test_pretrain_is_deterministic(two_class_client):
    _, client = two_class_client
    spec = PretrainConfig(max_epochs=5, patience=5)
    a = harness.local_pretrain(client, spec, seed=3, hidden=(8,))
    b = harness.local_pretrain(client, spec, seed=3, hidden=(8,))
    assert nn.save_checkpoint(a) == nn.save_checkpoint(b)


def test_pretrain_rejects_empty_training_split():
    empty = data.ClientDataset(0, np.zeros((0, 2)), np.zeros(0, int), 2, np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ValueError, match="empty"):
        harness.local_pretrain(empty)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = replace(small_config(), output_dir=str(out))
    return cfg, harness.run_experiment(cfg), out


def test_row_cardinality(small_run):
    cfg, records, out = small_run
    assert len(records) == 3
    rows = harness.read_results(out / "results.csv")
    assert len(rows) == 2 * 3 * 5
    assert list(rows[0]) == list(metrics.MetricsReport.CSV_COLUMNS)
    assert all(not r.failed and not r.errors for r in records)


def test_outputs_written(small_run):
    cfg, records, out = small_run
    for name in ("results.csv", "metrics.jsonl", "summary.csv", "summary.txt", "run.json"):
        assert (out / name).exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 30
    ckpt = out / "checkpoints/seed0/pretrained/client0.qktm"
    assert harness.checkpoint_hash(nn.load_checkpoint(ckpt.read_bytes())) == records[0].checkpoint_hashes[0]
    assert (out / "checkpoints/seed0/qkt/client3.qktm").exists()
    assert (out / "logs/seed2/naive_kd/client4.jsonl").exists()
    assert len(records[0].instrumentation) == 10


def test_rerun_is_byte_identical(small_run, tmp_path):
    cfg, _, out = small_run
    again = replace(cfg, output_dir=str(tmp_path))
    harness.run_experiment(again)
    assert (out / "results.csv").read_bytes() == (tmp_path / "results.csv").read_bytes()
    assert (out / "metrics.jsonl").read_bytes() == (tmp_path / "metrics.jsonl").read_bytes()
    for p in sorted((out / "checkpoints").rglob("*.qktm")):
        assert p.read_bytes() == (tmp_path / p.relative_to(out)).read_bytes()


def test_parallel_seeds_match_serial(small_run, tmp_path):
    cfg, _, out = small_run
    harness.run_experiment(replace(cfg, output_dir=str(tmp_path), workers=3))
    assert (out / "results.csv").read_bytes() == (tmp_path / "results.csv").read_bytes()


def test_protocols_share_pretrained_checkpoints(small_run):
    cfg, records, _ = small_run
    rec = records[0]
    by_client = {}
    for rep in rec.reports:
        by_client.setdefault(rep.client_id, set()).add(tuple(sorted(rep.per_class_acc_pre.items())))
    assert all(len(v) == 1 for v in by_client.values())


def test_adding_a_protocol_does_not_change_others(small_run, tmp_path):
    cfg, _, out = small_run
    only_qkt = replace(cfg, protocols=cfg.protocols[:1], output_dir=str(tmp_path))
    harness.run_experiment(only_qkt)
    full = [r for r in harness.read_results(out / "results.csv") if r["method"] == "qkt"]
    assert full == harness.read_results(tmp_path / "results.csv")


def test_comm_accounting():
    cfg = small_config(
        seeds=[0],
        protocols=[
            {"protocol": "naive_kd", "epochs": 1},
            {"protocol": "qkt", "epochs": 1, "phase2_epochs": 1},
            {"protocol": "qkt_light", "epochs": 1, "phase2_epochs": 1},
            {"protocol": "fedavg", "rounds": 3, "local_epochs": 1},
            {"protocol": "ft_fedavg", "rounds": 4, "local_epochs": 1},
            {"protocol": "fedavg1", "local_epochs": 1},
            "ensemble",
        ],
    )
    (rec,) = harness.run_experiment(cfg)
    assert rec.comm_rounds == {"naive_kd": 1, "qkt": 1, "qkt_light": 1, "fedavg": 3, "ft_fedavg": 4, "fedavg1": 1, "ensemble": 1}
    assert {r.comm_rounds for r in rec.reports if r.protocol == "ft_fedavg"} == {4}


def test_sweep_groups_are_tagged():
    cfg = small_config(seeds=[0], protocols=[{"protocol": "qkt", "epochs": 1, "phase2_epochs": 1}],
                       sweep={"lam": [1, 1.5, 2, 4]})
    records = harness.run_experiment(cfg)
    summary = harness.report(records, ("method",))
    assert [s["method"] for s in summary] == ["qkt[lam=1]", "qkt[lam=1.5]", "qkt[lam=2]", "qkt[lam=4]"]
    assert {r.tags["lam"] for r in records[0].reports} == {1, 1.5, 2, 4}


def test_failed_seed_does_not_stop_others(monkeypatch):
    cfg = small_config(seeds=[0, 1], protocols=[{"protocol": "naive_kd", "epochs": 1}])
    real = harness.build_dataset

    def flaky(config, seed):
        if seed == 0:
            raise RuntimeError("disk on fire")
        return real(config, seed)

    monkeypatch.setattr(harness, "build_dataset", flaky)
    a, b = harness.run_experiment(cfg)
    assert a.failed and "disk on fire" in a.errors[0] and not a.reports
    assert not b.failed and len(b.reports) == 5


def test_no_competent_teacher_is_recorded_per_job():
    cfg = small_config(seeds=[0], protocols=[{"protocol": "qkt", "epochs": 1, "tau": 0.999}, {"protocol": "naive_kd", "epochs": 1}])
    (rec,) = harness.run_experiment(cfg)
    assert not rec.failed
    assert any("no teacher" in e for e in rec.errors)
    assert {r.protocol for r in rec.reports} == {"naive_kd"}


# reporting


def row(seed, method, acc, gain=0.0, forget=0.0, uni=0.0, client=0):
    return {"seed": seed, "client": client, "method": method, "avg_acc": acc, "query_acc_gain": gain,
            "forgetting": forget, "uniform_acc": uni, "comm_rounds": 1}


def test_report_single_record():
    (s,) = harness.summarize_rows([row(0, "qkt", 0.7, 0.2, -0.1, 0.4)])
    assert s["avg_acc_mean"] == 0.7 and s["avg_acc_std"] == 0.0
    assert s["forgetting_mean"] == -0.1 and s["n_seeds"] == 1


def test_report_missing_key_is_one_group():
    rows = [row(0, "a", 0.5), row(0, "b", 0.7)]
    (s,) = harness.summarize_rows(rows, ("sweep_key",))
    assert s["avg_acc_mean"] == pytest.approx(0.6)


def test_report_hand_means():
    # seed 0 clients average to 0.5, seed 1 to 0.9: mean 0.7, population std 0.2
    rows = [row(0, "q", 0.4, client=0), row(0, "q", 0.6, client=1), row(1, "q", 0.8, client=0), row(1, "q", 1.0, client=1)]
    (s,) = harness.summarize_rows(rows)
    assert s["avg_acc_mean"] == pytest.approx(0.7, abs=1e-12)
    assert s["avg_acc_std"] == pytest.approx(0.2, abs=1e-12)
    assert s["n_seeds"] == 2 and s["n_rows"] == 4


def test_summary_formats():
    summary = harness.summarize_rows([row(0, "qkt", 0.7), row(1, "qkt", 0.8), row(0, "kd", 0.5)])
    table = harness.summary_table(summary)
    lines = table.splitlines()
    assert lines[0].startswith("method") and "75.00 ± 5.00" in table
    qkt_line = next(l for l in lines if l.startswith("qkt"))
    assert lines[0].index("Acc") == qkt_line.index("75.00")
    parsed = list(csv.DictReader(io.StringIO(harness.summary_csv(summary))))
    assert parsed[0]["method"] == "qkt" and float(parsed[0]["avg_acc_mean"]) == pytest.approx(0.75)
