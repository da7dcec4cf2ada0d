"""One client asks its peers for a class it has never seen.

Builds a small federation, pretrains every client locally, picks a query
class for client 0 and runs the two-phase transfer against all peers.
Prints which teachers were selected and how per-class accuracy moved.

    python demos/quickstart.py
"""
import numpy as np

from qkt import config, harness, metrics, transfer

cfg = config.from_dict({
    "seeds": [0],
    "dataset": {"num_classes": 6, "dims": 10, "per_class": 400, "test_per_class": 100},
    "partition": {"num_clients": 5, "classes_per_client": 2},
    "pretrain": {"max_epochs": 40, "patience": 5},
    "protocols": ["qkt"],
})

ds = harness.build_dataset(cfg, 0)
clients = harness.build_clients(cfg, ds, 0)
models = harness.pretrain_all(cfg, clients, 0)

student = 0
query = [c for c in range(ds.num_classes) if c not in clients[student].local_classes][:1]
peers = {i: m for i, m in enumerate(models) if i != student}
print(f"client {student} holds {clients[student].local_classes}, asks for {query}")

tcfg = transfer.TransferConfig("qkt", epochs=20, phase2_epochs=5)
res = transfer.run_protocol(models[student], clients[student], peers, query, tcfg, seed=0)
for tid, probe in sorted(res.probes.items()):
    flag = "*" if tid in res.selected else " "
    print(f" {flag} teacher {tid} (holds {clients[tid].local_classes}) noise probe {np.round(probe.avg_probs, 2)}")

pre = metrics.per_class_accuracy(models[student], ds.test.x, ds.test.y)
post = metrics.per_class_accuracy(res.model, ds.test.x, ds.test.y)
for c in sorted(pre):
    print(f"class {c}: {pre[c]:.2f} -> {post[c]:.2f}")
print("communication rounds:", res.comm_rounds)
