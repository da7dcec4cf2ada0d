"""How much a peer's class support leaks through pure-noise inputs.

Pretrains the clients of the ablation scenario for one seed and compares
each client's averaged softmax on Gaussian noise with its real label
histogram.

    python demos/probe.py
"""
from pathlib import Path

import numpy as np

from qkt import config, harness, metrics, transfer

cfg = config.load(Path(__file__).resolve().parents[1] / "configs" / "ablation.yaml")
seed = 0
ds = harness.build_dataset(cfg, seed)
clients = harness.build_clients(cfg, ds, seed)
models = harness.pretrain_all(cfg, clients, seed)

np.set_printoptions(precision=2, suppress=True)
for client, model in zip(clients, models):
    probe = transfer.probe_teacher(model, 20, seed=client.client_id)
    guessed = np.flatnonzero(probe.avg_probs >= 0.01).tolist()
    mse = metrics.probe_mse(probe.avg_probs, client.class_distribution())
    print(f"client {client.client_id}: holds {client.local_classes}, probe says {guessed}, MSE {mse:.4f}")
    print("   probe ", probe.avg_probs)
    print("   actual", client.class_distribution() / client.class_distribution().sum())
