"""Multi-round FedAvg against one-shot transfer on the same federation.

    python demos/baselines.py
"""
import tempfile
from dataclasses import replace

from qkt import config, harness

cfg = config.from_dict({
    "seeds": [0, 1],
    "dataset": {"num_classes": 10, "dims": 20, "per_class": 400, "test_per_class": 100},
    "partition": {"num_clients": 10, "classes_per_client": 3},
    "pretrain": {"max_epochs": 40, "patience": 5},
    "protocols": [
        {"protocol": "qkt", "epochs": 15, "phase2_epochs": 2},
        {"protocol": "fedavg", "rounds": 10, "local_epochs": 2},
        {"protocol": "ft_fedavg", "rounds": 10, "local_epochs": 2},
        {"protocol": "fedavg1", "local_epochs": 2},
        "ensemble",
    ],
})
records = harness.run_experiment(replace(cfg, output_dir=tempfile.mkdtemp(prefix="qkt-")))
print(harness.summary_table(harness.report(records, ("method",))))
