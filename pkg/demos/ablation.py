"""Component ablation: plain KD, teacher selection, masking, and the full method.

Runs ``configs/ablation.yaml`` (five seeds, a few minutes on one core) and
prints the seed-averaged summary table. Pass another config path to run
the lambda or selective-masking sweeps instead:

    python demos/ablation.py
    python demos/ablation.py configs/lambda.yaml
"""
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from qkt import config, harness

path = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "configs" / "ablation.yaml"
cfg = config.load(path)
out = tempfile.mkdtemp(prefix="qkt-")
records = harness.run_experiment(replace(cfg, output_dir=out))

rows = harness.records_to_rows(records)
local = [dict(r, method="local only", avg_acc=r["avg_acc_pre"]) for r in rows if r["method"] == rows[0]["method"]]
print(harness.summary_table(harness.summarize_rows(local + rows)))
print(f"\nfull outputs in {out}")
