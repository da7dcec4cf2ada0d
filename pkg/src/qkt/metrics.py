"""Per-class accuracy and the transfer metric suite."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn


def per_class_accuracy(model_or_predict, x: np.ndarray, y: np.ndarray) -> dict[int, float]:
    """Fraction of each present class predicted correctly.

    ``model_or_predict`` is a :class:`~qkt.nn.ModelParams` or a callable
    mapping inputs to predicted labels. Classes without test samples are
    left out of the result.
    """
    if len(y) == 0:
        raise ValueError("empty test set")
    if isinstance(model_or_predict, nn.ModelParams):
        pred = nn.predict(model_or_predict, x)
    else:
        pred = np.asarray(model_or_predict(x))
    y = np.asarray(y)
    return {int(c): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}


def class_weights(local_counts: Mapping[int, int], query: Sequence[int]) -> dict[int, float]:
    """Local classes weighted by their training share, query classes by 1.

    A class that is both local and queried counts once with weight 1.
    """
    total = sum(n for n in local_counts.values() if n > 0)
    w = {int(c): n / total for c, n in local_counts.items() if n > 0} if total else {}
    for q in query:
        w[int(q)] = 1.0
    return w


def average_accuracy(per_class: Mapping[int, float], local_counts: Mapping[int, int], query: Sequence[int]) -> float:
    w = class_weights(local_counts, query)
    if not w:
        raise ValueError("no local or query classes to average over")
    num = sum(wj * per_class[j] for j, wj in w.items())
    return num / sum(w.values())


def query_acc_gain(pre: Mapping[int, float], post: Mapping[int, float], query: Sequence[int]) -> float:
    return float(np.mean([post[q] - pre[q] for q in query]))


def forgetting(pre: Mapping[int, float], post: Mapping[int, float], local_classes: Sequence[int]) -> float:
    """Mean over local classes of ``min(0, post - pre)``; never positive."""
    if not len(local_classes):
        return 0.0
    return sum(min(0.0, post[j] - pre[j]) for j in local_classes) / len(local_classes)


def uniform_accuracy(per_class: Mapping[int, float]) -> float:
    return float(np.mean(list(per_class.values())))


def probe_mse(avg_probs: np.ndarray, actual: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=float)
    actual = actual / actual.sum()
    return float(np.mean((np.asarray(avg_probs) - actual) ** 2))


@dataclass
class MetricsReport:
    client_id: int
    protocol: str
    seed: int
    query: list[int]
    local_classes: list[int]
    per_class_acc_pre: dict[int, float]
    per_class_acc_post: dict[int, float]
    weights: dict[int, float]
    avg_acc: float
    avg_acc_pre: float
    uniform_acc: float
    query_acc_gain: float
    forgetting: float
    comm_rounds: int
    tags: dict = field(default_factory=dict)
    method: str = ""  # configured entry name; defaults to the protocol

    CSV_COLUMNS = (
        "seed", "client", "method", "protocol", "tag", "query", "avg_acc", "avg_acc_pre",
        "query_acc_gain", "forgetting", "uniform_acc", "comm_rounds",
    )

    def csv_row(self) -> list:
        tag = ";".join(f"{k}={v}" for k, v in sorted(self.tags.items()))
        return [
            self.seed, self.client_id, self.method or self.protocol, self.protocol, tag,
            " ".join(map(str, self.query)),
            f"{self.avg_acc:.10f}", f"{self.avg_acc_pre:.10f}",
            f"{self.query_acc_gain:.10f}", f"{self.forgetting:.10f}",
            f"{self.uniform_acc:.10f}", self.comm_rounds,
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_transfer(
    pre_model, post_model, test_x, test_y, local_counts: Mapping[int, int], query: Sequence[int],
    client_id: int = -1, protocol: str = "", seed: int = 0, comm_rounds: int = 1, tags=None,
    pre_acc: Mapping[int, float] | None = None,
) -> MetricsReport:
    """Build a report from the student before and after transfer.

    Local classes exclude the queried ones, so a query class that the
    student holds a few samples of is scored as a query class only.
    """
    pre = dict(pre_acc) if pre_acc is not None else per_class_accuracy(pre_model, test_x, test_y)
    post = per_class_accuracy(post_model, test_x, test_y)
    query = sorted(int(q) for q in query)
    local = sorted(c for c, n in local_counts.items() if n > 0 and c not in query)
    return MetricsReport(
        client_id=client_id,
        protocol=protocol,
        seed=seed,
        query=query,
        local_classes=local,
        per_class_acc_pre=pre,
        per_class_acc_post=post,
        weights=class_weights(local_counts, query),
        avg_acc=average_accuracy(post, local_counts, query),
        avg_acc_pre=average_accuracy(pre, local_counts, query),
        uniform_acc=uniform_accuracy(post),
        query_acc_gain=query_acc_gain(pre, post, query),
        forgetting=forgetting(pre, post, local),
        comm_rounds=comm_rounds,
        tags=dict(tags or {}),
    )
