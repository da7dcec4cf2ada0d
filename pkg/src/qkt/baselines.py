"""FedAvg, FedAvg(1), fine-tuned FedAvg and prediction-averaging ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .data import ClientDataset
from .seeding import seed_sequence

BASELINES = ("fedavg", "fedavg1", "ft_fedavg", "ensemble")


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    local_epochs: int = 2
    finetune_epochs: int | None = None  # None: 2 * local_epochs
    participants: tuple[int, ...] | None = None  # None: every client
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 4e-4

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")

    @property
    def effective_finetune_epochs(self) -> int:
        return 2 * self.local_epochs if self.finetune_epochs is None else self.finetune_epochs


@dataclass
class FedResult:
    model: nn.ModelParams
    comm_rounds: int
    round_losses: list[float] = field(default_factory=list)
    client_models: list[nn.ModelParams] | None = None


def weighted_average(models: Sequence[nn.ModelParams], weights: Sequence[float]) -> nn.ModelParams:
    """Parameter-wise mean of ``models`` weighted by ``weights``."""
    if not models:
        raise ValueError("nothing to average")
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    arrays = [
        sum(wi * a for wi, a in zip(w, group))
        for group in zip(*(m.arrays() for m in models))
    ]
    return models[0].with_arrays(arrays)


def fedavg(
    clients: Sequence[ClientDataset],
    config: FedConfig,
    init: nn.ModelParams,
    seed=0,
) -> FedResult:
    """Size-weighted FedAvg with full (or fixed-subset) participation.

    Each client keeps its own Adam state and shuffling stream across rounds,
    so with a single client this is exactly ``rounds * local_epochs`` epochs
    of plain local training.
    """
    ids = list(config.participants) if config.participants is not None else list(range(len(clients)))
    streams = seed_sequence(seed).spawn(len(clients))
    rngs = {i: np.random.default_rng(streams[i]) for i in ids}
    states = {
        i: nn.AdamState.for_model(init, learning_rate=config.learning_rate, weight_decay=config.weight_decay)
        for i in ids
    }
    sizes = [len(clients[i].train_idx) for i in ids]
    global_model = init
    round_losses = []
    for _ in range(config.rounds):
        local_models, losses = [], []
        for i in ids:
            train = clients[i].train

            def record(epoch, model, loss):
                losses.append(loss)

            model, states[i] = nn.train_supervised(
                global_model, train.x, train.y, config.local_epochs, rngs[i],
                config.batch_size, None, states[i], record,
            )
            local_models.append(model)
        global_model = weighted_average(local_models, sizes)
        round_losses.append(float(np.mean(losses)) if losses else float("nan"))
    return FedResult(global_model, config.rounds, round_losses)


def fedavg_one_round(clients, config: FedConfig, init, seed=0) -> FedResult:
    """FedAvg(1): a single round of FedAvg."""
    return fedavg(clients, replace(config, rounds=1), init, seed)


def ft_fedavg(clients, config: FedConfig, init, seed=0) -> FedResult:
    """FedAvg followed by per-client local fine-tuning; adds no communication."""
    fed_ss, ft_ss = seed_sequence(seed).spawn(2)
    result = fedavg(clients, config, init, fed_ss)
    personal = []
    for client, ss in zip(clients, ft_ss.spawn(len(clients))):
        state = nn.AdamState.for_model(
            result.model, learning_rate=config.learning_rate, weight_decay=config.weight_decay
        )
        train = client.train
        model, _ = nn.train_supervised(
            result.model, train.x, train.y, config.effective_finetune_epochs,
            np.random.default_rng(ss), config.batch_size, None, state,
        )
        personal.append(model)
    result.client_models = personal
    return result


def ensemble_predict(models: Sequence[nn.ModelParams], x: np.ndarray) -> np.ndarray:
    """Mean of the members' softmax outputs."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    return np.mean([nn.predict_proba(m, x) for m in models], axis=0)


def ensemble_classifier(models: Sequence[nn.ModelParams]):
    models = list(models)
    return lambda x: ensemble_predict(models, x).argmax(axis=1)
