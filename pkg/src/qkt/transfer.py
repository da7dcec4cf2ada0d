"""Query-based knowledge transfer between peer classifiers.

The student distils from peer (teacher) models on its own training data.
Teachers are first probed with Gaussian noise to estimate which classes they
know; only teachers confident on a queried class are kept, and each one's
contribution is masked per class (``lam`` on queried classes, 1 on the
student's own classes, 0 elsewhere). Training then runs in two phases: the
whole network, then only the restored original head on a frozen extractor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .data import ClientDataset, QuerySpec
from .seeding import seed_sequence

log = logging.getLogger(__name__)

PROTOCOLS = ("naive_kd", "kd_tq", "kd_tq_mask", "qkt", "qkt_light")
# kd_tq and kd_tq_mask are the component-ablation variants: selected teachers
# without masks, and selected teachers with masks, both single-phase.


class NoCompetentTeacherError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherProbe:
    teacher_id: int
    avg_probs: np.ndarray
    num_samples: int
    seed: int | None = None


@dataclass(frozen=True)
class TeacherMask:
    teacher_id: int
    mask: np.ndarray
    selected: bool = True


@dataclass(frozen=True)
class TransferConfig:
    protocol: str = "qkt"
    tau: float = 0.01
    lam: float = 1.5
    alpha_kd: float = 1.0
    temperature: float = 1.0
    epochs: int = 25
    phase2_epochs: int | None = None  # None: same as epochs (qkt) or 5 (qkt_light)
    probe_samples: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 4e-4
    selective_mask_z: float | None = None
    light_variant: str = "local"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not 0 <= self.tau < 1:
            raise ConfigError("tau must lie in [0, 1)")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.epochs < 0 or (self.phase2_epochs is not None and self.phase2_epochs < 0):
            raise ConfigError("epoch counts must be non-negative")
        if self.probe_samples < 1:
            raise ConfigError("probe_samples must be >= 1")
        if self.selective_mask_z is not None and not 0 <= self.selective_mask_z <= 100:
            raise ConfigError("selective_mask_z must lie in [0, 100]")
        if self.light_variant != "local":
            raise ConfigError(
                f"qkt_light variant {self.light_variant!r} is not supported; only the "
                "per-client 'local' variant (each student runs phase 1 itself) is implemented"
            )

    @property
    def effective_phase2_epochs(self) -> int:
        if self.phase2_epochs is not None:
            return self.phase2_epochs
        return 5 if self.protocol == "qkt_light" else self.epochs

    def adam(self, model: nn.ModelParams) -> nn.AdamState:
        return nn.AdamState.for_model(
            model, learning_rate=self.learning_rate, weight_decay=self.weight_decay
        )


def probe_teacher(teacher: nn.ModelParams, num_samples: int = 20, seed=0, teacher_id: int = -1) -> TeacherProbe:
    """Average softmax output of ``teacher`` over standard-normal inputs."""
    if num_samples < 1:
        raise ValueError("need at least one noise sample")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((num_samples, teacher.input_dim))
    avg = nn.predict_proba(teacher, noise).mean(axis=0)
    return TeacherProbe(teacher_id, avg, num_samples, seed if isinstance(seed, int) else None)


def select_teachers(probes: Sequence[TeacherProbe], query: Sequence[int], tau: float) -> list[int]:
    query = list(query)
    chosen = [p.teacher_id for p in probes if np.any(p.avg_probs[query] >= tau)]
    if not chosen:
        raise NoCompetentTeacherError(
            f"no teacher reaches probability {tau} on any of the query classes {query}"
        )
    return chosen


def build_mask(teacher_id: int, query: Sequence[int], local_classes: Sequence[int], lam: float, num_classes: int) -> TeacherMask:
    mask = np.zeros(num_classes)
    mask[list(local_classes)] = 1.0
    mask[list(query)] = lam  # query wins over local membership
    return TeacherMask(teacher_id, mask)


def distill_loss_and_grads(
    student: nn.ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    teacher_probs: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None,
    alpha_kd: float = 1.0,
    temperature: float = 1.0,
    freeze: nn.ModelParams | None = None,
    divergence: str = "kl",
):
    """Cross-entropy plus masked teacher-student divergence, averaged over the batch.

    ``teacher_probs[t]`` holds teacher t's (softened) probabilities on ``x``.
    With ``divergence="kl"`` each masked entry is ``p_t (log p_t - log p_s)``;
    with ``"ce"`` it is ``-p_t log p_s``. Both give the same gradients.
    Returns ``(loss, grads)``.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    fwd = nn.forward(student, x)
    n, c = fwd.logits.shape
    loss_terms = nn.cross_entropy(fwd.logits, y)
    dlogits = fwd.probs.copy()
    dlogits[np.arange(n), y] -= 1.0

    if len(teacher_probs):
        if masks is None:
            masks = [np.ones(c)] * len(teacher_probs)
        logp_s = nn.log_softmax(fwd.logits, temperature)
        logp_s_clamped = np.maximum(logp_s, nn.LOG_FLOOR)
        p_s = np.exp(logp_s)
        weights = np.zeros((n, c))
        div = np.zeros(n)
        for p_t, m in zip(teacher_probs, masks):
            p_t = np.asarray(p_t)
            if divergence == "kl":
                elem = _xlogx(p_t) - p_t * logp_s_clamped
            elif divergence == "ce":
                elem = -p_t * logp_s_clamped
            else:
                raise ValueError(f"unknown divergence {divergence!r}")
            div += elem @ m
            weights += p_t * m
        loss_terms = loss_terms + alpha_kd * div
        dlogits += alpha_kd * nn.soft_target_dlogits(logp_s, p_s, weights, temperature)

    loss = float(loss_terms.mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite distillation loss")
    return loss, nn.backward(student, fwd, dlogits / n, freeze)


def _xlogx(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def teacher_outputs(teachers: Sequence[nn.ModelParams], x: np.ndarray, temperature: float = 1.0) -> list[np.ndarray]:
    return [nn.predict_proba(t, x, temperature) for t in teachers]


def qkd_loss_and_grads(
    student, teachers, masks, x, y, alpha_kd=1.0, temperature=1.0, freeze=None, divergence="kl"
):
    """Masked query distillation loss over the selected teachers only."""
    if not len(teachers):
        raise NoCompetentTeacherError("masked distillation needs at least one selected teacher")
    masks = [m.mask if isinstance(m, TeacherMask) else np.asarray(m) for m in masks]
    probs = teacher_outputs(teachers, x, temperature)
    return distill_loss_and_grads(student, x, y, probs, masks, alpha_kd, temperature, freeze, divergence)


def naive_kd_loss_and_grads(student, teachers, x, y, alpha_kd=1.0, temperature=1.0, freeze=None):
    """Cross-entropy plus unmasked KL summed over every teacher (none allowed)."""
    probs = teacher_outputs(teachers, x, temperature)
    return distill_loss_and_grads(student, x, y, probs, None, alpha_kd, temperature, freeze)


@dataclass
class TransferLog:
    """Audit trail of one transfer run."""

    events: list = field(default_factory=list)

    def add(self, kind: str, **fields):
        self.events.append({"event": kind, **fields})
        log.debug("%s %s", kind, fields)

    def epoch_losses(self, phase: int) -> list[float]:
        return [e["loss"] for e in self.events if e["event"] == "epoch" and e["phase"] == phase]


def _train_distill(student, data_x, data_y, teacher_probs, masks, config, epochs, rng, freeze, tlog, phase):
    def batch_loss(model, idx):
        return distill_loss_and_grads(
            model, data_x[idx], data_y[idx], [p[idx] for p in teacher_probs], masks,
            config.alpha_kd, config.temperature, freeze,
        )

    def on_epoch(epoch, model, loss):
        tlog.add("epoch", phase=phase, epoch=epoch, loss=loss)

    if epochs == 0:
        return student
    model, _ = nn.fit(
        student, len(data_y), batch_loss, epochs, rng, config.batch_size, freeze,
        config.adam(student), on_epoch,
    )
    return model


def run_phase1(student, teacher_probs, masks, config: TransferConfig, data_x, data_y, rng, tlog=None):
    """Train every parameter; returns ``(trained, saved_head)`` where the head copy predates training."""
    tlog = tlog if tlog is not None else TransferLog()
    saved_head = nn.copy_head(student)
    tlog.add("phase_start", phase=1, epochs=config.epochs)
    trained = _train_distill(
        student, data_x, data_y, teacher_probs, masks, config, config.epochs, rng, None, tlog, 1
    )
    tlog.add("phase_end", phase=1)
    return trained, saved_head


def selective_weight_mask(student: nn.ModelParams, x, y, z_percent: float, batch_size: int = 32) -> nn.ModelParams:
    """Freeze flags marking the top ``z_percent`` most important head weights.

    Importance of a head parameter is the root-mean-square over the student's
    training minibatches of its cross-entropy gradient. Returned as a full
    FreezeMask: extractor frozen, important head entries frozen, rest trainable.
    """
    if not 0 <= z_percent <= 100:
        raise ValueError("z_percent must lie in [0, 100]")
    head_ids = range(2 * student.split_index, 2 * len(student.layers))
    sq = [np.zeros_like(student.arrays()[k]) for k in head_ids]
    n_batches = 0
    for start in range(0, len(y), batch_size):
        _, g = nn.supervised_loss_and_grads(student, x[start : start + batch_size], y[start : start + batch_size])
        for acc, k in zip(sq, head_ids):
            acc += g.arrays()[k] ** 2
        n_batches += 1
    scores = np.concatenate([np.sqrt(a / n_batches).ravel() for a in sq])
    k_frozen = int(round(z_percent / 100.0 * scores.size))
    frozen = np.zeros(scores.size, bool)
    if k_frozen:
        # stable sort so ties resolve by position and the mask is deterministic
        frozen[np.argsort(-scores, kind="stable")[:k_frozen]] = True
    base = nn.head_only_mask(student).arrays()
    pos = 0
    for k in head_ids:
        size = base[k].size
        base[k] = base[k] & ~frozen[pos : pos + size].reshape(base[k].shape)
        pos += size
    return student.with_arrays(base)


def run_phase2(student, saved_head, teacher_probs, masks, config: TransferConfig, data_x, data_y, rng, tlog=None):
    """Restore the saved head, freeze the extractor and refine the head."""
    tlog = tlog if tlog is not None else TransferLog()
    model = nn.replace_head(student, saved_head)
    if config.selective_mask_z is not None:
        freeze = selective_weight_mask(model, data_x, data_y, config.selective_mask_z, config.batch_size)
    else:
        freeze = nn.head_only_mask(model)
    epochs = config.effective_phase2_epochs
    tlog.add("phase_start", phase=2, epochs=epochs)
    refined = _train_distill(model, data_x, data_y, teacher_probs, masks, config, epochs, rng, freeze, tlog, 2)
    n_ext = 2 * student.split_index
    unchanged = all(
        a.tobytes() == b.tobytes() for a, b in zip(student.arrays()[:n_ext], refined.arrays()[:n_ext])
    )
    head_delta = max(
        float(np.abs(a - b).max()) for a, b in zip(model.arrays()[n_ext:], refined.arrays()[n_ext:])
    )
    tlog.add("phase_end", phase=2, extractor_unchanged=unchanged, head_delta=head_delta)
    if not unchanged:
        raise AssertionError("feature extractor changed during phase 2")
    return refined


@dataclass
class TransferResult:
    model: nn.ModelParams
    protocol: str
    comm_rounds: int
    selected: list[int]
    masks: dict[int, np.ndarray]
    probes: dict[int, TeacherProbe]
    log: TransferLog
    phase1_model: nn.ModelParams | None = None
    phase1_teachers: list[int] = field(default_factory=list)
    phase1_masked: bool = False


def run_protocol(
    student: nn.ModelParams,
    student_data: ClientDataset,
    teachers: Mapping[int, nn.ModelParams],
    query: QuerySpec | Sequence[int],
    config: TransferConfig,
    seed=0,
) -> TransferResult:
    """Run one transfer job for ``student`` against all peers in ``teachers``.

    ``seed`` feeds two independent streams: noise probing and training order.
    Every protocol receives each peer's weights once, so the round count is 1.
    """
    q = tuple(query.query_classes if isinstance(query, QuerySpec) else query)
    probe_ss, train_ss = seed_sequence(seed).spawn(2)
    train_rng = np.random.default_rng(train_ss)
    tlog = TransferLog()
    tlog.add("job", protocol=config.protocol, query=list(q), student=student_data.client_id)

    train = student_data.train
    x, y = train.x, train.y
    local = [c for c in student_data.local_classes if c not in q]
    ids = sorted(teachers)
    all_probs = dict(zip(ids, teacher_outputs([teachers[i] for i in ids], x, config.temperature)))

    probes, selected, masks = {}, [], {}
    if config.protocol != "naive_kd":
        probe_seeds = probe_ss.spawn(len(ids))
        for tid, pss in zip(ids, probe_seeds):
            probes[tid] = probe_teacher(teachers[tid], config.probe_samples, np.random.default_rng(pss), tid)
        selected = select_teachers(list(probes.values()), q, config.tau)
        for tid in selected:
            masks[tid] = build_mask(tid, q, local, config.lam, student.num_classes).mask
        tlog.add("selection", selected=selected, probes={t: p.avg_probs.tolist() for t, p in probes.items()})
        tlog.add("masks", masks={t: m.tolist() for t, m in masks.items()})

    proto = config.protocol
    if proto in ("naive_kd", "qkt_light"):
        p1_ids, p1_masks = ids, None
    elif proto == "kd_tq":
        p1_ids, p1_masks = selected, None
    else:
        p1_ids, p1_masks = selected, [masks[t] for t in selected]
    tlog.add("phase1_setup", teachers=p1_ids, masked=p1_masks is not None)

    phase1, saved_head = run_phase1(
        student, [all_probs[t] for t in p1_ids], p1_masks, config, x, y, train_rng, tlog
    )
    final = phase1
    if proto in ("qkt", "qkt_light"):
        final = run_phase2(
            phase1, saved_head, [all_probs[t] for t in selected], [masks[t] for t in selected],
            config, x, y, train_rng, tlog,
        )
    return TransferResult(
        final, proto, 1, selected, masks, probes, tlog, phase1, list(p1_ids), p1_masks is not None
    )
