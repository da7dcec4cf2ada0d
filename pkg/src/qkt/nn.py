"""Dense ReLU classifier with hand-written backprop, Adam and checkpoints.

A model is a stack of dense layers. Layers ``[0, split_index)`` form the
feature extractor, layers ``[split_index, n_layers)`` the classification
head. All arrays are float64 and models are treated as immutable values:
every update returns a new :class:`ModelParams`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

LOG_FLOOR = np.log(1e-12)


class NumericalError(FloatingPointError):
    """Raised when a forward pass produces non-finite activations."""

    def __init__(self, layer: int, message: str = "non-finite activations"):
        super().__init__(f"{message} at layer {layer}")
        self.layer = layer


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass(frozen=True)
class ModelParams:
    layers: tuple[Dense, ...]
    split_index: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ValueError(f"layer {i}: bias does not match weight columns")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ValueError(f"layer {i}: input dim does not match previous output")
        if not 0 <= self.split_index < len(self.layers):
            raise ValueError("split_index must leave at least the last layer in the head")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def head(self) -> tuple[Dense, ...]:
        return self.layers[self.split_index:]

    @property
    def extractor(self) -> tuple[Dense, ...]:
        return self.layers[: self.split_index]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("wrong number of arrays")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ValueError(f"shape mismatch in layer {i}")
            layers.append(Dense(w, b))
        return ModelParams(tuple(layers), self.split_index)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return self.with_arrays([fn(a) for a in self.arrays()])

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(
    input_dim: int,
    num_classes: int,
    hidden: Sequence[int] = (64, 32),
    rng: np.random.Generator | int | None = 0,
    split_index: int | None = None,
) -> ModelParams:
    """ReLU network, He-uniform hidden layers and a smaller logit layer.

    Hidden weights are U(-sqrt(6/fan_in), sqrt(6/fan_in)), the gain that
    offsets the ReLU that follows them. The logit layer has no ReLU and uses
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)), which keeps an untrained network's
    outputs close to uniform. Biases start at zero; the head defaults to the
    last layer.
    """
    rng = np.random.default_rng(rng)
    dims = [input_dim, *hidden, num_classes]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        limit = 1.0 / np.sqrt(fan_in) if last else np.sqrt(6.0 / fan_in)
        layers.append(Dense(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out)))
    if split_index is None:
        split_index = len(layers) - 1
    return ModelParams(tuple(layers), split_index)


def zeros_like(model: ModelParams) -> ModelParams:
    return model.map(np.zeros_like)


def trainable_mask(model: ModelParams) -> ModelParams:
    """FreezeMask with every parameter trainable."""
    return model.map(lambda a: np.ones_like(a, dtype=bool))


def head_only_mask(model: ModelParams) -> ModelParams:
    """FreezeMask that freezes the whole feature extractor."""
    arrays = []
    for i, layer in enumerate(model.layers):
        flag = i >= model.split_index
        arrays.append(np.full(layer.weight.shape, flag))
        arrays.append(np.full(layer.bias.shape, flag))
    return model.with_arrays(arrays)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Forward(NamedTuple):
    features: np.ndarray
    probs: np.ndarray
    logits: np.ndarray
    activations: list  # inputs to each layer, kept for backprop


def forward(model: ModelParams, x: np.ndarray, temperature: float = 1.0) -> Forward:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs of shape (n, {model.input_dim}), got {x.shape}")
    acts = [x]
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        with np.errstate(invalid="ignore", over="ignore"):
            z = h @ layer.weight + layer.bias
        if not np.all(np.isfinite(z)):
            raise NumericalError(i)
        h = z if i == last else np.maximum(z, 0.0)
        if i != last:
            acts.append(h)
    logits = h
    return Forward(acts[model.split_index], softmax(logits, temperature), logits, acts)


def predict_proba(model: ModelParams, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return forward(model, x, temperature).probs


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(model, x).logits.argmax(axis=1)


def backward(
    model: ModelParams, fwd: Forward, dlogits: np.ndarray, freeze: ModelParams | None = None
) -> ModelParams:
    """Backpropagate ``dL/dlogits`` (already averaged over the batch)."""
    grads = [None] * (2 * len(model.layers))
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        a_in = fwd.activations[i]
        grads[2 * i] = a_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            # the input to layer i is relu output; its derivative is (a > 0)
            delta = (delta @ model.layers[i].weight.T) * (a_in > 0)
    out = model.with_arrays(grads)
    if freeze is not None:
        out = apply_freeze(out, freeze)
    return out


def apply_freeze(grads: ModelParams, freeze: ModelParams) -> ModelParams:
    return grads.with_arrays(
        [np.where(m, g, 0.0) for g, m in zip(grads.arrays(), freeze.arrays())]
    )


def soft_target_dlogits(
    logp: np.ndarray, probs: np.ndarray, weights: np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    """Gradient of ``-sum_j weights[j] * max(log p[j], LOG_FLOOR)`` per row w.r.t. logits.

    ``logp``/``probs`` are the student's log-probabilities and probabilities at
    ``temperature``. Clamped entries carry no gradient.
    """
    w = np.where(logp > LOG_FLOOR, weights, 0.0)
    return (w.sum(axis=1, keepdims=True) * probs - w) / temperature


def _check_batch(x, y):
    if len(x) == 0:
        raise ValueError("empty batch")
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample ``-log p[y]``."""
    return -log_softmax(logits)[np.arange(len(y)), y]


def supervised_loss_and_grads(model, x, y, freeze=None):
    """Mean cross-entropy and its exact gradient. Returns ``(loss, grads)``."""
    x, y = _check_batch(x, y)
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("labels out of range")
    fwd = forward(model, x)
    n = len(y)
    loss = float(cross_entropy(fwd.logits, y).mean())
    dlogits = fwd.probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, backward(model, fwd, dlogits / n, freeze)


@dataclass
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 4e-4

    @classmethod
    def for_model(cls, model: ModelParams, **hyper) -> "AdamState":
        return cls(zeros_like(model), zeros_like(model), **hyper)


def adam_step(
    model: ModelParams, grads: ModelParams, state: AdamState, freeze: ModelParams | None = None
) -> tuple[ModelParams, AdamState]:
    """One Adam update with L2 weight decay folded into the gradient.

    Frozen entries keep their exact values (and their moments stay untouched).
    """
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    params, ms, vs = [], [], []
    masks = freeze.arrays() if freeze is not None else [None] * len(model.arrays())
    for w, g, m, v, mask in zip(
        model.arrays(), grads.arrays(), state.first_moment.arrays(),
        state.second_moment.arrays(), masks,
    ):
        if w.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        g = g + state.weight_decay * w
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        m_hat = m_new / (1 - b1**t)
        v_hat = v_new / (1 - b2**t)
        w_new = w - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if mask is not None:
            w_new = np.where(mask, w_new, w)
            m_new = np.where(mask, m_new, m)
            v_new = np.where(mask, v_new, v)
        params.append(w_new)
        ms.append(m_new)
        vs.append(v_new)
    new_state = AdamState(
        model.with_arrays(ms), model.with_arrays(vs), t,
        state.learning_rate, state.beta1, state.beta2, state.epsilon, state.weight_decay,
    )
    return model.with_arrays(params), new_state


def gradient_check(loss_and_grads, model: ModelParams, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max element-wise relative error between analytic and central-difference gradients.

    ``loss_and_grads(model) -> (loss, grads)``. The relative error uses
    ``|a - n| / max(|a|, |n|, floor)`` so near-zero entries compare absolutely.
    """
    _, grads = loss_and_grads(model)
    arrays = [a.copy() for a in model.arrays()]
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = grads.arrays()[k]
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            plus, _ = loss_and_grads(model.with_arrays(arrays))
            a[idx] = orig - step
            minus, _ = loss_and_grads(model.with_arrays(arrays))
            a[idx] = orig
            numeric = (plus - minus) / (2 * step)
            denom = max(abs(analytic[idx]), abs(numeric), floor)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst


def replace_head(model: ModelParams, saved_head: Sequence[Dense]) -> ModelParams:
    saved_head = tuple(saved_head)
    current = model.head
    if len(saved_head) != len(current):
        raise ValueError("saved head has a different number of layers")
    for new, old in zip(saved_head, current):
        if new.weight.shape != old.weight.shape or new.bias.shape != old.bias.shape:
            raise ValueError("saved head shape does not match the model")
    return ModelParams(model.extractor + saved_head, model.split_index)


def copy_head(model: ModelParams) -> tuple[Dense, ...]:
    return tuple(Dense(l.weight.copy(), l.bias.copy()) for l in model.head)


# Checkpoint layout (all little-endian):
#   b"QKTM" | u32 version | u32 n_layers | u32 split_index
#   n_layers * (u32 in_dim, u32 out_dim)
#   per layer: weight as in_dim*out_dim f64 row-major, then bias as out_dim f64
MAGIC = b"QKTM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_DIMS = struct.Struct("<II")


def save_checkpoint(model: ModelParams) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(model.layers), model.split_index)]
    for layer in model.layers:
        parts.append(_DIMS.pack(*layer.weight.shape))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes) -> ModelParams:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, n_layers, split = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("bad magic")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = _HEADER.size
    if len(data) < offset + n_layers * _DIMS.size:
        raise CheckpointError("truncated layer table")
    dims = []
    for _ in range(n_layers):
        dims.append(_DIMS.unpack_from(data, offset))
        offset += _DIMS.size
    expected = offset + 8 * sum(i * o + o for i, o in dims)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
    layers = []
    for fan_in, fan_out in dims:
        w = np.frombuffer(data, "<f8", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, "<f8", fan_out, offset)
        offset += 8 * fan_out
        layers.append(Dense(w.astype(np.float64), b.astype(np.float64)))
    try:
        return ModelParams(tuple(layers), split)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def fit(
    model: ModelParams,
    n_samples: int,
    batch_loss,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    freeze: ModelParams | None = None,
    state: AdamState | None = None,
    on_epoch=None,
) -> tuple[ModelParams, AdamState]:
    """Shuffled minibatch Adam training.

    ``batch_loss(model, idx) -> (loss, grads)`` evaluates one minibatch given
    sample indices. ``on_epoch(epoch, model, mean_loss)`` may return True to stop.
    """
    if n_samples == 0:
        raise ValueError("no training samples")
    state = state or AdamState.for_model(model)
    for epoch in range(epochs):
        order = rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, batch_size):
            loss, grads = batch_loss(model, order[start : start + batch_size])
            model, state = adam_step(model, grads, state, freeze)
            losses.append(loss)
        if on_epoch is not None and on_epoch(epoch, model, float(np.mean(losses))):
            break
    return model, state


def train_supervised(model, x, y, epochs, rng, batch_size=32, freeze=None, state=None, on_epoch=None):
    def batch_loss(m, idx):
        return supervised_loss_and_grads(m, x[idx], y[idx], freeze)

    return fit(model, len(y), batch_loss, epochs, rng, batch_size, freeze, state, on_epoch)


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of every parameter array."""
    return a.split_index == b.split_index and all(
        x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays())
    )
