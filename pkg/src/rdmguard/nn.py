"""Small dense feed-forward classifier trained with mini-batch SGD.

Hidden layers use tanh, the output layer is a softmax. Models are treated as
immutable values: every operation returns a new :class:`MlpModel`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ShapeError

if TYPE_CHECKING:
    from .data import LabeledDataset

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights are stored as (fan_out, fan_in) matrices, one per layer."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ShapeError("need at least an input and an output dimension")
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ShapeError("one weight matrix and one bias vector per layer expected")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i + 1], dims[i]):
                raise ShapeError(f"weights[{i}] has shape {w.shape}, expected {(dims[i + 1], dims[i])}")
            if b.shape != (dims[i + 1],):
                raise ShapeError(f"biases[{i}] has length {b.shape[0]}, expected {dims[i + 1]}")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> np.ndarray:
        """All parameters as one flat vector (layer by layer, weights then bias)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_params(self, vec: np.ndarray) -> "MlpModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"parameter vector has shape {vec.shape}, expected ({self.n_params},)")
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(vec[pos:pos + b.size])
            pos += b.size
        return MlpModel(self.layer_dims, tuple(weights), tuple(biases))

    def same_weights(self, other: "MlpModel") -> bool:
        """Bitwise equality of every parameter."""
        return self.layer_dims == other.layer_dims and np.array_equal(self.params(), other.params())


def init_model(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(tuple(dims), tuple(weights), tuple(biases))


def zeros_model(layer_dims: Sequence[int]) -> MlpModel:
    dims = [int(d) for d in layer_dims]
    return MlpModel(
        tuple(dims),
        tuple(np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])),
        tuple(np.zeros(o) for o in dims[1:]),
    )


def _check_inputs(model: MlpModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs have shape {x.shape}, model expects {model.input_dim} columns")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activations(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if i == last else np.tanh(z))
    return acts


def logits(model: MlpModel, inputs) -> np.ndarray:
    """Pre-softmax output scores, shape (batch, m)."""
    return _activations(model, _check_inputs(model, inputs))[-1]


def forward(model: MlpModel, inputs) -> np.ndarray:
    """Class probabilities, shape (batch, m); every row sums to one."""
    return softmax(logits(model, inputs))


def predict(model: MlpModel, inputs) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(logits(model, inputs), axis=1)


def cross_entropy(probabilities, labels) -> float:
    """Mean negative log-likelihood of the true labels.

    Probabilities at the true label are clamped from below at ``PROB_FLOOR``
    so that a zero never produces an infinite or NaN loss.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ShapeError(f"probabilities {p.shape} do not match {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("labels out of range")
    picked = np.maximum(p[np.arange(y.size), y], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def loss_and_gradients(model: MlpModel, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient as a flat vector aligned with ``params()``."""
    x = _check_inputs(model, inputs)
    y = np.asarray(labels, dtype=np.int64)
    acts = _activations(model, x)
    probs = softmax(acts[-1])
    loss = cross_entropy(probs, y)

    n = x.shape[0]
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads_w: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (1.0 - acts[i] ** 2)

    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return loss, np.concatenate(parts)


def train_local(
    model: MlpModel,
    data: "LabeledDataset",
    cfg: TrainConfig,
    *,
    epochs: int | None = None,
    anchor: np.ndarray | None = None,
    anchor_weight: float = 0.0,
) -> MlpModel:
    """Mini-batch SGD on ``data`` starting from ``model``.

    Batches come from a fresh permutation per epoch drawn from ``cfg.seed``,
    so two runs with the same seed produce identical weights.

    ``anchor``/``anchor_weight`` add ``anchor_weight * ||params - anchor||_2``
    to the objective; the stealthy attack uses this to stay close to a
    reference update.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.dim != model.input_dim:
        raise ShapeError(f"data has {data.dim} features, model expects {model.input_dim}")
    if data.labels.max() >= model.class_count:
        raise ValueError("labels exceed the model's class count")
    n_epochs = cfg.epochs if epochs is None else epochs
    if n_epochs == 0:
        return model

    rng = np.random.default_rng(cfg.seed)
    params = model.params().copy()
    x, y = data.features, data.labels
    n = len(data)
    current = model
    for _ in range(n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad = loss_and_gradients(current, x[idx], y[idx])
            if anchor is not None and anchor_weight > 0:
                diff = params - anchor
                norm = np.linalg.norm(diff)
                if norm > 0:
                    grad = grad + anchor_weight * diff / norm
            params -= cfg.learning_rate * grad
            current = model.with_params(params.copy())
    if not np.all(np.isfinite(params)):
        raise FloatingPointError("training diverged to non-finite weights")
    return current


def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    """Write ``model`` as JSON; float repr gives an exact round trip."""
    Path(path).write_text(json.dumps(checkpoint_dict(model)))


def checkpoint_dict(model: MlpModel) -> dict:
    return {
        "layer_dims": list(model.layer_dims),
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def load_checkpoint(path: str | Path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def model_from_dict(obj: dict) -> MlpModel:
    dims = [int(d) for d in obj["layer_dims"]]
    weights = [
        np.asarray(w, dtype=np.float64).reshape(o, i)
        for w, i, o in zip(obj["weights"], dims[:-1], dims[1:])
    ]
    return MlpModel(tuple(dims), tuple(weights), tuple(np.asarray(b, dtype=np.float64) for b in obj["biases"]))
