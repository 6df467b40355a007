"""Bias-free MLP: forward pass from a given layer-1 pre-activation, backprop
down to the layer-1 error signal, SGD with a weight clamp, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGMOID = "sigmoid"
RELU = "relu"
SOFTMAX = "softmax"
CHECKPOINT_MAGIC = b"NNEMDCK1"


@dataclass
class Hyperparams:
    learning_rate_alpha: float = 0.5
    l2: float = 0.0
    batch_size: int = 32
    epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate_alpha >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class MlpModel:
    arch: tuple
    weights: list
    hidden_activation: str = SIGMOID
    output_activation: str = SOFTMAX
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.arch = tuple(int(n) for n in self.arch)
        if len(self.arch) < 2:
            raise ValueError("need at least an input and an output layer")
        if self.hidden_activation not in (SIGMOID, RELU):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation != SOFTMAX:
            raise ValueError("only softmax output is supported")
        if len(self.weights) != self.n_layers:
            raise ValueError("one weight matrix per layer expected")
        for l, W in enumerate(self.weights):
            if W.shape != (self.arch[l], self.arch[l + 1]):
                raise ValueError(f"layer {l + 1} weight shape {W.shape} does not chain")

    @property
    def n_layers(self) -> int:
        return len(self.arch) - 1

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.arch,
            [W.copy() for W in self.weights],
            self.hidden_activation,
            self.output_activation,
            self.seed,
            self.step,
        )


@dataclass
class BatchActivations:
    """Z[l], A[l] for l = 1..L (index 0 holds the input side, possibly None)."""

    Z: list
    A: list
    Y: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def n_real(self) -> int:
        return int(self.mask.sum()) if self.mask is not None else self.A[-1].shape[0]


def init_weights(arch, seed: int, hidden_activation: str = SIGMOID) -> MlpModel:
    """Uniform init in [-1/sqrt(n_in), 1/sqrt(n_in)], so every entry is <= 1."""
    rng = np.random.default_rng(seed)
    weights = []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        b = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-b, b, size=(n_in, n_out)))
    return MlpModel(tuple(arch), weights, hidden_activation, SOFTMAX, seed, 0)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _act(name, z):
    return sigmoid(z) if name == SIGMOID else np.maximum(z, 0.0)


def _act_deriv(name, z, a):
    return a * (1.0 - a) if name == SIGMOID else (z > 0).astype(np.float64)


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def feed_forward_from(A1_pre, model: MlpModel, Y=None, mask=None, A0=None) -> BatchActivations:
    A1_pre = np.asarray(A1_pre, dtype=np.float64)
    if A1_pre.ndim != 2 or A1_pre.shape[1] != model.arch[1]:
        raise ValueError(f"layer-1 pre-activation shape {A1_pre.shape} does not fit arch")
    L = model.n_layers
    Z = [None, A1_pre]
    A = [A0]
    for l in range(1, L + 1):
        if l > 1:
            Z.append(A[l - 1] @ model.weights[l - 1])
        A.append(softmax(Z[l]) if l == L else _act(model.hidden_activation, Z[l]))
    if mask is None:
        mask = np.ones(A1_pre.shape[0])
    return BatchActivations(Z, A, Y, np.asarray(mask, dtype=np.float64))


def forward(X, model: MlpModel) -> BatchActivations:
    """Plaintext pass from the raw input."""
    X = np.asarray(X, dtype=np.float64)
    return feed_forward_from(X @ model.weights[0], model, A0=X)


def gradients(acts: BatchActivations, model: MlpModel, l2: float = 0.0):
    """Return ``(grads, sigma)``; ``grads[0]`` is None since the layer-1 gradient
    needs X, which only the secure product sees.  Padded rows (mask 0) are
    excluded from the batch average."""
    if acts.Y is None:
        raise ValueError("labels required for gradients")
    L = model.n_layers
    n = max(acts.n_real, 1)
    delta = (acts.A[L] - acts.Y) * acts.mask[:, None]
    grads = [None] * L
    for l in range(L, 1, -1):
        grads[l - 1] = acts.A[l - 1].T @ delta / n + l2 * model.weights[l - 1]
        delta = (delta @ model.weights[l - 1].T) * _act_deriv(
            model.hidden_activation, acts.Z[l - 1], acts.A[l - 1]
        )
    return grads, delta


def first_layer_grad(XT_sigma, model: MlpModel, n_real: int, l2: float = 0.0) -> np.ndarray:
    return XT_sigma / max(n_real, 1) + l2 * model.weights[0]


def apply_grads(model: MlpModel, grads, alpha: float, clamp: float = 1.0) -> MlpModel:
    """In-place SGD step followed by a clamp to the encoding value bound."""
    for l, g in enumerate(grads):
        W = model.weights[l] - alpha * g
        np.clip(W, -clamp, clamp, out=W)
        model.weights[l] = W
    model.step += 1
    return model


def cross_entropy(A_L, Y, mask=None) -> float:
    p = np.clip(np.sum(A_L * Y, axis=1), 1e-300, None)
    if mask is None:
        return float(-np.mean(np.log(p)))
    return float(-np.sum(mask * np.log(p)) / max(mask.sum(), 1))


def predict(model: MlpModel, X) -> np.ndarray:
    return np.argmax(forward(X, model).A[-1], axis=1)


def accuracy(model: MlpModel, X, y) -> float:
    y = np.asarray(y)
    if y.ndim == 2:
        y = np.argmax(y, axis=1)
    return float(np.mean(predict(model, X) == y)) if len(y) else 0.0


def checkpoint_bytes(model: MlpModel) -> bytes:
    header = json.dumps(
        {
            "arch": list(model.arch),
            "activations": [model.hidden_activation, model.output_activation],
            "seed": model.seed,
            "step": model.step,
        },
        sort_keys=True,
    ).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    parts += [np.ascontiguousarray(W, dtype="<f8").tobytes() for W in model.weights]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> MlpModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    arch = header["arch"]
    off = 12 + hlen
    weights = []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        size = n_in * n_out * 8
        if off + size > len(data):
            raise ValueError("truncated checkpoint")
        weights.append(np.frombuffer(data[off : off + size], dtype="<f8").reshape(n_in, n_out).copy())
        off += size
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    hidden, output = header["activations"]
    return MlpModel(tuple(arch), weights, hidden, output, header["seed"], header["step"])


def save_checkpoint(model: MlpModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MlpModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
