"""Dense ReLU network trained with softmax cross-entropy and Adam.

Everything runs in float64 on numpy. Weight matrices are stored as
``(out, in)`` so a batch ``X`` of shape ``(n, in)`` maps to ``X @ W.T + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import random_translate
from .exceptions import ConfigurationError, DataError, FormatError, SamplerError, ShapeError
from .io import atomic_write_bytes

MAGIC = b"NNFC"
FORMAT_VERSION = 1
DEFAULT_LAYER_DIMS = (784, 256, 256, 256, 10)


@dataclass
class DenseNet:
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias vector per layer transition")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if W.shape != expected:
                raise ShapeError(f"weights[{i}] has shape {W.shape}, expected {expected}")
            if b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"biases[{i}] has shape {b.shape}, expected ({expected[0]},)")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden_width(self) -> int:
        return self.layer_dims[-2]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def parameters(self) -> List[np.ndarray]:
        """Weights then biases, layer by layer. Arrays are live views."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


@dataclass
class ForwardTrace:
    """Activations for a batch.

    ``activations[l]`` is the post-ReLU output of hidden layer ``l``;
    ``hidden`` is the last of them and ``logits`` are pre-softmax.
    """

    activations: List[np.ndarray]
    logits: np.ndarray

    @property
    def hidden(self) -> np.ndarray:
        return self.activations[-1]

    def __len__(self):
        return self.logits.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            # zero is allowed: it is the documented "frozen parameters" case
            raise ConfigurationError("learning_rate must be a finite non-negative number", "learning_rate")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError("batch_size must be a positive integer", "batch_size")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigurationError("epochs must be a non-negative integer", "epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam decay rates must lie in [0, 1)", "beta1")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive", "epsilon")


@dataclass
class OptimState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_network(cls, net: DenseNet) -> "OptimState":
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass
class EpochStats:
    mean_loss: float
    batches: int
    losses: List[float] = field(default_factory=list, repr=False)


def init_network(layer_dims: Sequence[int], seed: int = 0) -> DenseNet:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ConfigurationError("layer_dims needs at least an input and an output size", "layer_dims")
    if any(int(d) != d or d < 1 for d in dims):
        raise ConfigurationError(f"layer sizes must be positive integers, got {dims}", "layer_dims")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return DenseNet(dims, weights, biases)


def _as_batch(net: DenseNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.layer_dims[0]:
        raise ShapeError(f"expected inputs of width {net.layer_dims[0]}, got array of shape {X.shape}")
    return X


def forward(net: DenseNet, X) -> ForwardTrace:
    A = _as_batch(net, X)
    acts = []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        Z = A @ W.T + b
        if i == last:
            return ForwardTrace(acts, Z)
        A = np.maximum(Z, 0.0)
        acts.append(A)
    raise AssertionError("unreachable")


def hidden_states(net: DenseNet, X, chunk: int = 4096) -> np.ndarray:
    """Last-hidden-layer activations, evaluated in fixed-size chunks."""
    X = _as_batch(net, X)
    if len(net.layer_dims) < 3:
        raise ShapeError("network has no hidden layer")
    parts = [forward(net, X[i:i + chunk]).hidden for i in range(0, len(X), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, net.hidden_width))


def predict_logits(net: DenseNet, X, chunk: int = 4096) -> np.ndarray:
    X = _as_batch(net, X)
    parts = [forward(net, X[i:i + chunk]).logits for i in range(0, len(X), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, net.n_classes))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(net: DenseNet, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= net.n_classes):
        raise DataError(f"labels must be integers in [0, {net.n_classes})")
    return y.astype(np.intp)


def loss_and_gradients(net: DenseNet, X, y):
    """Mean softmax cross-entropy and its gradient for every parameter.

    Returns ``(loss, grads)`` where ``grads`` follows ``net.parameters()``
    ordering: ``[dW0, db0, dW1, db1, ...]``.
    """
    X = _as_batch(net, X)
    y = _check_labels(net, y, X.shape[0])
    n = X.shape[0]
    trace = forward(net, X)
    logp = log_softmax(trace.logits)
    loss = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    inputs = [X] + trace.activations
    grads: List[Optional[np.ndarray]] = [None] * (2 * len(net.weights))
    for layer in range(len(net.weights) - 1, -1, -1):
        grads[2 * layer] = delta.T @ inputs[layer]
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer:
            delta = (delta @ net.weights[layer]) * (inputs[layer] > 0)
    return loss, grads


def adam_update(net: DenseNet, state: OptimState, grads, config: TrainConfig) -> None:
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    lr_t = config.learning_rate * np.sqrt(1 - b2 ** state.step) / (1 - b1 ** state.step)
    for p, g, m, v in zip(net.parameters(), grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr_t * m / (np.sqrt(v) + config.epsilon)


def train_epoch(net: DenseNet, opt_state: OptimState, sampler, dataset, config: TrainConfig) -> EpochStats:
    """One epoch of ``floor(active / batch_size)`` sampled minibatches.

    ``active`` counts the dataset examples whose class currently has a
    non-zero sampler weight.
    """
    active = sampler.active_count()
    if active == 0:
        raise SamplerError("no class with positive weight has any examples")
    n_batches = active // config.batch_size
    losses = []
    for _ in range(n_batches):
        idx = sampler.sample_indices(config.batch_size)
        X = dataset.images[idx]
        if config.augment:
            X = random_translate(X, sampler.rng)
        loss, grads = loss_and_gradients(net, X, dataset.labels[idx])
        adam_update(net, opt_state, grads, config)
        losses.append(loss)
    mean = float(np.mean(losses)) if losses else float("nan")
    return EpochStats(mean, n_batches, losses)


def evaluate_accuracy(net: DenseNet, dataset) -> float:
    labels = np.asarray(dataset.labels)
    if labels.size == 0:
        raise DataError("cannot evaluate accuracy on an empty dataset")
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    pred = predict_logits(net, dataset.images).argmax(axis=1)
    return float(np.mean(pred == labels))


def save_network(net: DenseNet, path) -> None:
    """Write the NNFC container: little-endian header, then float64 weights/biases."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(net.layer_dims))
    buf += struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims)
    for W, b in zip(net.weights, net.biases):
        buf += np.ascontiguousarray(W, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_network(path) -> DenseNet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an NNFC model file")
    if len(raw) < 12:
        raise EOFError(f"{path}: truncated header")
    version, n_dims = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    off = 12
    if len(raw) < off + 4 * n_dims:
        raise EOFError(f"{path}: truncated layer table")
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, off))
    off += 4 * n_dims
    expected = off + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) != expected:
        raise EOFError(f"{path}: expected {expected} bytes, found {len(raw)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_out, fan_in)
        off += 8 * W.size
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(W.astype(np.float64))
        biases.append(b.astype(np.float64))
    return DenseNet(dims, weights, biases)
