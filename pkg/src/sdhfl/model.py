"""Small from-scratch classifier: input -> tanh hidden layer -> softmax.

Parameters live in one flat float64 vector laid out as W1, b1, W2, b2
(row-major).  ``hidden_dim == 0`` gives multinomial logistic regression with
layout W, b.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# weights ~ U(-INIT_SCALE / sqrt(fan_in), +INIT_SCALE / sqrt(fan_in)), biases 0
INIT_SCALE = 1.0

_ACTIVATIONS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 784
    hidden_dim: int = 32
    num_classes: int = 10
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 0:
            raise ValueError("dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.nonlinearity not in _ACTIVATIONS:
            raise ValueError(f"nonlinearity must be one of {_ACTIVATIONS}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        if self.hidden_dim == 0:
            return [(self.input_dim, self.num_classes), (self.num_classes,)]
        return [
            (self.input_dim, self.hidden_dim),
            (self.hidden_dim,),
            (self.hidden_dim, self.num_classes),
            (self.num_classes,),
        ]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


def unpack(theta: np.ndarray, arch: Architecture) -> list[np.ndarray]:
    if theta.shape != (arch.size,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({arch.size},)")
    out, pos = [], 0
    for shape in arch.shapes:
        k = int(np.prod(shape))
        out.append(theta[pos : pos + k].reshape(shape))
        pos += k
    return out


def init_params(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for shape in arch.shapes:
        if len(shape) == 2:
            a = INIT_SCALE / np.sqrt(shape[0])
            parts.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return np.concatenate(parts)


def _act(h, kind):
    if kind == "tanh":
        return np.tanh(h)
    return 1.0 / (1.0 + np.exp(-h))


def _act_grad(a, kind):
    # derivative expressed through the activation value
    if kind == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _check_batch(X, arch):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"batch shape {X.shape} does not match input_dim {arch.input_dim}")
    return X


def logits(theta: np.ndarray, X: np.ndarray, arch: Architecture) -> np.ndarray:
    X = _check_batch(X, arch)
    p = unpack(theta, arch)
    if arch.hidden_dim == 0:
        return X @ p[0] + p[1]
    H = _act(X @ p[0] + p[1], arch.nonlinearity)
    return H @ p[2] + p[3]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(theta: np.ndarray, X: np.ndarray, arch: Architecture) -> np.ndarray:
    """Class-probability matrix, one row per sample."""
    return np.exp(log_softmax(logits(theta, X, arch)))


def loss_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, arch: Architecture) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``theta``."""
    X = _check_batch(X, arch)
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError("labels must be a vector matching the batch")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ValueError("label out of range")
    B = X.shape[0]
    p = unpack(theta, arch)
    rows = np.arange(B)

    if arch.hidden_dim == 0:
        logp = log_softmax(X @ p[0] + p[1])
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        delta /= B
        grad = np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])
        return float(-logp[rows, y].mean()), grad

    W1, b1, W2, b2 = p
    H = _act(X @ W1 + b1, arch.nonlinearity)
    logp = log_softmax(H @ W2 + b2)
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= B
    dH = (delta @ W2.T) * _act_grad(H, arch.nonlinearity)
    grad = np.concatenate([(X.T @ dH).ravel(), dH.sum(axis=0), (H.T @ delta).ravel(), delta.sum(axis=0)])
    return float(-logp[rows, y].mean()), grad


def sgd_update(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * grad


def predict(theta: np.ndarray, X: np.ndarray, arch: Architecture) -> np.ndarray:
    # np.argmax breaks ties toward the lowest class index
    return np.argmax(logits(theta, X, arch), axis=1)
