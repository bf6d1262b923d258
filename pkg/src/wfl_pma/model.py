"""Dense ReLU networks split into a shared extractor and a private predictor.

Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of
shape (fan_in, fan_out). Hidden layers use ReLU and the last layer is linear;
the loss applies the softmax.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Params = list  # list[np.ndarray], alternating weights and biases

RELU = "relu"
LINEAR = "linear"


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits.

    ``logits`` is (batch, classes) or a single (classes,) vector with a scalar label.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> Params:
    """Uniform Glorot initialisation, zero biases."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def activations_for(n_layers: int) -> list[str]:
    return [RELU] * (n_layers - 1) + [LINEAR]


def forward(params: Params, acts: Sequence[str], x: np.ndarray):
    """Returns the output and the per-layer inputs needed by :func:`backward`."""
    cache = []
    h = x
    for i, act in enumerate(acts):
        W, b = params[2 * i], params[2 * i + 1]
        cache.append(h)
        h = h @ W + b
        if act == RELU:
            h = np.maximum(h, 0.0)
    return h, cache


def backward(params: Params, acts: Sequence[str], cache, out: np.ndarray,
             grad_out: np.ndarray) -> Params:
    """Gradients of all parameters given dLoss/d(output)."""
    grads = [None] * len(params)
    g = grad_out
    h_out = out
    for i in range(len(acts) - 1, -1, -1):
        if acts[i] == RELU:
            g = g * (h_out > 0.0)
        h_in = cache[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ params[2 * i].T
            h_out = h_in
    return grads


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params))


@dataclass
class SplitModel:
    """A dense network whose first ``split_depth`` layers are shared."""
    sizes: list[int]
    split_depth: int
    params: Params

    def __post_init__(self):
        n = len(self.sizes) - 1
        if n < 1:
            raise ValueError("a model needs at least one layer")
        if not 0 <= self.split_depth <= n:
            raise ValueError(f"split_depth must be in [0, {n}], got {self.split_depth}")
        if len(self.params) != 2 * n:
            raise ValueError("parameter list does not match the layer sizes")

    @classmethod
    def init(cls, sizes: Sequence[int], split_depth: int, rng: np.random.Generator) -> "SplitModel":
        return cls(list(sizes), split_depth, init_params(sizes, rng))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def acts(self) -> list[str]:
        return activations_for(self.n_layers)

    @property
    def extractor(self) -> Params:
        return self.params[: 2 * self.split_depth]

    @property
    def predictor(self) -> Params:
        return self.params[2 * self.split_depth:]

    def with_parts(self, u: Params, v: Params) -> "SplitModel":
        return SplitModel(self.sizes, self.split_depth, list(u) + list(v))

    def n_params(self) -> int:
        return count_params(self.params)

    def n_shared(self) -> int:
        return count_params(self.extractor)

    def features(self, x: np.ndarray) -> np.ndarray:
        h, _ = forward(self.extractor, self.acts[: self.split_depth], x)
        return h

    def head(self, z: np.ndarray) -> np.ndarray:
        h, _ = forward(self.predictor, self.acts[self.split_depth:], z)
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.params, self.acts, x)
        return out

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
        return loss_and_grad(self.params, self.acts, x, y)

    def copy(self) -> "SplitModel":
        return SplitModel(list(self.sizes), self.split_depth, [p.copy() for p in self.params])


def loss_and_grad(params: Params, acts: Sequence[str], x: np.ndarray,
                  y: np.ndarray) -> tuple[float, Params]:
    out, cache = forward(params, acts, x)
    loss, g = cross_entropy_loss(out, y)
    return loss, backward(params, acts, cache, out, g)


def payload_bits(model: SplitModel, bits_per_param: int = 16) -> float:
    """Upload size of the shared part. An empty extractor still sends a header word."""
    return float(max(model.n_shared(), 1) * bits_per_param)
