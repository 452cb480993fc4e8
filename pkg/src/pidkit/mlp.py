"""A small feed-forward network with manual backpropagation, plus Adam.

Three linear layers with rectified-linear activations between them, all
in float64 numpy. Forward passes return a cache that the backward pass
consumes; gradients are exact, which the estimator's finite-difference
check relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class MlpParams:
    """Weights and biases of a 3-layer network (list of (W, b) pairs)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
             scale: float = 0.1) -> "MlpParams":
        dims = [in_dim, hidden, hidden, out_dim]
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.standard_normal((d_in, d_out)) * scale / np.sqrt(d_in))
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, out_dim: int) -> "MlpParams":
        dims = [in_dim, hidden, hidden, out_dim]
        return cls([np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]])

    def flatten(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Return (output, cache); ReLU after every layer except the last."""
    h = np.asarray(x, dtype=float)
    pre_acts = []
    inputs = [h]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        inputs.append(h)
    return h, (inputs, pre_acts)


def mlp_backward(params: MlpParams, cache, d_out: np.ndarray) -> MlpParams:
    """Gradients of a scalar loss w.r.t. every weight and bias."""
    inputs, pre_acts = cache
    n_layers = len(params.weights)
    d_ws = [None] * n_layers
    d_bs = [None] * n_layers
    grad = np.asarray(d_out, dtype=float)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            grad = grad * (pre_acts[i] > 0.0)
        d_ws[i] = inputs[i].T @ grad
        d_bs[i] = grad.sum(axis=0)
        grad = grad @ params.weights[i].T
    return MlpParams(d_ws, d_bs)


class Adam:
    """Adam with the standard bias-corrected moment estimates."""

    def __init__(self, tensors: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]
        self.t = 0

    def step(self, tensors: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (tensor, grad) in enumerate(zip(tensors, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            tensor -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
