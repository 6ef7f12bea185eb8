"""Small fully connected networks with hand-derived gradients.

Fixed architecture: two tanh hidden layers and a linear output. No autodiff;
the backward pass is written out and checked against central finite
differences in the test suite. All math is float64 numpy with a fixed
reduction order, so training is bit-deterministic under a fixed seed.
"""

from __future__ import annotations

import numpy as np

Params = list[tuple[np.ndarray, np.ndarray]]  # [(W, b), ...]


def init_mlp(dims: list[int], rng: np.random.Generator) -> Params:
    """Xavier-scaled Gaussian init; dims = [in, hidden..., out]."""
    params: Params = []
    for n_in, n_out in zip(dims, dims[1:]):
        W = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        b = np.zeros(n_out)
        params.append((W, b))
    return params


def mlp_forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, list]:
    """x: (B, d_in) -> (out (B, d_out), cache). tanh on all but the last layer."""
    h = x
    cache = []
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        z = h @ W + b
        if i < last:
            a = np.tanh(z)
        else:
            a = z
        cache.append((h, a, i < last))
        h = a
    return h, cache


def mlp_backward(params: Params, cache: list, dout: np.ndarray) -> tuple[Params, np.ndarray]:
    """dout: (B, d_out) gradient of the loss w.r.t. the output.
    Returns (grads matching params, gradient w.r.t. the input)."""
    grads: list = [None] * len(params)
    d = dout
    for i in range(len(params) - 1, -1, -1):
        W, _b = params[i]
        h_in, a_out, is_hidden = cache[i]
        if is_hidden:
            d = d * (1.0 - a_out * a_out)
        gW = h_in.T @ d
        gb = d.sum(axis=0)
        grads[i] = (gW, gb)
        d = d @ W.T
    return grads, d


def zeros_like_params(params: Params) -> Params:
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]


def clone_params(params: Params) -> Params:
    return [(W.copy(), b.copy()) for W, b in params]


def params_finite(params: Params) -> bool:
    return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in params)


def polyak_update(target: Params, online: Params, coeff: float) -> Params:
    """target <- (1 - coeff) * target + coeff * online."""
    return [
        ((1.0 - coeff) * tW + coeff * oW, (1.0 - coeff) * tb + coeff * ob)
        for (tW, tb), (oW, ob) in zip(target, online)
    ]


class Momentum:
    """Plain gradient descent with momentum (0.9); no adaptive state."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.buffers: Params | None = None

    def step(self, params: Params, grads: Params) -> Params:
        if self.buffers is None:
            self.buffers = zeros_like_params(params)
        new_params: Params = []
        new_buffers: Params = []
        for (W, b), (gW, gb), (mW, mb) in zip(params, grads, self.buffers):
            mW = self.momentum * mW + gW
            mb = self.momentum * mb + gb
            new_params.append((W - self.lr * mW, b - self.lr * mb))
            new_buffers.append((mW, mb))
        self.buffers = new_buffers
        return new_params


class VectorMomentum:
    """Momentum for a bare vector parameter (the policy log-std)."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.buffer: np.ndarray | None = None

    def step(self, vec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.buffer is None:
            self.buffer = np.zeros_like(vec)
        self.buffer = self.momentum * self.buffer + grad
        return vec - self.lr * self.buffer
