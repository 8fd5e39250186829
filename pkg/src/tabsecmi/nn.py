"""Minimal numpy neural-network pieces with explicit reverse-mode gradients."""
from __future__ import annotations

import numpy as np


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * sigmoid(z)


def silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


class MLP:
    """Fully connected net; the activation follows every layer but the last.

    Parameters live in ``self.params`` as ``W0, b0, W1, b1, ...`` with
    ``W_i`` of shape ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes, rng=None, activation="silu"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if rng is None:
                self.params[f"W{i}"] = np.zeros((fan_in, fan_out))
                self.params[f"b{i}"] = np.zeros(fan_out)
            else:
                self.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                self.params[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, cache=False):
        act, _ = ACTIVATIONS[self.activation]
        h = x
        pre = []
        inputs = []
        for i in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                pre.append(z)
                h = act(z)
            else:
                h = z
        if cache:
            return h, (inputs, pre)
        return h

    def backward(self, grad_out, cache):
        """Return ``(grads, grad_input)`` given dLoss/dOutput."""
        _, dact = ACTIVATIONS[self.activation]
        inputs, pre = cache
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * dact(pre[i])
            grads[f"W{i}"] = inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads, g


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for k, g in grads.items():
            self.params[k] -= self.lr * g


def make_optimizer(name, params, lr):
    if name in ("adam", "adaptive-moment"):
        return Adam(params, lr)
    if name in ("sgd", "plain-SGD"):
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
