"""Minimal float64 neural-network pieces with explicit backward passes.

Modules own a ``params`` dict of named arrays. ``forward`` returns the
output plus a cache; ``backward`` consumes the cache and returns the input
gradient and a grads dict keyed like ``params``.
"""
from __future__ import annotations

import numpy as np


def uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP:
    """Fully connected net with ReLU hidden layers and a linear output."""

    def __init__(self, sizes, rng):
        self.sizes = tuple(int(s) for s in sizes)
        self.params = {}
        for k, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{k}"] = uniform_fan_in(rng, fi, (fi, fo))
            self.params[f"b{k}"] = uniform_fan_in(rng, fi, (fo,))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x):
        cache = [x]
        h = x
        for k in range(self.n_layers):
            h = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            if k < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            cache.append(h)
        return h, cache

    def backward(self, dout, cache):
        grads = {}
        g = dout
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                g = g * (cache[k + 1] > 0)
            grads[f"W{k}"] = cache[k].T @ g
            grads[f"b{k}"] = g.sum(axis=0)
            g = g @ self.params[f"W{k}"].T
        return g, grads


class Adam:
    """Adam over an arbitrary collection of named parameter dicts."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, params, grads):
        """Update ``params`` in place. ``name`` scopes the moment buffers."""
        for key, g in grads.items():
            slot = f"{name}/{key}"
            if slot not in self.m:
                self.m[slot] = np.zeros_like(g)
                self.v[slot] = np.zeros_like(g)
                self.t[slot] = 0
            self.t[slot] += 1
            t = self.t[slot]
            m = self.m[slot]
            v = self.v[slot]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        out = {}
        for slot in self.m:
            out[f"m/{slot}"] = self.m[slot]
            out[f"v/{slot}"] = self.v[slot]
            out[f"t/{slot}"] = np.array(self.t[slot])
        return out

    def load_state_arrays(self, arrays):
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in arrays.items():
            kind, slot = key.split("/", 1)
            if kind == "m":
                self.m[slot] = np.array(arr, dtype=np.float64)
            elif kind == "v":
                self.v[slot] = np.array(arr, dtype=np.float64)
            elif kind == "t":
                self.t[slot] = int(arr)


def bce_with_probs(p, target, clamp=1e-7):
    """Mean binary cross-entropy and its gradient w.r.t. the pre-sigmoid logit.

    ``p`` are sigmoid outputs. The gradient uses the closed form ``p - target``
    which stays exact where clamping does not bind.
    """
    pc = np.clip(p, clamp, 1 - clamp)
    loss = -(target * np.log(pc) + (1 - target) * np.log(1 - pc))
    n = p.shape[0]
    return float(loss.mean()), (p - target) / n
