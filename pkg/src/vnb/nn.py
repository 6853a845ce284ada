"""Minimal dense networks with explicit reverse passes.

Fixed-architecture MLPs only. Forward passes cache pre-activations so a
caller can run the exact backward pass by hand; no autodiff framework is
involved, which keeps training deterministic and the gradient path
inspectable in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def _tanh(z: Array) -> Array:
    return np.tanh(z)


def _tanh_deriv(z: Array, y: Array) -> Array:
    return 1.0 - y * y


@dataclass
class Dense:
    """One affine layer, x @ w + b. Weights are (fan_in, fan_out)."""

    w: Array
    b: Array

    @property
    def fan_in(self) -> int:
        return self.w.shape[0]

    @property
    def fan_out(self) -> int:
        return self.w.shape[1]


def init_dense(fan_in: int, fan_out: int, rng: np.random.Generator,
               scale: float | None = None) -> Dense:
    """Uniform init in [-scale, scale]; default scale 1/sqrt(fan_in)."""
    if scale is None:
        scale = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-scale, scale, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return Dense(w, b)


class Mlp:
    """Dense stack with per-layer activations from {tanh, linear, sine}.

    sine applies sin(omega0 * z) and exists for the sinusoidal density
    network; tanh/linear cover the belief nets. Inputs may be a single
    vector or a (batch, features) matrix.
    """

    def __init__(self, layers: list[Dense], activations: list[str],
                 omega0: float = 1.0):
        if len(layers) != len(activations):
            raise ValueError("one activation per layer required")
        for act in activations:
            if act not in ("tanh", "linear", "sine"):
                raise ValueError(f"unknown activation {act!r}")
        self.layers = layers
        self.activations = activations
        self.omega0 = float(omega0)

    @classmethod
    def build(cls, sizes: list[int], rng: np.random.Generator,
              hidden: str = "tanh", out: str = "linear",
              omega0: float = 1.0, scale: float | None = None) -> "Mlp":
        layers = [init_dense(a, b, rng, scale=scale)
                  for a, b in zip(sizes[:-1], sizes[1:])]
        acts = [hidden] * (len(layers) - 1) + [out]
        return cls(layers, acts, omega0=omega0)

    def forward(self, x: Array) -> tuple[Array, list]:
        """Returns (output, cache). Cache feeds backward()."""
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=float))
        cache = []
        for layer, act in zip(self.layers, self.activations):
            z = h @ layer.w + layer.b
            if act == "tanh":
                y = _tanh(z)
            elif act == "sine":
                y = np.sin(self.omega0 * z)
            else:
                y = z
            cache.append((h, z, y, act))
            h = y
        if squeeze:
            return h[0], cache
        return h, cache

    def __call__(self, x: Array) -> Array:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: Array
                 ) -> tuple[Array, list[tuple[Array, Array]]]:
        """Reverse pass.

        grad_out is dL/d(output), shaped like the forward output. Returns
        (dL/dx, [(dW, db) per layer in declaration order]). Parameter
        grads are summed over the batch.
        """
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        param_grads: list[tuple[Array, Array]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            h, z, y, act = cache[i]
            if act == "tanh":
                gz = g * _tanh_deriv(z, y)
            elif act == "sine":
                gz = g * (self.omega0 * np.cos(self.omega0 * z))
            else:
                gz = g
            param_grads[i] = (h.T @ gz, gz.sum(axis=0))
            g = gz @ self.layers[i].w.T
        return g, param_grads

    # -- flat parameter views, used by the optimizer and serialization --

    def parameters(self) -> list[Array]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def copy(self) -> "Mlp":
        layers = [Dense(l.w.copy(), l.b.copy()) for l in self.layers]
        return Mlp(layers, list(self.activations), omega0=self.omega0)


@dataclass
class Adam:
    """Adam with the usual constants. step() mutates params in place."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[Array], grads: list[Array]) -> None:
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
