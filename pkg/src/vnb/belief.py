"""Gaussian-mixture belief representation and differentiable sampling.

The belief over the 26-dim latent is a K-component diagonal-covariance
mixture. Component choice is relaxed with Gumbel-Softmax weights and each
sample keeps its noise draws, so gradients with respect to the mixture
parameters can be replayed pathwise through any downstream scalar cost.

An implicit-density alternative (sinusoidal network + unadjusted Langevin
sampling) lives at the bottom of the module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Dense, Mlp

Array = np.ndarray

BELIEF_SCHEMA = "vnb-belief/1"

# Uniform draws are clamped away from {0,1} before the double log; the
# resulting gumbels stay within about +/-27.6.
_U_LO = 1e-12
_U_HI = 1.0 - 1e-12


class SamplerDivergence(RuntimeError):
    """Raised when a Langevin chain leaves the trust region (norm > 1e6)."""


def _softmax(z: Array, axis: int = -1) -> Array:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class BeliefParams:
    """Mixture logits, means, log-stds, and the relaxation temperature."""

    logits: Array
    means: Array
    log_stds: Array
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.log_stds = np.asarray(self.log_stds, dtype=float)
        if self.logits.ndim != 1 or self.logits.size < 1:
            raise ValueError("logits must be a nonempty vector")
        k = self.logits.size
        if self.means.shape != self.log_stds.shape or self.means.ndim != 2:
            raise ValueError("means/log_stds must both be (K, d)")
        if self.means.shape[0] != k:
            raise ValueError("means rows must match logits length")
        if not (np.all(np.isfinite(self.logits))
                and np.all(np.isfinite(self.means))
                and np.all(np.isfinite(self.log_stds))):
            raise ValueError("belief parameters must be finite")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be positive")

    @property
    def k(self) -> int:
        return self.logits.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def weights(self) -> Array:
        return _softmax(self.logits)

    def copy(self) -> "BeliefParams":
        return BeliefParams(self.logits.copy(), self.means.copy(),
                            self.log_stds.copy(), self.temperature)

    def to_json(self) -> str:
        return json.dumps({
            "schema": BELIEF_SCHEMA,
            "logits": self.logits.tolist(),
            "means": self.means.tolist(),
            "log_stds": self.log_stds.tolist(),
            "temperature": self.temperature,
        })

    @classmethod
    def from_json(cls, text: str) -> "BeliefParams":
        doc = json.loads(text)
        if doc.get("schema") != BELIEF_SCHEMA:
            raise ValueError(f"expected schema {BELIEF_SCHEMA!r}")
        return cls(np.array(doc["logits"], dtype=float),
                   np.array(doc["means"], dtype=float),
                   np.array(doc["log_stds"], dtype=float),
                   float(doc["temperature"]))


@dataclass
class ReparamSample:
    """One mixture draw with everything needed to replay its gradient."""

    value: Array      # (d,)
    weights: Array    # (K,) relaxed component weights zeta
    noises: Array     # (K, d) standard-normal draws
    gumbels: Array    # (K,)


@dataclass
class SampleBatch:
    """Vectorized form of n ReparamSamples (planner hot path)."""

    values: Array     # (n, d)
    weights: Array    # (n, K)
    noises: Array     # (n, K, d)
    gumbels: Array    # (n, K)

    def __len__(self) -> int:
        return self.values.shape[0]


def sample_gumbel_softmax(logits: Array, temperature: float,
                          rng: np.random.Generator) -> Array:
    """Relaxed one-hot over K components; differentiable in the logits."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    g = gumbel_draws(logits.shape, rng)
    return _softmax((logits + g) / temperature)


def gumbel_draws(shape, rng: np.random.Generator) -> Array:
    u = np.clip(rng.uniform(size=shape), _U_LO, _U_HI)
    return -np.log(-np.log(u))


def sample_belief(params: BeliefParams, n: int,
                  rng: np.random.Generator) -> list[ReparamSample]:
    """n reparameterized draws, each retaining (zeta, eps, g)."""
    batch = sample_belief_batch(params, n, rng)
    return [ReparamSample(batch.values[i], batch.weights[i],
                          batch.noises[i], batch.gumbels[i])
            for i in range(len(batch))]


def sample_belief_batch(params: BeliefParams, n: int,
                        rng: np.random.Generator) -> SampleBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    k, d = params.k, params.d
    g = gumbel_draws((n, k), rng)
    zeta = _softmax((params.logits + g) / params.temperature, axis=1)
    eps = rng.standard_normal((n, k, d))
    comps = params.means + np.exp(params.log_stds) * eps      # (n, K, d)
    values = np.einsum("nk,nkd->nd", zeta, comps)
    return SampleBatch(values, zeta, eps, g)


def replay_values(params: BeliefParams, batch: SampleBatch) -> Array:
    """Recompute sample values from retained noise under (possibly new)
    parameters. This is the function the pathwise gradients differentiate."""
    zeta = _softmax((params.logits + batch.gumbels) / params.temperature,
                    axis=1)
    comps = params.means + np.exp(params.log_stds) * batch.noises
    return np.einsum("nk,nkd->nd", zeta, comps)


def belief_param_grads(params: BeliefParams, batch: SampleBatch,
                       dvalues: Array) -> tuple[Array, Array, Array]:
    """Per-sample pathwise gradients of a scalar cost through each sample.

    dvalues is (n, d) holding dC_i/dtheta_i. Returns per-sample gradients
    (dlogits (n,K), dmeans (n,K,d), dlog_stds (n,K,d)) for fixed noise.
    """
    dvalues = np.asarray(dvalues, dtype=float)
    zeta = batch.weights                                       # (n, K)
    sig = np.exp(params.log_stds)                              # (K, d)
    comps = params.means + sig * batch.noises                  # (n, K, d)

    dmeans = zeta[:, :, None] * dvalues[:, None, :]
    dlog_stds = dmeans * (sig * batch.noises)
    # zeta = softmax((l+g)/tau): jacobian (diag(z) - z z^T)/tau
    v = np.einsum("nkd,nd->nk", comps, dvalues)
    dlogits = (zeta * v - zeta * (zeta * v).sum(axis=1, keepdims=True))
    dlogits /= params.temperature
    return dlogits, dmeans, dlog_stds


def belief_entropy_bound(params: BeliefParams) -> float:
    """Categorical entropy plus weighted component entropies.

    Upper-bounds the true mixture entropy and is cheap and differentiable,
    which is all the planning objective needs.
    """
    pi = params.weights()
    # 0 log 0 := 0
    h_cat = -np.sum(np.where(pi > 0, pi * np.log(np.clip(pi, 1e-300, None)),
                             0.0))
    d = params.d
    h_comp = 0.5 * d * (1.0 + np.log(2.0 * np.pi)) \
        + params.log_stds.sum(axis=1)
    return float(h_cat + pi @ h_comp)


# ---------------------------------------------------------------------------
# Implicit belief: sinusoidal density network + unadjusted Langevin sampling


@dataclass
class SirenBelief:
    """Unnormalized log-density f(theta) as a sine-activated MLP."""

    net: Mlp
    omega0: float = 30.0
    langevin_step: float = 1e-3
    langevin_iters: int = 50

    def log_density(self, theta: Array) -> float | Array:
        out = self.net(np.asarray(theta, dtype=float))
        if out.ndim == 2:
            return out[:, 0]
        return float(out[0])

    def score(self, theta: Array) -> Array:
        theta = np.asarray(theta, dtype=float)
        out, cache = self.net.forward(theta)
        grad_out = np.ones((1, 1)) if theta.ndim == 1 \
            else np.ones((theta.shape[0], 1))
        gx, _ = self.net.backward(cache, grad_out)
        return gx[0] if theta.ndim == 1 else gx


def build_siren(d: int, rng: np.random.Generator, width: int = 128,
                depth: int = 3, omega0: float = 30.0) -> SirenBelief:
    sizes = [d] + [width] * depth + [1]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(6.0 / fan_in) / omega0
        w = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        layers.append(Dense(w, np.zeros(fan_out)))
    acts = ["sine"] * depth + ["linear"]
    return SirenBelief(Mlp(layers, acts, omega0=omega0), omega0=omega0)


def siren_log_density(belief: SirenBelief, theta: Array) -> float:
    return belief.log_density(theta)


def langevin_sample(belief, init: Array, rng: np.random.Generator,
                    step: float | None = None,
                    iters: int | None = None) -> Array:
    """Unadjusted Langevin chain(s) on the belief's log-density.

    `belief` needs a score(theta) method; defaults for step/iters are read
    off the belief when present. init may be a single state (d,) or a batch
    of chains (n, d), and doubles as the warm start.
    """
    alpha = float(getattr(belief, "langevin_step", 1e-3)
                  if step is None else step)
    j = int(getattr(belief, "langevin_iters", 50) if iters is None else iters)
    if alpha < 0:
        raise ValueError("step size must be >= 0")
    if j < 1:
        raise ValueError("iteration count must be >= 1")
    theta = np.array(init, dtype=float, copy=True)
    root = np.sqrt(alpha)
    for _ in range(j):
        drift = belief.score(theta)
        theta += 0.5 * alpha * drift
        theta += root * rng.standard_normal(theta.shape)
        norms = np.linalg.norm(np.atleast_2d(theta), axis=1)
        if np.any(norms > 1e6) or not np.all(np.isfinite(norms)):
            raise SamplerDivergence(
                f"chain norm exceeded 1e6 (max {norms.max():.3g})")
    return theta
