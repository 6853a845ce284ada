"""CVaR estimators, the softplus surrogate, and failure probabilities.

hard_cvar is the sorted-tail estimator and serves as the oracle for the
smooth surrogate. soft_cvar anchors a softplus at the interpolated
empirical beta-quantile; its gradient treats that anchor as a constant,
which is what makes the pathwise chain through the cost samples exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass
class RiskConfig:
    beta: float
    kappa_rho: float = 5.0
    kappa_f: float = 100.0
    tau_f: float = 5.8
    lambda_c: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.kappa_rho <= 0 or self.kappa_f <= 0:
            raise ValueError("sharpness parameters must be positive")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")


@dataclass
class CostSamples:
    """Cost values plus optional back-references to the belief samples."""

    values: Array
    sample_refs: list | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size < 1:
            raise ValueError("at least one cost sample required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost samples must be finite")

    @property
    def n(self) -> int:
        return self.values.size


def _values(samples) -> Array:
    if isinstance(samples, CostSamples):
        return samples.values
    v = np.asarray(samples, dtype=float).ravel()
    if v.size < 1:
        raise ValueError("at least one cost sample required")
    return v


def tail_count(n: int, beta: float) -> int:
    # ceil((1-beta) n), at least one sample
    return max(1, int(np.ceil((1.0 - beta) * n - 1e-12)))


def empirical_quantile(values: Array, beta: float) -> float:
    """Linear interpolation between order statistics (numpy default)."""
    return float(np.quantile(values, beta))


def hard_cvar(samples, beta: float) -> float:
    """Mean of the ceil((1-beta) N) largest cost samples."""
    v = _values(samples)
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    m = tail_count(v.size, beta)
    tail = np.partition(v, v.size - m)[v.size - m:]
    return float(tail.mean())


def softplus(x: Array, kappa: float = 1.0) -> Array:
    """ln(1 + exp(kappa x)) / kappa, computed without overflow."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-kappa * np.abs(x))) / kappa


def sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_cvar(samples, cfg: RiskConfig) -> float:
    """Softplus relaxation of the CVaR dual at the empirical quantile."""
    v = _values(samples)
    eta = empirical_quantile(v, cfg.beta)
    scale = (1.0 - cfg.beta) * v.size
    return eta + float(softplus(v - eta, cfg.kappa_rho).sum()) / scale


def soft_cvar_grad(samples, cost_grads, cfg: RiskConfig) -> Array:
    """Pathwise gradient: sigmoid-weighted average of per-sample grads.

    cost_grads[i] is the gradient of cost sample i with respect to the
    differentiation target (action vector or flattened belief params).
    The quantile anchor is held fixed.
    """
    v = _values(samples)
    g = np.asarray(cost_grads, dtype=float)
    if g.shape[0] != v.size:
        raise ValueError("one cost gradient per sample required")
    eta = empirical_quantile(v, cfg.beta)
    w = sigmoid(cfg.kappa_rho * (v - eta))
    scale = (1.0 - cfg.beta) * v.size
    return np.tensordot(w, g, axes=1) / scale


def failure_prob_hard(samples, tau_f: float) -> float:
    v = _values(samples)
    return float(np.mean(v > tau_f))


def failure_prob_soft(samples, cfg: RiskConfig) -> float:
    v = _values(samples)
    return float(np.mean(sigmoid(cfg.kappa_f * (v - cfg.tau_f))))


def calibration_error(p_belief: float, p_empirical: float) -> float:
    for name, p in (("p_belief", p_belief), ("p_empirical", p_empirical)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    return abs(p_belief - p_empirical)
