"""Perception-side scalar formulas: pose fusion and registration scoring.

Pose hypotheses live in 6-dim local coordinates (position + axis-angle),
which assumes small rotation differences between the estimates being
fused.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

Array = np.ndarray

_COND_LIMIT = 1e12


@dataclass
class PoseHypothesis:
    pose: Array                      # (6,)
    covariance: Array                # (6, 6) SPD

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.pose.shape != (6,) or self.covariance.shape != (6, 6):
            raise ValueError("pose must be (6,), covariance (6, 6)")
        if not np.all(np.isfinite(self.pose)) \
                or not np.all(np.isfinite(self.covariance)):
            raise ValueError("non-finite pose hypothesis")
        if np.max(np.abs(self.covariance - self.covariance.T)) > 1e-9:
            raise ValueError("covariance not symmetric")
        try:
            np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise ValueError("covariance not positive-definite") from None
        if np.linalg.cond(self.covariance) > _COND_LIMIT:
            raise ValueError("covariance too ill-conditioned to invert")

    def precision(self) -> Array:
        factor = cho_factor(self.covariance, lower=True)
        return cho_solve(factor, np.eye(6))


def covariance_intersect(a: PoseHypothesis, b: PoseHypothesis,
                         omega: float = 0.5) -> PoseHypothesis:
    """Convex combination of precisions; omega = 1 returns `a` exactly.

    The fixed default omega = 0.5 treats the two hypotheses as equally
    informative regardless of their actual cross-correlation, which is
    what makes the rule consistent without knowing it.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    if omega == 1.0:
        return PoseHypothesis(a.pose.copy(), a.covariance.copy())
    if omega == 0.0:
        return PoseHypothesis(b.pose.copy(), b.covariance.copy())
    p_a = a.precision()
    p_b = b.precision()
    precision = omega * p_a + (1.0 - omega) * p_b
    factor = cho_factor(precision, lower=True)
    cov = cho_solve(factor, np.eye(6))
    cov = 0.5 * (cov + cov.T)
    info_mean = omega * (p_a @ a.pose) + (1.0 - omega) * (p_b @ b.pose)
    mean = cho_solve(factor, info_mean)
    return PoseHypothesis(mean, cov)


@dataclass
class IcpScoreInputs:
    fitness: float                   # inlier fraction, in [0, 1]
    rmse: float                      # meters, >= 0
    lambda_s: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness must lie in [0, 1]")
        if self.rmse < 0.0 or not np.isfinite(self.rmse):
            raise ValueError("rmse must be finite and >= 0")


def icp_score(inputs: IcpScoreInputs) -> float:
    """Higher is better; rmse penalized linearly."""
    return float(inputs.fitness - inputs.lambda_s * inputs.rmse)
