"""Risk-sensitive belief-space grasp planning.

Differentiable Gaussian-mixture beliefs, a smooth CVaR surrogate with
pathwise gradients, learned belief dynamics, a quasi-static contact
simulator, wrench-space grasp quality, and the baseline planners used
for comparison runs.
"""

__version__ = "0.1.0"
