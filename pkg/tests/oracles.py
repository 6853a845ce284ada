"""Independent reference implementations the tests check against.

Everything here is written from the definitions, not by calling into
vnb, so an agreement failure points at the library (or at a genuinely
ambiguous definition) rather than at a shared bug.
"""
import numpy as np
from scipy.optimize import minimize, nnls
from scipy.special import logsumexp


def central_fd(f, x, h=1e-5):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(flat.size):
        e = np.zeros(flat.size)
        e[i] = h
        g[i] = (f((flat + e).reshape(x.shape))
                - f((flat - e).reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def tail_mean(values, beta):
    """Hard CVaR by definition: average of the top ceil((1-beta)n) values."""
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    k = max(1, int(np.ceil((1.0 - beta) * v.size)))
    return float(v[:k].mean())


def weighted_tail_mean(values, weights, beta):
    """Weighted CVaR: descending-cost prefix reaching (1-beta) mass.

    The boundary particle counts in full, so under uniform weights this
    reduces exactly to the top-ceil((1-beta)n) average (tail_mean).
    """
    order = np.argsort(-np.asarray(values, dtype=float), kind="stable")
    v = np.asarray(values, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    need = (1.0 - beta) - 1e-12
    acc = 0.0
    m = 0
    for wi in w:
        acc += wi
        m += 1
        if acc >= need:
            break
    return float((w[:m] @ v[:m]) / w[:m].sum())


def support_of(points, d):
    """Support function of conv(points) in direction d."""
    return float((points @ d).max())


def eps_sampled(points, n_dirs, rng, polish_starts=8):
    """Ferrari-Canny via direction sampling plus simplex polish.

    min over unit directions u of max_w <w, u>; converges to the true
    value from above as directions densify. The polish refines the best
    sampled directions with Nelder-Mead on the normalized objective.
    """
    points = np.asarray(points, dtype=float)
    dirs = rng.standard_normal((n_dirs, 6))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    supports = (dirs @ points.T).max(axis=1)
    best = float(supports.min())

    def h(v):
        n = np.linalg.norm(v)
        if n < 1e-12:
            return np.inf
        return support_of(points, v / n)

    for idx in np.argsort(supports)[:polish_starts]:
        res = minimize(h, dirs[idx], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12,
                                "maxiter": 4000})
        best = min(best, float(res.fun))
    return best


def gumbel_softmax_mean(logits, tau, n, rng):
    """Monte-Carlo mean of the relaxed categorical, straight from the law."""
    logits = np.asarray(logits, dtype=float)
    u = rng.random((n, logits.size))
    g = -np.log(-np.log(u))
    z = (logits + g) / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).mean(axis=0)


def mixture_logpdf(x, weights, means, stds):
    """Exact diagonal-GMM log-density, batched over rows of x."""
    x = np.atleast_2d(x)
    means = np.atleast_2d(means)
    stds = np.atleast_2d(stds)
    lp = -0.5 * (((x[:, None, :] - means[None]) / stds[None]) ** 2
                 + np.log(2 * np.pi)) - np.log(stds[None])
    comp = lp.sum(axis=2) + np.log(np.asarray(weights))[None]
    return logsumexp(comp, axis=1)


def mixture_entropy_mc(weights, means, stds, n, rng):
    """MC entropy of a diagonal GMM; returns (estimate, standard error)."""
    weights = np.asarray(weights, dtype=float)
    comp = rng.choice(weights.size, size=n, p=weights)
    x = (np.asarray(means)[comp]
         + np.asarray(stds)[comp] * rng.standard_normal((n, np.asarray(means).shape[1])))
    lp = mixture_logpdf(x, weights, means, stds)
    return float(-lp.mean()), float(lp.std(ddof=1) / np.sqrt(n))


def siren_forward(weights, biases, omega0, x):
    """Plain-loop SIREN evaluation: sin(omega0 * (Wx+b)) hidden, linear out."""
    h = np.asarray(x, dtype=float)
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.sin(omega0 * (h @ w + b))
    return float((h @ weights[-1] + biases[-1])[0])


def kalman_posterior_mean(prior_mean, prior_var, q, r, actions, obs):
    """Scalar random-walk Kalman filter; returns final posterior mean."""
    m, p = float(prior_mean), float(prior_var)
    for a, z in zip(actions, obs):
        m, p = m + a, p + q
        k = p / (p + r)
        m = m + k * (z - m)
        p = (1 - k) * p
    return m


def in_cone_span(direction, edge_wrenches, tol=1e-6):
    """True when `direction` is a nonnegative combination of edge wrenches."""
    a = np.asarray(edge_wrenches, dtype=float).T        # (6, m)
    coeffs, resid = nnls(a, np.asarray(direction, dtype=float))
    del coeffs
    return resid < tol


def quadratic_cost_batch(latents, actions, anchor):
    """Convex quadratic surrogate used by the optimizer contract tests.

    cost_i = 0.5 * ||sum_h a_h - anchor||^2 + <latent_i[:6], sum_h a_h>
    so the per-sample gradient is (a_sum - anchor) + latent_i[:6].
    """
    a_sum = np.atleast_2d(actions).sum(axis=0)
    lat = np.atleast_2d(latents)[:, :6]
    return 0.5 * float((a_sum - anchor) @ (a_sum - anchor)) + lat @ a_sum


class QuadraticEvaluator:
    """Duck-typed stand-in for CostEvaluator with a known minimizer."""

    def __init__(self, anchor):
        self.anchor = np.asarray(anchor, dtype=float)

    def costs(self, latents, actions):
        return quadratic_cost_batch(latents, actions, self.anchor)

    def costs_and_grads(self, latents, actions):
        actions = np.atleast_2d(actions)
        lat = np.atleast_2d(latents)[:, :6]
        costs = quadratic_cost_batch(latents, actions, self.anchor)
        a_sum = actions.sum(axis=0)
        per = (a_sum - self.anchor)[None, :] + lat
        grads = np.repeat(per[:, None, :], actions.shape[0], axis=1)
        return costs, grads
