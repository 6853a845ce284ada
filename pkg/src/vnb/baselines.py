"""Comparison planners: particle filter, CEM, and single-Gaussian MPC.

The particle filter keeps an explicit latent sample set and scores a
fixed candidate grid; CEM shares the neural belief but optimizes a
risk-neutral objective by sampling; the Gaussian variants reuse the MPC
machinery with a one-component belief.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .belief import BeliefParams, sample_belief_batch
from .dynamics import BeliefNets, Observation, neural_belief_update
from .grasp import HandModel, LatentState, grasp_cost
from .planner import (CostEvaluator, EpisodeRecord, MpcConfig, PlanStepResult,
                      StepRecord, plan_step, vnb_mpc_episode)
from .risk import sigmoid
from .sim import CONTACT_TOL, SIGMA_BASE, FrictionRegime, ObjectSpec, \
    Simulator, effective_friction, signed_distance

Array = np.ndarray

_CLOSE_RATES = (0.05, 0.10, 0.15, 0.20)
_FINGER_MASKS = (
    (1, 1, 1, 1, 1, 1),     # all joints
    (1, 1, 0, 0, 0, 0),     # thumb pair only
    (0, 0, 1, 1, 1, 1),     # fingers only
    (1, 1, 1, 1, 0, 0),     # thumb + index/middle
    (1, 1, 0, 0, 1, 1),     # thumb + ring/little
)


def candidate_actions(a_max: float = 0.5) -> Array:
    """Fixed 20-candidate grid: closing rates crossed with finger masks."""
    grid = []
    for rate in _CLOSE_RATES:
        for mask in _FINGER_MASKS:
            grid.append(rate * np.asarray(mask, dtype=float))
    out = np.clip(np.asarray(grid), 0.0, a_max)
    return out


# -- particle filter -------------------------------------------------------

@dataclass
class ParticleBelief:
    particles: Array                 # (n, 26) latent vectors
    weights: Array                   # (n,) nonnegative, sums to 1
    degenerate: bool = False         # set after a total-miss reinit

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.particles.ndim != 2 or self.particles.shape[1] != 26:
            raise ValueError("particles must be (n, 26)")
        if self.weights.shape != (self.particles.shape[0],):
            raise ValueError("weights must match the particle count")
        if np.any(self.weights < 0):
            raise ValueError("negative particle weight")
        total = self.weights.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError("weights must sum to a positive finite value")
        self.weights = self.weights / total

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self) -> Array:
        return self.weights @ self.particles


def init_particles(n: int, obj: ObjectSpec, regime: FrictionRegime | None,
                   rng: np.random.Generator, pose_noise: float = 0.01
                   ) -> ParticleBelief:
    """Prior draws matching the episode generative model."""
    parts = np.zeros((n, 26))
    parts[:, 0:2] = rng.normal(0.0, pose_noise, size=(n, 2))
    if regime is not None:
        mu_o = np.array([regime.sample_mu(rng) for _ in range(n)])
    else:
        mu_o = np.full(n, obj.mu_o)
    mu_eff = np.sqrt(0.35 * mu_o)
    kappa = np.maximum(100.0, rng.normal(1000.0, 250.0, size=n)) / 1e3
    for i in range(5):
        base = 6 + 4 * i
        parts[:, base + 0] = mu_eff
        parts[:, base + 1] = kappa
        parts[:, base + 2] = 5.0
        parts[:, base + 3] = rng.uniform(0.0, 0.01, size=n)
    return ParticleBelief(parts, np.full(n, 1.0 / n))


class PfModel:
    """Observation and process model the filter assumes.

    Knows the object catalog entry and watches the live hand state; the
    latent itself is static apart from diffusion, since actions move the
    hand rather than the object.
    """

    def __init__(self, obj: ObjectSpec, hand: HandModel,
                 regime: FrictionRegime | None,
                 tactile_floor: float = 1.0):
        self.obj = obj
        self.hand = hand
        self.tactile_floor = tactile_floor
        if regime is not None:
            lo, hi = regime.mu_range()
            mu_span = effective_friction(0.35, hi) - effective_friction(0.35, lo)
        else:
            mu_span = 0.1
        std = np.zeros(26)
        std[0:2] = 0.01 * 0.06          # 1% of the pose spread per dim
        std[2:6] = 1e-5
        for i in range(5):
            base = 6 + 4 * i
            std[base + 0] = 0.01 * mu_span
            std[base + 1] = 0.01 * 1.0  # kN/m slot
            std[base + 3] = 1e-4
        self.process_std = std

    def propagate(self, particles: Array, rng: np.random.Generator) -> Array:
        noise = rng.standard_normal(particles.shape) * self.process_std
        out = particles + noise
        out[:, 6::4] = np.clip(out[:, 6::4], 1e-3, None)
        out[:, 7::4] = np.clip(out[:, 7::4], 0.05, None)
        out[:, 9::4] = np.clip(out[:, 9::4], 0.0, None)
        return out

    def log_likelihood(self, particle: Array, obs: Observation) -> float:
        """Pose factor times a tactile factor on flagged fingers.

        Deliberately scalar: one particle at a time, mirroring the
        reference filter this stands in for.
        """
        diff = obs.pose - particle[:6]
        ll = -0.5 * float(diff @ diff) / SIGMA_BASE ** 2
        tips = self.hand.fingertips()
        center = particle[:3]
        for i in range(5):
            sd, _ = signed_distance(self.obj, center, tips[i])
            pen = max(0.0, -sd)
            predicted_contact = sd <= CONTACT_TOL
            observed = obs.contacts[i] > 0.5
            if predicted_contact != observed:
                ll += np.log(0.2)
            if observed:
                kappa = particle[6 + 4 * i + 1] * 1e3
                pred = kappa * pen
                sigma = max(self.tactile_floor, 0.2 * obs.tactile[i])
                r = (obs.tactile[i] - pred) / sigma
                ll += -0.5 * r * r
        return ll


def systematic_resample(weights: Array, rng: np.random.Generator) -> Array:
    n = weights.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def pf_update(belief: ParticleBelief, action: Array, obs: Observation,
              model: PfModel, rng: np.random.Generator) -> ParticleBelief:
    """Diffuse, reweight by the observation, resample when ESS collapses.

    A total likelihood miss (all weights underflow) reinitializes to
    uniform weights over the diffused particles and flags the belief as
    degenerate rather than raising.
    """
    del action                        # latent is static under hand motion
    parts = model.propagate(belief.particles, rng)
    loglik = np.array([model.log_likelihood(parts[i], obs)
                       for i in range(parts.shape[0])])
    logw = np.log(np.maximum(belief.weights, 1e-300)) + loglik
    peak = logw.max()
    if not np.isfinite(peak):
        n = parts.shape[0]
        return ParticleBelief(parts, np.full(n, 1.0 / n), degenerate=True)
    w = np.exp(logw - peak)
    w_sum = w.sum()
    if w_sum <= 0 or not np.isfinite(w_sum):
        n = parts.shape[0]
        return ParticleBelief(parts, np.full(n, 1.0 / n), degenerate=True)
    w = w / w_sum
    out = ParticleBelief(parts, w, degenerate=False)
    if out.ess() < parts.shape[0] / 2.0:
        idx = systematic_resample(out.weights, rng)
        n = parts.shape[0]
        out = ParticleBelief(parts[idx], np.full(n, 1.0 / n))
    return out


def pf_cvar(belief: ParticleBelief, costs: Array, beta: float) -> float:
    """Weighted tail mean: smallest high-cost prefix holding (1-beta) mass."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    costs = np.asarray(costs, dtype=float)
    if costs.shape != belief.weights.shape:
        raise ValueError("one cost per particle required")
    order = np.argsort(-costs, kind="stable")
    w = belief.weights[order]
    c = costs[order]
    target = (1.0 - beta) - 1e-12
    cum = np.cumsum(w)
    m = int(np.searchsorted(cum, target) + 1)
    m = min(m, len(c))
    mass = cum[m - 1]
    if mass <= 0:
        return float(c.mean())
    return float((w[:m] @ c[:m]) / mass)


def pf_particle_costs(belief: ParticleBelief, action: Array,
                      hand: HandModel, active: Array) -> Array:
    """Scalar per-particle grasp costs at the given action."""
    costs = np.empty(belief.particles.shape[0])
    idx = [i for i in range(5) if active[i]]
    for j in range(belief.particles.shape[0]):
        theta = LatentState.from_vector(belief.particles[j])
        theta = LatentState(theta.pose, [theta.contacts[i] for i in idx])
        costs[j] = grasp_cost(theta, action, hand)
    return costs


def pf_mpc_episode(env: Simulator, cfg: MpcConfig, rng: np.random.Generator,
                   n_particles: int = 100) -> EpisodeRecord:
    """Closed-loop particle-filter baseline over the candidate grid."""
    regime = getattr(env, "regime", None)
    belief = init_particles(n_particles, env.obj, regime, rng)
    model = PfModel(env.obj, env.hand, regime)
    grid = candidate_actions(cfg.a_max)
    obs = env.observe(np.zeros(6))
    record = EpisodeRecord(method="pf")
    risk = cfg.risk()

    for t in range(cfg.t_max):
        eps_now = env.current_eps()
        if eps_now >= cfg.eps_des:
            record.reached_quality = True
            break
        t0 = time.perf_counter()
        active = obs.contacts > 0.5
        hand = env.hand.copy()
        scores = np.empty(grid.shape[0])
        for c_idx in range(grid.shape[0]):
            costs = pf_particle_costs(belief, grid[c_idx], hand, active)
            scores[c_idx] = pf_cvar(belief, costs, cfg.beta)
        chosen = int(np.argmin(scores))
        action = grid[chosen]
        chosen_costs = pf_particle_costs(belief, action, hand, active)
        p_fail = float(belief.weights @ sigmoid(
            risk.kappa_f * (chosen_costs - risk.tau_f)))
        dt_plan = time.perf_counter() - t0

        obs = env.step(action)
        belief = pf_update(belief, action, obs, model, rng)
        record.steps.append(StepRecord(
            t=t, chosen=chosen, action=[float(x) for x in action],
            objectives=[float(x) for x in scores],
            fail_probs=[p_fail], gate_violated=False,
            belief_fail_prob=p_fail, eps_before=float(eps_now),
            n_contacts=env.n_contacts(), plan_time_us=dt_plan * 1e6))
        record.plan_time_total += dt_plan
        record.belief_fail_prob = p_fail

    record.final_eps = float(env.current_eps())
    if record.final_eps >= cfg.eps_des:
        record.reached_quality = True
    return record


# -- cross-entropy method --------------------------------------------------

@dataclass
class CemConfig:
    population: int = 64
    elite_frac: float = 0.2
    iterations: int = 3
    init_std: float = 0.05

    def elite_count(self) -> int:
        return int(np.ceil(self.elite_frac * self.population))


def cem_plan(objective, cfg: CemConfig, rng: np.random.Generator,
             init_mean: Array, a_max: float = 0.5) -> Array:
    """Diagonal-Gaussian CEM minimization over a single action."""
    mean = np.clip(np.asarray(init_mean, dtype=float), 0.0, a_max)
    std = np.full(6, cfg.init_std)
    n_elite = cfg.elite_count()
    for _ in range(cfg.iterations):
        pop = rng.normal(mean, std, size=(cfg.population, 6))
        pop = np.clip(pop, 0.0, a_max)
        values = np.array([objective(a) for a in pop])
        elite = pop[np.argsort(values, kind="stable")[:n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), 1e-6)
    return mean


def cem_mpc_episode(phi0: BeliefParams, nets: BeliefNets, env: Simulator,
                    cfg: MpcConfig, rng: np.random.Generator,
                    cem_cfg: CemConfig | None = None) -> EpisodeRecord:
    """Neural belief, risk-neutral objective, CEM action search."""
    cem_cfg = cem_cfg if cem_cfg is not None else CemConfig()
    phi = phi0.copy()
    h = np.zeros(nets.f_trans.layers[-1].b.shape[0])
    obs = env.observe(np.zeros(6))
    record = EpisodeRecord(method="cem")
    risk = cfg.risk()
    grid = candidate_actions(cfg.a_max)

    for t in range(cfg.t_max):
        eps_now = env.current_eps()
        if eps_now >= cfg.eps_des:
            record.reached_quality = True
            break
        t0 = time.perf_counter()
        evaluator = CostEvaluator(env.hand.copy(), obs.contacts > 0.5)
        batch = sample_belief_batch(phi, cfg.n_samples, rng)
        latents = batch.values

        def objective(a: Array) -> float:
            return float(evaluator.costs(latents, a[None, :]).mean())

        seed_scores = np.array([objective(a) for a in grid])
        init_mean = grid[int(np.argmin(seed_scores))]
        action = cem_plan(objective, cem_cfg, rng, init_mean, cfg.a_max)
        chosen_costs = evaluator.costs(latents, action[None, :])
        p_fail = float(np.mean(sigmoid(
            risk.kappa_f * (chosen_costs - risk.tau_f))))
        dt_plan = time.perf_counter() - t0

        obs = env.step(action)
        h, phi = neural_belief_update(h, phi, action, obs, nets,
                                      ema=cfg.ema_rate)
        record.steps.append(StepRecord(
            t=t, chosen=-1, action=[float(x) for x in action],
            objectives=[float(objective(action))],
            fail_probs=[p_fail], gate_violated=False,
            belief_fail_prob=p_fail, eps_before=float(eps_now),
            n_contacts=env.n_contacts(), plan_time_us=dt_plan * 1e6))
        record.plan_time_total += dt_plan
        record.belief_fail_prob = p_fail

    record.final_eps = float(env.current_eps())
    if record.final_eps >= cfg.eps_des:
        record.reached_quality = True
    return record


# -- single-Gaussian MPC ---------------------------------------------------

def _require_single(phi: BeliefParams, nets: BeliefNets | None) -> None:
    if phi.k != 1 or (nets is not None and nets.k != 1):
        raise ValueError("gaussian baseline needs a one-component belief")


def gauss_mpc_step(phi: BeliefParams, obs: Observation, cfg: MpcConfig,
                   evaluator: CostEvaluator, rng: np.random.Generator,
                   nets: BeliefNets | None = None,
                   h: Array | None = None) -> PlanStepResult:
    """Identical machinery with the risk blend switched to the mean."""
    _require_single(phi, nets)
    return plan_step(phi, obs, replace(cfg, lambda_c=0.0), evaluator, rng,
                     nets=nets, h=h)


def gauss_cvar_mpc_step(phi: BeliefParams, obs: Observation, cfg: MpcConfig,
                        evaluator: CostEvaluator, rng: np.random.Generator,
                        nets: BeliefNets | None = None,
                        h: Array | None = None) -> PlanStepResult:
    """Single Gaussian with a half-weight CVaR blend."""
    _require_single(phi, nets)
    return plan_step(phi, obs, replace(cfg, lambda_c=0.5), evaluator, rng,
                     nets=nets, h=h)


def gauss_mpc_episode(phi0: BeliefParams, nets: BeliefNets, env: Simulator,
                      cfg: MpcConfig, rng: np.random.Generator
                      ) -> EpisodeRecord:
    _require_single(phi0, nets)
    return vnb_mpc_episode(phi0, nets, env, replace(cfg, lambda_c=0.0), rng,
                           method="gauss")


def gauss_cvar_mpc_episode(phi0: BeliefParams, nets: BeliefNets,
                           env: Simulator, cfg: MpcConfig,
                           rng: np.random.Generator) -> EpisodeRecord:
    _require_single(phi0, nets)
    return vnb_mpc_episode(phi0, nets, env, replace(cfg, lambda_c=0.5), rng,
                           method="gauss-cvar")
