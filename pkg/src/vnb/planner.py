"""Risk-sensitive MPC over a mixture belief.

Each planning step optimizes one candidate action sequence per mixture
component under that component's reparameterized samples, gates the
candidates on believed failure probability, then executes the best
feasible one. The per-component descents share one vectorized engine:
with the latent samples frozen, every cost term except the closure
distances is constant, and the distances reduce to dist^2 = A + 2sB +
s^2 in the per-finger travel s, so all components and starts advance in
a handful of array ops per iteration. Planning-only wall time is tracked
per step so benchmark timing excludes simulation and belief updates.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefParams, belief_entropy_bound, sample_belief_batch
from .dynamics import (D_HIDDEN, BeliefNets, Observation, decode_belief,
                       neural_belief_update)
from .grasp import (EMPTY_CONTACT_COST, CostWeights, HandModel,
                    _contact_cost_terms, _MU_FLOOR, grasp_cost_batch,
                    split_latent_batch, visual_cost)
from .risk import RiskConfig, sigmoid, softplus, soft_cvar, soft_cvar_grad

Array = np.ndarray


@dataclass
class MpcConfig:
    """Planner knobs; defaults are the desk-scale grasp settings."""

    beta: float = 0.9
    delta: float = 0.25              # failure-probability gate
    # half the typical settled five-contact quality in this environment,
    # so healthy nominal episodes finish by quality instead of timeout
    eps_des: float = 0.002
    horizon: int = 1
    grad_steps: int = 25
    step_size: float = 0.05
    n_samples: int = 256
    t_max: int = 80
    lambda_c: float = 1.0            # 1 = pure CVaR, 0 = risk-neutral mean
    lambda_v: float = 0.0
    gamma: float = 0.05              # entropy bonus weight
    multistart: tuple[float, ...] = (0.05, 0.10, 0.15)
    a_max: float = 0.5
    kappa_rho: float = 5.0
    kappa_f: float = 100.0
    tau_f: float = 5.8
    ema_rate: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")
        if self.horizon < 1 or self.grad_steps < 1 or self.t_max < 1:
            raise ValueError("horizon, grad_steps, t_max must be >= 1")
        if self.step_size <= 0.0 or self.n_samples < 2 or self.a_max <= 0.0:
            raise ValueError("bad step_size / n_samples / a_max")

    def risk(self) -> RiskConfig:
        return RiskConfig(beta=self.beta, kappa_rho=self.kappa_rho,
                          kappa_f=self.kappa_f, tau_f=self.tau_f,
                          lambda_c=self.lambda_c)

    @classmethod
    def from_file(cls, path: str) -> "MpcConfig":
        """Load planner settings from a JSON or TOML file.

        Keys mirror the field names; unknown keys are rejected so typos
        fail loudly instead of silently running defaults.
        """
        text = open(path, "rb").read()
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            raw = tomllib.loads(text.decode())
        else:
            raw = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown planner config keys: {sorted(unknown)}")
        if "multistart" in raw:
            raw["multistart"] = tuple(float(x) for x in raw["multistart"])
        return cls(**raw)


@dataclass
class FrozenLatents:
    """Action-independent pieces of the cost over a fixed sample set.

    With samples frozen, cost(a) = base + alpha_g * sum_j dist_j(a)
    - alpha_s * abar - alpha_r * relu(alpha_n * abar - mu_inv_min),
    and dist_j^2 = A_j + 2 s_j B_j + s_j^2 where s_j is finger j's
    scalar travel along its ray.
    """

    a_sq: Array                      # (m, 5) |base - center|^2
    b_dot: Array                     # (m, 5) (base - center) . dir
    base_cost: Array                 # (m,) contact-quality constant
    mu_inv_min: Array                # (m,)
    any_act: Array                   # (m,) bool

    @property
    def m(self) -> int:
        return self.a_sq.shape[-2]

    def with_start_axis(self) -> "FrozenLatents":
        """Insert a broadcast axis for multistart lanes after the leading one."""
        return FrozenLatents(self.a_sq[:, None], self.b_dot[:, None],
                             self.base_cost[:, None],
                             self.mu_inv_min[:, None],
                             self.any_act[:, None])


class CostEvaluator:
    """Grasp cost over latent samples for a fixed hand state.

    Contact masking is frozen for the planning step: a finger slot is
    active when the latest observation reports it in contact.
    """

    def __init__(self, hand: HandModel, active: Array,
                 weights: CostWeights | None = None):
        self.hand = hand
        self.active = np.asarray(active, dtype=bool).reshape(5)
        self.weights = weights if weights is not None else CostWeights()

    # -- frozen-sample fast path ------------------------------------------

    def freeze(self, latents: Array) -> FrozenLatents:
        centers, mu, kappa, slip = split_latent_batch(latents)
        rel = self.hand.bases[None, :, :] - centers[:, None, :]
        a_sq = np.einsum("mjk,mjk->mj", rel, rel)
        b_dot = np.einsum("mjk,jk->mj", rel, self.hand.dirs)
        act = np.broadcast_to(self.active, mu.shape)
        n_act = act.sum(axis=1)
        any_act = n_act > 0
        terms = _contact_cost_terms(mu, kappa, slip)
        base = np.where(any_act,
                        (terms * act).sum(axis=1) / np.maximum(n_act, 1),
                        EMPTY_CONTACT_COST)
        mu_inv = np.where(act, 1.0 / np.clip(mu, _MU_FLOOR, None), np.inf)
        return FrozenLatents(a_sq, b_dot, base, mu_inv.min(axis=1), any_act)

    def _travel(self, q: Array) -> Array:
        return self.hand.joint_map @ q

    def lane_costs_grads(self, fz: FrozenLatents, actions: Array,
                         want_grads: bool = True
                         ) -> tuple[Array, Array | None]:
        """Costs (..., m) and gradients (..., m, H, 6) for lane actions.

        `actions` has shape (..., H, 6); all lanes share the frozen
        sample set and the evaluator's starting joint state.
        """
        actions = np.asarray(actions, dtype=float)
        lanes = actions.shape[:-2]
        h_len = actions.shape[-2]
        w = self.weights
        dt = self.hand.dt
        s0 = self._travel(self.hand.q)

        costs = np.zeros(lanes + (fz.m,))
        grads = np.zeros(lanes + (fz.m, h_len, 6)) if want_grads else None
        cum = np.zeros(lanes + (6,))
        for h in range(h_len):
            a_h = actions[..., h, :]
            cum = cum + a_h
            s = s0 + dt * (cum @ self.hand.joint_map.T)     # (..., 5)
            s_e = s[..., None, :]
            dist_sq = fz.a_sq + 2.0 * s_e * fz.b_dot + s_e ** 2
            dist = np.sqrt(np.maximum(dist_sq, 1e-18))
            a_bar = a_h.mean(axis=-1)                        # (...,)
            rho_arg = w.alpha_n * a_bar[..., None] - fz.mu_inv_min
            rho_on = fz.any_act & (rho_arg > 0.0)
            costs += (-w.alpha_s * a_bar[..., None]
                      + w.alpha_g * dist.sum(axis=-1)
                      + fz.base_cost
                      - w.alpha_r * np.where(rho_on, rho_arg, 0.0))
            if want_grads:
                t_coef = (fz.b_dot + s_e) / dist             # (..., m, 5)
                fk = w.alpha_g * dt * (t_coef @ self.hand.joint_map)
                grads[..., h, :] += fk - w.alpha_s / 6.0
                grads[..., h, :] -= (w.alpha_r * w.alpha_n / 6.0) \
                    * rho_on[..., None]
                if h > 0:
                    grads[..., :h, :] += fk[..., None, :]
        return costs, grads

    # -- generic per-call path (horizon loop over full latents) -----------

    def costs(self, latents: Array, actions: Array) -> Array:
        actions = np.atleast_2d(actions)
        q = self.hand.q.copy()
        total = np.zeros(np.atleast_2d(latents).shape[0])
        for a in actions:
            c, _, _ = self._step_costs(latents, a, q)
            total += c
            q = q + a * self.hand.dt
        return total

    def costs_and_grads(self, latents: Array, actions: Array
                        ) -> tuple[Array, Array]:
        """Returns (costs (n,), grads (n, H, 6)) for the summed horizon."""
        actions = np.atleast_2d(actions)
        h_len = actions.shape[0]
        n = np.atleast_2d(latents).shape[0]
        q = self.hand.q.copy()
        total = np.zeros(n)
        grads = np.zeros((n, h_len, 6))
        for h, a in enumerate(actions):
            c, g, g_fk = self._step_costs(latents, a, q)
            total += c
            grads[:, h, :] += g
            if h > 0:
                # earlier actions move the same fingertips through FK
                grads[:, :h, :] += g_fk[:, None, :]
            q = q + a * self.hand.dt
        return total, grads

    def _step_costs(self, latents: Array, action: Array, q0: Array
                    ) -> tuple[Array, Array, Array]:
        centers, mu, kappa, slip = split_latent_batch(latents)
        act = np.broadcast_to(self.active, mu.shape)
        return grasp_cost_batch(centers, mu, kappa, slip, act, action,
                                self.hand, q0=q0)


@dataclass
class OptResult:
    actions: Array                   # (H, 6)
    cvar: float
    trace: list[float]
    aborted: bool = False


def _blend_value(costs: Array, cfg: MpcConfig, risk: RiskConfig) -> float:
    value = cfg.lambda_c * soft_cvar(costs, risk)
    if cfg.lambda_c < 1.0:
        value += (1.0 - cfg.lambda_c) * float(costs.mean())
    return value


def optimize_action_for_component(phi_k: BeliefParams, a_init: Array,
                                  cfg: MpcConfig, evaluator: CostEvaluator,
                                  rng: np.random.Generator,
                                  noises: Array | None = None) -> OptResult:
    """Projected gradient descent on the risk objective under one component.

    The noise set is drawn once and held fixed, so every iterate sees the
    same latent samples; with lambda_c = 1 the objective is exactly the
    soft CVaR and the returned value never exceeds the initial one. The
    step size is halved (up to four times) within an iteration whenever
    the trial step fails to decrease the objective on the fixed noise
    set. A non-finite gradient aborts and returns the initial actions.
    """
    if phi_k.k != 1:
        raise ValueError("component optimizer expects a single-component belief")
    risk = cfg.risk()
    if noises is None:
        noises = rng.standard_normal((cfg.n_samples, phi_k.d))
    mean = phi_k.means[0]
    std = np.exp(phi_k.log_stds[0])
    latents = mean[None, :] + noises * std[None, :]

    a = np.clip(np.atleast_2d(np.asarray(a_init, dtype=float)), 0.0, cfg.a_max)
    current = _blend_value(evaluator.costs(latents, a), cfg, risk)
    trace = [current]

    for _ in range(cfg.grad_steps):
        costs, grads = evaluator.costs_and_grads(latents, a)
        flat = grads.reshape(grads.shape[0], -1)
        g = cfg.lambda_c * soft_cvar_grad(costs, flat, risk)
        if cfg.lambda_c < 1.0:
            g = g + (1.0 - cfg.lambda_c) * flat.mean(axis=0)
        if not np.all(np.isfinite(g)):
            init = np.clip(np.atleast_2d(np.asarray(a_init, dtype=float)),
                           0.0, cfg.a_max)
            return OptResult(init, trace[0], [trace[0]], aborted=True)
        g = g.reshape(a.shape)

        alpha = cfg.step_size
        improved = False
        for _ in range(5):                      # initial try + 4 halvings
            cand = np.clip(a - alpha * g, 0.0, cfg.a_max)
            value = _blend_value(evaluator.costs(latents, cand), cfg, risk)
            if value <= current:
                a, current, improved = cand, value, True
                break
            alpha *= 0.5
        trace.append(current)
        if not improved:
            break
    return OptResult(a, current, trace)


def _lane_quantile(costs: Array, beta: float) -> Array:
    """Row-wise linear-interpolation quantile over the last axis.

    Matches np.quantile's default method but skips its dispatch
    overhead, which dominates at a few hundred samples per lane.
    """
    m = costs.shape[-1]
    pos = (m - 1) * beta
    lo = int(pos)
    if lo >= m - 1:
        return costs.max(axis=-1)
    part = np.partition(costs, (lo, lo + 1), axis=-1)
    lower = part[..., lo]
    return lower + (pos - lo) * (part[..., lo + 1] - lower)


def _lane_objective(costs: Array, cfg: MpcConfig) -> Array:
    """Blended risk objective per lane; costs shaped (..., m)."""
    m = costs.shape[-1]
    eta = _lane_quantile(costs, cfg.beta)
    scale = (1.0 - cfg.beta) * m
    soft = eta + softplus(costs - eta[..., None],
                          cfg.kappa_rho).sum(axis=-1) / scale
    value = cfg.lambda_c * soft
    if cfg.lambda_c < 1.0:
        value = value + (1.0 - cfg.lambda_c) * costs.mean(axis=-1)
    return value


def _lane_gradient(costs: Array, grads: Array, cfg: MpcConfig) -> Array:
    """d(blended objective)/d(actions) per lane.

    costs (..., m), grads (..., m, H, 6) -> (..., H, 6). The quantile
    anchor is frozen, matching soft_cvar_grad.
    """
    m = costs.shape[-1]
    eta = _lane_quantile(costs, cfg.beta)
    w = sigmoid(cfg.kappa_rho * (costs - eta[..., None]))
    scale = (1.0 - cfg.beta) * m
    g = np.einsum("...m,...mhj->...hj", w, grads) / scale
    g = cfg.lambda_c * g
    if cfg.lambda_c < 1.0:
        g = g + (1.0 - cfg.lambda_c) * grads.mean(axis=-3)
    return g


def _optimize_lanes(fz_all: FrozenLatents, starts: Array,
                    cfg: MpcConfig, evaluator: CostEvaluator
                    ) -> tuple[Array, Array, Array]:
    """Batched descent: one frozen sample set per component, S starts each.

    Returns (actions (K, S, H, 6), values (K, S), aborted (K, S)). Lane
    (k, s) follows exactly the sequential optimizer's iteration: same
    gradient, same step-halving rule, same stop-on-failure.
    """
    k, s_count = starts.shape[:2]
    a = np.clip(starts, 0.0, cfg.a_max)
    fz = fz_all.with_start_axis()

    costs, _ = evaluator.lane_costs_grads(fz, a, want_grads=False)
    current = _lane_objective(costs, cfg)
    aborted = np.zeros((k, s_count), dtype=bool)
    live = np.ones((k, s_count), dtype=bool)
    init = a.copy()

    for _ in range(cfg.grad_steps):
        if not live.any():
            break
        costs, grads = evaluator.lane_costs_grads(fz, a)
        g = _lane_gradient(costs, grads, cfg)
        bad = ~np.isfinite(g).all(axis=(-2, -1)) & live
        if bad.any():
            a[bad] = init[bad]
            current[bad] = _lane_objective(
                evaluator.lane_costs_grads(fz, init, want_grads=False)[0],
                cfg)[bad]
            aborted |= bad
            live &= ~bad
        alpha = np.full((k, s_count), cfg.step_size)
        pending = live.copy()
        for _ in range(5):
            if not pending.any():
                break
            cand = np.clip(a - alpha[..., None, None] * g, 0.0, cfg.a_max)
            val = _lane_objective(
                evaluator.lane_costs_grads(fz, cand, want_grads=False)[0],
                cfg)
            accept = pending & (val <= current)
            a[accept] = cand[accept]
            current[accept] = val[accept]
            pending &= ~accept
            alpha[pending] *= 0.5
        live &= ~pending                 # no improving step: lane is done
    return a, current, aborted


def mpc_objective(phi: BeliefParams, actions: Array, obs: Observation,
                  cfg: MpcConfig, rng: np.random.Generator,
                  evaluator: CostEvaluator,
                  nets: BeliefNets | None = None,
                  h: Array | None = None) -> float:
    """Full planning objective for a candidate sequence under the mixture.

    Risk blend over mixture samples, plus the observation-quality term
    and the entropy bonus of the predicted terminal belief (rolled
    through the transition net when nets and h are given, else the
    current belief's bound).
    """
    batch = sample_belief_batch(phi, cfg.n_samples, rng)
    costs = evaluator.costs(batch.values, actions)
    value = _blend_value(costs, cfg, cfg.risk())
    value += cfg.lambda_v * visual_cost(obs)
    if nets is not None and h is not None:
        h_roll = h
        for a in np.atleast_2d(actions):
            h_roll = nets.f_trans(np.concatenate([h_roll, a]))
        terminal = decode_belief(nets, h_roll, temperature=phi.temperature)
        value += cfg.gamma * belief_entropy_bound(terminal)
    else:
        value += cfg.gamma * belief_entropy_bound(phi)
    return float(value)


@dataclass
class PlanStepResult:
    chosen: int
    actions: Array                   # (H, 6) for the chosen component
    objectives: Array                # (K,) blended objective per component
    fail_probs: Array                # (K,) believed failure prob per component
    gate_violated: bool              # no component satisfied the gate
    belief_fail_prob: float          # full-mixture estimate at chosen actions
    plan_time: float                 # seconds, planning only


def plan_step(phi: BeliefParams, obs: Observation, cfg: MpcConfig,
              evaluator: CostEvaluator, rng: np.random.Generator,
              nets: BeliefNets | None = None,
              h: Array | None = None) -> PlanStepResult:
    """One MPC step: per-component optimization, gate, selection."""
    t0 = time.perf_counter()
    risk = cfg.risk()
    weights = phi.weights()
    k = phi.k
    shared = cfg.lambda_v * visual_cost(obs)
    s_count = len(cfg.multistart)

    noises = np.stack([rng.standard_normal((cfg.n_samples, phi.d))
                       for _ in range(k)])
    stds = np.exp(phi.log_stds)
    latents = phi.means[:, None, :] + noises * stds[:, None, :]
    frozen = [evaluator.freeze(latents[comp]) for comp in range(k)]
    fz_all = FrozenLatents(*[np.stack([getattr(f, n) for f in frozen])
                             for n in ("a_sq", "b_dot", "base_cost",
                                       "mu_inv_min", "any_act")])
    starts = np.tile(
        np.asarray(cfg.multistart)[None, :, None, None],
        (k, 1, cfg.horizon, 6))
    actions, values, _ = _optimize_lanes(fz_all, starts, cfg, evaluator)

    best = values.argmin(axis=1)
    rows = np.arange(k)
    comp_actions = actions[rows, best]
    objectives = values[rows, best] + shared
    comp_costs, _ = evaluator.lane_costs_grads(fz_all, comp_actions,
                                               want_grads=False)
    fail_probs = sigmoid(risk.kappa_f * (comp_costs - risk.tau_f)).mean(axis=1)

    if nets is not None and h is not None:
        for comp in range(k):
            h_roll = h
            for a in comp_actions[comp]:
                h_roll = nets.f_trans(np.concatenate([h_roll, a]))
            terminal = decode_belief(nets, h_roll,
                                     temperature=phi.temperature)
            objectives[comp] += cfg.gamma * belief_entropy_bound(terminal)
    else:
        objectives += cfg.gamma * belief_entropy_bound(phi)

    feasible = fail_probs <= cfg.delta
    if feasible.any():
        masked = np.where(feasible, objectives, np.inf)
        # weight-aware tie-break: prefer the likelier component
        chosen = int(np.lexsort((-weights, masked))[0])
        gate_violated = False
    else:
        chosen = int(np.argmin(fail_probs))
        gate_violated = True

    mix = sample_belief_batch(phi, cfg.n_samples, rng)
    mix_costs = evaluator.costs(mix.values, comp_actions[chosen])
    belief_fail = float(np.mean(sigmoid(
        risk.kappa_f * (mix_costs - risk.tau_f))))
    dt_plan = time.perf_counter() - t0
    return PlanStepResult(chosen, comp_actions[chosen], objectives,
                          fail_probs, gate_violated, belief_fail, dt_plan)


@dataclass
class StepRecord:
    t: int
    chosen: int
    action: list[float]
    objectives: list[float]
    fail_probs: list[float]
    gate_violated: bool
    belief_fail_prob: float
    eps_before: float
    n_contacts: int
    plan_time_us: float              # serialized unit is microseconds


@dataclass
class EpisodeRecord:
    method: str
    steps: list[StepRecord] = field(default_factory=list)
    final_eps: float = -1.0
    reached_quality: bool = False
    belief_fail_prob: float = 0.0    # at the final executed step
    plan_time_total: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "final_eps": self.final_eps,
            "reached_quality": self.reached_quality,
            "belief_fail_prob": self.belief_fail_prob,
            "plan_time_total": self.plan_time_total,
            "meta": self.meta,
            "steps": [vars(s) for s in self.steps],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "EpisodeRecord":
        raw = json.loads(text)
        steps = [StepRecord(**s) for s in raw["steps"]]
        return cls(method=raw["method"], steps=steps,
                   final_eps=raw["final_eps"],
                   reached_quality=raw["reached_quality"],
                   belief_fail_prob=raw["belief_fail_prob"],
                   plan_time_total=raw["plan_time_total"],
                   meta=raw.get("meta", {}))


def vnb_mpc_episode(phi0: BeliefParams, nets: BeliefNets, env,
                    cfg: MpcConfig, rng: np.random.Generator,
                    method: str = "vnb") -> EpisodeRecord:
    """Closed-loop episode: plan, act, observe, update belief.

    Terminates when the simulator's current grasp quality reaches
    eps_des or after t_max steps. Belief updates run through the
    recurrent nets with componentwise EMA blending and are excluded
    from the recorded planning time.
    """
    phi = phi0.copy()
    h = np.zeros(D_HIDDEN)
    obs = env.observe(np.zeros(6))
    record = EpisodeRecord(method=method)

    for t in range(cfg.t_max):
        eps_now = env.current_eps()
        if eps_now >= cfg.eps_des:
            record.reached_quality = True
            break
        evaluator = CostEvaluator(env.hand.copy(), obs.contacts > 0.5)
        step = plan_step(phi, obs, cfg, evaluator, rng, nets=nets, h=h)
        action = step.actions[0]
        obs = env.step(action)
        h, phi = neural_belief_update(h, phi, action, obs.to_vector(), nets,
                                      ema=cfg.ema_rate)
        record.steps.append(StepRecord(
            t=t, chosen=step.chosen, action=[float(x) for x in action],
            objectives=[float(x) for x in step.objectives],
            fail_probs=[float(x) for x in step.fail_probs],
            gate_violated=step.gate_violated,
            belief_fail_prob=step.belief_fail_prob,
            eps_before=float(eps_now), n_contacts=env.n_contacts(),
            plan_time_us=step.plan_time * 1e6))
        record.plan_time_total += step.plan_time
        record.belief_fail_prob = step.belief_fail_prob

    record.final_eps = float(env.current_eps())
    if record.final_eps >= cfg.eps_des:
        record.reached_quality = True
    return record
