import numpy as np
import pytest

from oracles import kalman_posterior_mean, weighted_tail_mean
from vnb.baselines import (CemConfig, ParticleBelief, PfModel,
                           candidate_actions, cem_mpc_episode, cem_plan,
                           gauss_cvar_mpc_step, gauss_mpc_step,
                           init_particles, pf_cvar, pf_mpc_episode,
                           pf_update, systematic_resample)
from vnb.belief import BeliefParams
from vnb.dynamics import BeliefNets, decode_belief
from vnb.grasp import LATENT_DIM
from vnb.planner import CostEvaluator, MpcConfig, plan_step
from vnb.risk import hard_cvar
from vnb.sim import FrictionRegime, Simulator, object_by_name


class _FlatModel:
    """Identity dynamics, constant likelihood."""

    def propagate(self, particles, rng):
        return particles

    def log_likelihood(self, particle, obs):
        return 0.0


class _PeakModel:
    """Scores only latent dim 0 against a sharp target."""

    def __init__(self, target, sharpness=1e8):
        self.target = target
        self.sharpness = sharpness

    def propagate(self, particles, rng):
        return particles

    def log_likelihood(self, particle, obs):
        return -self.sharpness * (particle[0] - self.target) ** 2


class _MissModel(_FlatModel):
    def log_likelihood(self, particle, obs):
        return -np.inf


class _RandomWalkModel:
    """1-D random walk in latent dim 0 with Gaussian observations."""

    def __init__(self, q, r, rng):
        self.q, self.r, self.rng = q, r, rng

    def propagate(self, particles, rng):
        out = particles.copy()
        out[:, 0] += rng.normal(0.0, np.sqrt(self.q), particles.shape[0])
        return out

    def log_likelihood(self, particle, obs):
        return -0.5 * (obs - particle[0]) ** 2 / self.r


def flat_particles(n, rng, spread=1.0):
    parts = np.zeros((n, LATENT_DIM))
    parts[:, 0] = rng.normal(0.0, spread, n)
    return parts


def test_particle_belief_normalizes_and_validates(rng):
    bel = ParticleBelief(flat_particles(4, rng), np.array([2.0, 1, 1, 0]))
    assert bel.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(bel.weights, [0.5, 0.25, 0.25, 0.0])
    assert bel.ess() == pytest.approx(1.0 / np.sum(bel.weights ** 2))
    assert bel.mean().shape == (LATENT_DIM,)
    with pytest.raises(ValueError):
        ParticleBelief(flat_particles(3, rng), np.array([0.5, 0.6, -0.1]))
    with pytest.raises(ValueError):
        ParticleBelief(flat_particles(3, rng), np.zeros(3))
    with pytest.raises(ValueError):
        ParticleBelief(np.zeros((3, 7)), np.full(3, 1 / 3))


def test_init_particles_prior(rng):
    bel = init_particles(200, object_by_name("sphere-small"),
                         FrictionRegime("nominal"), rng)
    assert np.allclose(bel.weights, 1 / 200)
    mu = bel.particles[:, 6::4]
    assert mu.min() >= 0.35 and mu.max() <= 0.61
    assert np.all(bel.particles[:, 7::4] >= 0.1)     # kN/m slot
    assert np.all(bel.particles[:, 8::4] == 5.0)
    slip = bel.particles[:, 9::4]
    assert slip.min() >= 0.0 and slip.max() <= 0.01


def test_pf_update_uniform_likelihood_keeps_weights(rng):
    w = np.array([0.3, 0.25, 0.25, 0.2])
    bel = ParticleBelief(flat_particles(4, rng), w.copy())
    out = pf_update(bel, np.zeros(6), None, _FlatModel(), rng)
    assert np.allclose(out.weights, w, atol=1e-12)
    assert not out.degenerate
    assert np.array_equal(out.particles, bel.particles)


def test_pf_update_concentrates_on_exact_match(rng):
    parts = flat_particles(50, rng)
    winner = int(np.argmin(np.abs(parts[:, 0] - 0.4)))
    bel = ParticleBelief(parts, np.full(50, 0.02))
    out = pf_update(bel, np.zeros(6), None, _PeakModel(0.4), rng)
    # delta likelihood collapses ESS, so the filter resamples: every
    # surviving particle is a copy of the best match
    assert np.allclose(out.particles, parts[winner])
    assert out.mean()[0] == pytest.approx(parts[winner, 0], abs=1e-12)


def test_pf_update_total_miss_reinitializes(rng):
    bel = ParticleBelief(flat_particles(8, rng), np.full(8, 1 / 8))
    out = pf_update(bel, np.zeros(6), None, _MissModel(), rng)
    assert out.degenerate
    assert np.allclose(out.weights, 1 / 8)


def test_pf_tracks_kalman_posterior():
    q, r, p0, t_len = 0.04, 0.09, 1.0, 4
    gaps = []
    for run in range(100):
        rng = np.random.default_rng(1000 + run)
        x = rng.normal(0.0, np.sqrt(p0))
        zs = []
        for _ in range(t_len):
            x += rng.normal(0.0, np.sqrt(q))
            zs.append(x + rng.normal(0.0, np.sqrt(r)))
        parts = flat_particles(300, rng, spread=np.sqrt(p0))
        bel = ParticleBelief(parts, np.full(300, 1 / 300))
        model = _RandomWalkModel(q, r, rng)
        for z in zs:
            bel = pf_update(bel, np.zeros(6), z, model, rng)
        exact = kalman_posterior_mean(0.0, p0, q, r,
                                      np.zeros(t_len), zs)
        gaps.append(bel.mean()[0] - exact)
    gaps = np.asarray(gaps)
    se = gaps.std(ddof=1) / np.sqrt(len(gaps))
    assert abs(gaps.mean()) < 3 * se + 1e-9


def test_systematic_resample_expected_counts():
    w = np.array([0.42, 0.31, 0.17, 0.10])
    rng = np.random.default_rng(8)
    runs = 10 ** 4
    counts = np.zeros(4)
    for _ in range(runs):
        idx = systematic_resample(w, rng)
        assert idx.shape == (4,)
        counts += np.bincount(idx, minlength=4)
    expected = runs * 4 * w
    # per-run copy counts vary by at most 1 around n*w_i
    assert np.all(np.abs(counts - expected) < 3 * np.sqrt(runs * 0.25))


def test_pf_cvar_uniform_reduces_to_hard_cvar(rng):
    for _ in range(200):
        n = int(rng.integers(2, 150))
        costs = rng.normal(0, 2, n)
        beta = float(rng.uniform(0.05, 0.99))
        bel = ParticleBelief(flat_particles(n, rng), np.full(n, 1.0 / n))
        assert pf_cvar(bel, costs, beta) == pytest.approx(
            hard_cvar(costs, beta), abs=1e-13)


def test_pf_cvar_weighted_matches_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(2, 150))
        costs = rng.normal(0, 2, n)
        weights = rng.uniform(0.01, 1.0, n)
        beta = float(rng.uniform(0.05, 0.99))
        bel = ParticleBelief(flat_particles(n, rng), weights)
        want = weighted_tail_mean(costs, bel.weights, beta)
        assert pf_cvar(bel, costs, beta) == pytest.approx(want, abs=1e-12)


def test_pf_cvar_edge_cases(rng):
    one = ParticleBelief(flat_particles(1, rng), np.ones(1))
    for beta in (0.1, 0.5, 0.99):
        assert pf_cvar(one, np.array([3.7]), beta) == 3.7
    heavy = ParticleBelief(flat_particles(3, rng),
                           np.array([1e-12, 1e-12, 1.0]))
    costs = np.array([9.0, 8.0, 1.0])
    # nearly all mass on the cheap particle: tail must still cover it
    assert pf_cvar(heavy, costs, 0.5) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        pf_cvar(one, np.array([1.0]), 1.0)
    with pytest.raises(ValueError):
        pf_cvar(one, np.array([1.0, 2.0]), 0.5)


def test_pf_model_likelihood_prefers_matching_pose():
    obj = object_by_name("sphere-small")
    env = Simulator(obj, None, np.random.default_rng(0), pose_noise=0.0)
    model = PfModel(obj, env.hand, None)
    obs = env.observe()
    near = np.zeros(LATENT_DIM)
    near[:6] = obs.pose
    far = near.copy()
    far[0] += 0.05
    assert model.log_likelihood(near, obs) > model.log_likelihood(far, obs)


def test_pf_model_propagate_floors(rng):
    obj = object_by_name("sphere-small")
    model = PfModel(obj, Simulator(obj, None, rng).hand,
                    FrictionRegime("wide"))
    parts = np.full((10, LATENT_DIM), -1.0)
    out = model.propagate(parts, rng)
    assert np.all(out[:, 6::4] >= 1e-3)
    assert np.all(out[:, 7::4] >= 0.05)
    assert np.all(out[:, 9::4] >= 0.0)


def test_candidate_grid():
    grid = candidate_actions()
    assert grid.shape == (20, 6)
    assert np.allclose(grid[0], 0.05)
    assert np.allclose(grid[1], [0.05, 0.05, 0, 0, 0, 0])
    assert len({tuple(row) for row in grid}) == 20
    clipped = candidate_actions(a_max=0.12)
    assert clipped.max() == pytest.approx(0.12)


def test_cem_elite_count():
    assert CemConfig().elite_count() == 13
    assert CemConfig(population=10, elite_frac=0.25).elite_count() == 3


def test_cem_converges_on_quadratic():
    # elite std shrinks every pass, so crossing the start gap needs the
    # wider init and a few extra rounds
    target = np.array([0.22, 0.18, 0.3, 0.25, 0.1, 0.4])
    init = np.full(6, 0.05)
    rng = np.random.default_rng(4)

    def objective(a):
        return float(np.sum((a - target) ** 2))

    got = cem_plan(objective, CemConfig(iterations=10, init_std=0.2),
                   rng, init)
    assert objective(got) < objective(init)
    assert np.max(np.abs(got - target)) < 0.1


def test_cem_zero_variance_init_is_fixed_point():
    # 0.25 is a dyadic value, so the 13-elite mean reproduces it exactly
    rng = np.random.default_rng(0)
    init = np.full(6, 0.25)
    got = cem_plan(lambda a: float(a @ a), CemConfig(iterations=1,
                                                     init_std=0.0),
                   rng, init)
    assert np.array_equal(got, init)


def test_cem_refit_mean_is_elite_mean():
    rng = np.random.default_rng(9)
    seen = []

    def objective(a):
        seen.append(a.copy())
        return float(np.sum((a - 0.3) ** 2))

    cfg = CemConfig(iterations=1)
    got = cem_plan(objective, cfg, rng, np.full(6, 0.1))
    pop = np.stack(seen)
    values = np.sum((pop - 0.3) ** 2, axis=1)
    elite = pop[np.argsort(values, kind="stable")[:cfg.elite_count()]]
    assert np.array_equal(got, elite.mean(axis=0))


def _closed_env(seed=21):
    env = Simulator(object_by_name("sphere-small"), None,
                    np.random.default_rng(seed), pose_noise=0.0)
    for _ in range(80):
        env.step(np.full(6, 0.2))
        if env.n_contacts() >= 3:
            break
    return env


def test_gauss_steps_share_planner_machinery(rng):
    env = _closed_env()
    obs = env.observe(np.zeros(6))
    nets1 = BeliefNets.build(1, np.random.default_rng(2))
    phi = decode_belief(nets1, np.zeros(64))
    evaluator = CostEvaluator(env.hand.copy(), obs.contacts > 0.5)
    cfg = MpcConfig(n_samples=64, grad_steps=8, lambda_c=0.9)

    from dataclasses import replace
    got = gauss_cvar_mpc_step(phi, obs, cfg, evaluator,
                              np.random.default_rng(5))
    want = plan_step(phi, obs, replace(cfg, lambda_c=0.5), evaluator,
                     np.random.default_rng(5))
    assert np.array_equal(got.actions, want.actions)
    assert got.chosen == want.chosen

    got0 = gauss_mpc_step(phi, obs, cfg, evaluator, np.random.default_rng(5))
    want0 = plan_step(phi, obs, replace(cfg, lambda_c=0.0), evaluator,
                      np.random.default_rng(5))
    assert np.array_equal(got0.actions, want0.actions)


def test_gauss_requires_single_component(rng):
    env = _closed_env()
    obs = env.observe(np.zeros(6))
    phi2 = BeliefParams(np.zeros(2), np.zeros((2, LATENT_DIM)),
                        np.zeros((2, LATENT_DIM)))
    evaluator = CostEvaluator(env.hand.copy(), obs.contacts > 0.5)
    with pytest.raises(ValueError):
        gauss_mpc_step(phi2, obs, MpcConfig(), evaluator, rng)
    with pytest.raises(ValueError):
        gauss_cvar_mpc_step(phi2, obs, MpcConfig(), evaluator, rng)


def test_gauss_risk_blend_changes_the_plan():
    # same belief, same noise stream; only the CVaR weight differs, and
    # that must be enough to steer the descent somewhere else
    env = _closed_env()
    obs = env.observe(np.zeros(6))
    means = np.zeros((1, LATENT_DIM))
    means[0, :6] = env.params.pose
    means[0, 6::4] = 0.5
    means[0, 7::4] = 1.0
    phi = BeliefParams(np.zeros(1), means,
                       np.full((1, LATENT_DIM), -1.0))
    evaluator = CostEvaluator(env.hand.copy(), obs.contacts > 0.5)
    cfg = MpcConfig(n_samples=64, grad_steps=10)
    a = gauss_mpc_step(phi, obs, cfg, evaluator, np.random.default_rng(3))
    b = gauss_cvar_mpc_step(phi, obs, cfg, evaluator,
                            np.random.default_rng(3))
    assert np.all(a.actions >= 0.0) and np.all(a.actions <= cfg.a_max)
    assert np.all(b.actions >= 0.0) and np.all(b.actions <= cfg.a_max)
    assert not np.allclose(a.actions, b.actions, atol=1e-6)


def test_gauss_episodes_require_single_component(tiny_nets, rng):
    from vnb.baselines import gauss_cvar_mpc_episode, gauss_mpc_episode
    env = Simulator(object_by_name("sphere-small"),
                    FrictionRegime("nominal"), np.random.default_rng(23))
    phi0 = decode_belief(tiny_nets, np.zeros(64))    # k=4
    with pytest.raises(ValueError):
        gauss_mpc_episode(phi0, tiny_nets, env, MpcConfig(), rng)
    with pytest.raises(ValueError):
        gauss_cvar_mpc_episode(phi0, tiny_nets, env, MpcConfig(), rng)


def test_pf_episode_runs_and_records(rng):
    env = Simulator(object_by_name("sphere-small"),
                    FrictionRegime("nominal"), np.random.default_rng(13))
    cfg = MpcConfig(t_max=3, eps_des=10.0, n_samples=32)
    rec = pf_mpc_episode(env, cfg, rng, n_particles=40)
    assert rec.method == "pf"
    assert len(rec.steps) == 3
    for step in rec.steps:
        assert 0 <= step.chosen < 20
        assert 0.0 <= step.belief_fail_prob <= 1.0
        assert step.plan_time_us > 0
    assert rec.plan_time_total > 0


def test_cem_episode_runs_and_records(tiny_nets, rng):
    env = Simulator(object_by_name("sphere-small"),
                    FrictionRegime("nominal"), np.random.default_rng(17))
    phi0 = decode_belief(tiny_nets, np.zeros(64))
    cfg = MpcConfig(t_max=2, eps_des=10.0, n_samples=32)
    rec = cem_mpc_episode(phi0, tiny_nets, env, cfg, rng)
    assert rec.method == "cem"
    assert len(rec.steps) == 2
    for step in rec.steps:
        assert step.chosen == -1
        assert np.all(np.asarray(step.action) >= 0.0)
        assert np.all(np.asarray(step.action) <= cfg.a_max)
