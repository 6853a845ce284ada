"""Benchmark orchestration: episode cross-products and report emission.

Every episode draws its generator from a hash of the master seed and the
episode's coordinates, so the cross-product can run in any order (or in
a worker pool) and still produce identical numbers. Wall-clock planning
times are the one non-reproducible quantity; `freeze_timing` zeroes them
so two runs of the same seed emit byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import (cem_mpc_episode, gauss_cvar_mpc_episode,
                        gauss_mpc_episode, pf_mpc_episode)
from .dynamics import BeliefNets, TrainConfig, decode_belief, train_belief_nets
from .planner import EpisodeRecord, MpcConfig, vnb_mpc_episode
from .risk import calibration_error
from .sim import (FrictionRegime, Simulator, generate_trajectories,
                  object_by_name, stress_test)

Array = np.ndarray

RESULTS_SCHEMA = "vnb-results/1"
BENCH_COLUMNS = ("method", "regime", "beta", "n_episodes", "sr", "robust",
                 "pert_surv", "mean_eps", "quality", "p_fail_bel",
                 "p_fail_emp", "calib_gap", "plan_time_s")
METHODS = ("vnb", "gauss", "gauss-cvar", "pf", "cem")
REGIMES = ("nominal", "wide", "bimodal")
DEFAULT_BETAS = (0.5, 0.9, 0.95, 0.99)
DEFAULT_SEEDS = 3


@dataclass
class RegimeMetrics:
    """One Table-style row: a method crossed with a regime and risk level."""

    method: str
    regime: str
    beta: float
    n_episodes: int
    success_rate: float
    robust_rate: float
    perturbation_survival: float
    mean_eps: float
    quality: float
    p_fail_bel: float
    p_fail_emp: float
    calibration_gap: float
    mean_plan_time: float

    def __post_init__(self):
        for name in ("success_rate", "robust_rate", "perturbation_survival",
                     "quality", "p_fail_bel", "p_fail_emp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        gap = abs(self.p_fail_bel - self.p_fail_emp)
        if abs(self.calibration_gap - gap) > 1e-12:
            raise ValueError("calibration_gap must equal |bel - emp|")

    def row(self) -> tuple:
        return (self.method, self.regime, self.beta, self.n_episodes,
                self.success_rate, self.robust_rate,
                self.perturbation_survival, self.mean_eps, self.quality,
                self.p_fail_bel, self.p_fail_emp, self.calibration_gap,
                self.mean_plan_time)


def episode_seed(master: int, tag: str) -> int:
    digest = hashlib.sha256(f"{master}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _train_for_regime(regime_kind: str, k: int, object_names: tuple,
                      train_cfg: TrainConfig, master: int,
                      train_episodes: int) -> BeliefNets:
    rng = np.random.default_rng(episode_seed(master, f"train:{regime_kind}:{k}"))
    regime = FrictionRegime(regime_kind)
    rows = []
    for i in range(train_episodes):
        obj = object_by_name(object_names[i % len(object_names)])
        rows.extend(generate_trajectories(1, obj, regime, rng))
    cfg = replace(train_cfg, k=k)
    return train_belief_nets(rows, cfg, rng)


def run_episode(method: str, object_name: str, regime_kind: str,
                cfg: MpcConfig, nets: BeliefNets | None,
                seed: int, pf_particles: int = 100) -> EpisodeRecord:
    """One seeded closed-loop episode plus its stress report."""
    rng = np.random.default_rng(seed)
    obj = object_by_name(object_name)
    regime = FrictionRegime(regime_kind)
    env = Simulator(obj, regime, rng)

    if method == "pf":
        record = pf_mpc_episode(env, cfg, rng, n_particles=pf_particles)
    else:
        if nets is None:
            raise ValueError(f"method {method!r} needs belief nets")
        h0 = np.zeros(nets.f_trans.layers[-1].b.shape[0])
        phi0 = decode_belief(nets, h0)
        if method == "vnb":
            record = vnb_mpc_episode(phi0, nets, env, cfg, rng)
        elif method == "gauss":
            record = gauss_mpc_episode(phi0, nets, env, cfg, rng)
        elif method == "gauss-cvar":
            record = gauss_cvar_mpc_episode(phi0, nets, env, cfg, rng)
        elif method == "cem":
            record = cem_mpc_episode(phi0, nets, env, cfg, rng)
        else:
            raise ValueError(f"unknown method {method!r}")

    record.meta.update({"object": object_name, "regime": regime_kind,
                        "beta": cfg.beta, "seed": seed})
    if env.n_contacts() >= 1:
        report = stress_test(env.grasp_snapshot())
        record.meta["stress"] = report.to_dict()
    else:
        record.meta["stress"] = None
    return record


def aggregate(method: str, regime_kind: str, beta: float,
              records: list[EpisodeRecord],
              freeze_timing: bool = False) -> RegimeMetrics:
    n = len(records)
    if n == 0:
        raise ValueError("no episodes to aggregate")
    nominal = np.zeros(n, dtype=bool)
    survival = np.zeros(n)
    passed_all = np.zeros(n, dtype=bool)
    eps = np.zeros(n)
    p_bel = np.zeros(n)
    times = np.zeros(n)
    for i, rec in enumerate(records):
        stress = rec.meta.get("stress")
        if stress is not None:
            nominal[i] = bool(stress["nominal_ok"])
            survival[i] = float(stress["survival_rate"])
            passed_all[i] = bool(stress["nominal_ok"]) \
                and all(r["ok"] for r in stress["results"])
        eps[i] = rec.final_eps
        p_bel[i] = rec.belief_fail_prob
        times[i] = rec.plan_time_total
    robust = nominal & (survival >= 0.5)
    p_emp = 1.0 - float(passed_all.mean())
    p_bel_mean = float(np.clip(p_bel.mean(), 0.0, 1.0))
    return RegimeMetrics(
        method=method, regime=regime_kind, beta=beta, n_episodes=n,
        success_rate=float(nominal.mean()), robust_rate=float(robust.mean()),
        perturbation_survival=float(survival.mean()),
        mean_eps=float(eps.mean()), quality=float((eps > 0).mean()),
        p_fail_bel=p_bel_mean, p_fail_emp=p_emp,
        calibration_gap=calibration_error(p_bel_mean, p_emp),
        mean_plan_time=0.0 if freeze_timing else float(times.mean()))


def run_benchmark(methods, regimes, object_names, betas, n_seeds,
                  mpc_cfg: MpcConfig, train_cfg: TrainConfig,
                  master_seed: int, out_dir: str | None = None,
                  nets_cache: dict | None = None, train_episodes: int = 12,
                  pf_particles: int = 100, freeze_timing: bool = False,
                  workers: int | None = None
                  ) -> tuple[list[RegimeMetrics], list[EpisodeRecord]]:
    """Full cross-product; returns rows and per-episode records.

    `nets_cache` maps (regime, k) to trained nets and is filled on
    demand, so repeated calls (or tests) can pre-train once.
    """
    methods = tuple(methods)
    regimes = tuple(regimes)
    object_names = tuple(object_names)
    betas = tuple(betas)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; valid: {METHODS}")
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; valid: {REGIMES}")
    if n_seeds < 1:
        raise ValueError("need at least one seed")

    cache = nets_cache if nets_cache is not None else {}
    for regime_kind in regimes:
        needed = set()
        for m in methods:
            if m in ("vnb", "cem"):
                needed.add(train_cfg.k)
            elif m in ("gauss", "gauss-cvar"):
                needed.add(1)
        for k in sorted(needed):
            if (regime_kind, k) not in cache:
                cache[(regime_kind, k)] = _train_for_regime(
                    regime_kind, k, object_names, train_cfg, master_seed,
                    train_episodes)

    jobs = []
    for method in methods:
        for regime_kind in regimes:
            for beta in betas:
                for obj_name in object_names:
                    for s in range(n_seeds):
                        tag = f"{method}:{regime_kind}:{beta}:{obj_name}:{s}"
                        jobs.append((method, regime_kind, beta, obj_name,
                                     episode_seed(master_seed, tag)))

    if workers is None:
        workers = max(1, int(os.environ.get("VNB_THREADS", "1")))

    def _run(job):
        method, regime_kind, beta, obj_name, seed = job
        cfg = replace(mpc_cfg, beta=beta)
        if method in ("vnb", "cem"):
            nets = cache[(regime_kind, train_cfg.k)]
        elif method in ("gauss", "gauss-cvar"):
            nets = cache[(regime_kind, 1)]
        else:
            nets = None
        return run_episode(method, obj_name, regime_kind, cfg, nets, seed,
                           pf_particles=pf_particles)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run, jobs))
    else:
        records = [_run(job) for job in jobs]

    rows = []
    for method in methods:
        for regime_kind in regimes:
            for beta in betas:
                group = [rec for job, rec in zip(jobs, records)
                         if job[0] == method and job[1] == regime_kind
                         and job[2] == beta]
                rows.append(aggregate(method, regime_kind, beta, group,
                                      freeze_timing=freeze_timing))

    if out_dir is not None:
        write_outputs(Path(out_dir), rows, records,
                      freeze_timing=freeze_timing)
    return rows, records


# -- emission --------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_outputs(out_dir: Path, rows: list[RegimeMetrics],
                  records: list[EpisodeRecord],
                  freeze_timing: bool = False) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = [f"# schema: {RESULTS_SCHEMA}", ",".join(BENCH_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row.row()))
    (out_dir / "results.csv").write_text("\n".join(lines) + "\n")

    with open(out_dir / "episodes.jsonl", "w") as fh:
        for rec in records:
            if freeze_timing:
                rec = _strip_times(rec)
            fh.write(rec.to_json() + "\n")

    curve_lines = ["method,regime,beta,object,seed,t,eps"]
    for rec in records:
        meta = rec.meta
        for step in rec.steps:
            curve_lines.append(",".join([
                rec.method, str(meta.get("regime", "")),
                _fmt(float(meta.get("beta", 0.0))),
                str(meta.get("object", "")), str(meta.get("seed", "")),
                str(step.t), _fmt(float(step.eps_before))]))
        curve_lines.append(",".join([
            rec.method, str(meta.get("regime", "")),
            _fmt(float(meta.get("beta", 0.0))),
            str(meta.get("object", "")), str(meta.get("seed", "")),
            str(len(rec.steps)), _fmt(float(rec.final_eps))]))
    (out_dir / "eps_curves.csv").write_text("\n".join(curve_lines) + "\n")

    (out_dir / "summary.md").write_text(render_summary(rows))


def _strip_times(rec: EpisodeRecord) -> EpisodeRecord:
    clone = EpisodeRecord.from_json(rec.to_json())
    clone.plan_time_total = 0.0
    for step in clone.steps:
        step.plan_time_us = 0.0
    return clone


def render_summary(rows: list[RegimeMetrics]) -> str:
    out = ["# Benchmark summary", "",
           f"Schema: {RESULTS_SCHEMA}", ""]
    header = ("| method | regime | beta | SR | Robust | PertSurv | eps | "
              "Quality | Pbel | Pemp | gap | time_s |")
    rule = "|" + "---|" * 12
    out.append(header)
    out.append(rule)
    for r in rows:
        out.append("| " + " | ".join([
            r.method, r.regime, _fmt(r.beta), _fmt(r.success_rate),
            _fmt(r.robust_rate), _fmt(r.perturbation_survival),
            _fmt(r.mean_eps), _fmt(r.quality), _fmt(r.p_fail_bel),
            _fmt(r.p_fail_emp), _fmt(r.calibration_gap),
            _fmt(r.mean_plan_time)]) + " |")
    out.append("")
    return "\n".join(out)


def recompute_rows(jsonl_path: Path) -> list[RegimeMetrics]:
    """Rebuild aggregate rows from the episode stream for spot checks."""
    records = []
    with open(jsonl_path) as fh:
        for line in fh:
            if line.strip():
                records.append(EpisodeRecord.from_json(line))
    groups: dict[tuple, list[EpisodeRecord]] = {}
    order: list[tuple] = []
    for rec in records:
        key = (rec.method, rec.meta.get("regime"),
               float(rec.meta.get("beta", 0.0)))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    return [aggregate(k[0], k[1], k[2], groups[k]) for k in order]


def verify_outputs(out_dir: Path) -> bool:
    """Recompute results.csv from episodes.jsonl; exact string match.

    The timing column is recomputed from the recorded per-episode plan
    times, so this holds for frozen and unfrozen runs alike.
    """
    out_dir = Path(out_dir)
    rows = recompute_rows(out_dir / "episodes.jsonl")
    expected = [",".join(_fmt(v) for v in r.row()) for r in rows]
    actual = (out_dir / "results.csv").read_text().splitlines()[2:]
    return actual == [line for line in expected]


# -- synthetic calibration check -------------------------------------------

def synthetic_calibration(trials: int, rng: np.random.Generator,
                          tau_f: float | None = None) -> dict:
    """Belief-vs-empirical failure probability when the belief is exact.

    Builds a ground-truth latent distribution (bimodal friction, noisy
    pose, all five fingers in contact), uses the same distribution as
    the belief, and compares the soft belief-side estimate against the
    hard indicator rate on independent draws. The failure threshold
    defaults to the pilot-sample median cost so the failure event has
    probability near one half and the check cannot pass vacuously.
    """
    from .belief import BeliefParams, sample_belief_batch
    from .grasp import HandModel, grasp_cost_batch, split_latent_batch
    from .risk import RiskConfig, failure_prob_hard, failure_prob_soft

    if trials < 100:
        raise ValueError("too few trials for a calibration estimate")
    hand = HandModel.default()
    action = np.full(6, 0.2)

    d = 26
    means = np.zeros((2, d))
    log_stds = np.full((2, d), -6.0)
    for comp, mu in enumerate((0.25, 1.0)):
        means[comp, 6::4] = mu
        means[comp, 7::4] = 0.0005          # kN/m slot, soft contact
        means[comp, 9::4] = 0.005
        log_stds[comp, :2] = np.log(0.02)   # pose xy
        log_stds[comp, 6::4] = np.log(0.05)
        log_stds[comp, 9::4] = np.log(0.002)
    phi = BeliefParams(np.zeros(2), means, log_stds)

    def costs_of(batch_values: Array) -> Array:
        centers, mu, kappa, slip = split_latent_batch(batch_values)
        active = np.ones_like(mu, dtype=bool)
        c, _, _ = grasp_cost_batch(centers, mu, kappa, slip, active,
                                   action, hand)
        return c

    if tau_f is None:
        pilot = costs_of(sample_belief_batch(phi, 2048, rng).values)
        tau_f = float(np.median(pilot))
    cfg = RiskConfig(beta=0.9, tau_f=tau_f)

    belief_costs = costs_of(sample_belief_batch(phi, trials, rng).values)
    true_costs = costs_of(sample_belief_batch(phi, trials, rng).values)
    p_bel = failure_prob_soft(belief_costs, cfg)
    p_emp = failure_prob_hard(true_costs, cfg.tau_f)
    return {"trials": trials, "tau_f": tau_f, "p_fail_bel": p_bel,
            "p_fail_emp": p_emp, "gap": calibration_error(p_bel, p_emp)}
