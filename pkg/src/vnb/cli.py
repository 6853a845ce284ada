"""Experiment runner.

Subcommands: gen-data, train, plan, bench, stress, calibrate. A JSON
config file supplies defaults; flags override it. Exit codes: 0 success,
2 config/usage error, 3 runtime fault. VNB_THREADS caps the benchmark
worker pool.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .bench import (DEFAULT_BETAS, METHODS, REGIMES, episode_seed,
                    run_benchmark, run_episode, synthetic_calibration)
from .dynamics import (TrainConfig, TrainingDiverged, load_dataset,
                       load_nets, save_dataset, save_nets, train_belief_nets)
from .planner import MpcConfig
from .sim import (OBJECT_SET, FrictionRegime, SimulationFault, Simulator,
                  generate_trajectories, object_by_name, stress_test)

COMMANDS = ("gen-data", "train", "plan", "bench", "stress", "calibrate")
PROFILES = ("simulation", "synthetic-perception")
_OBJECT_NAMES = tuple(o.name for o in OBJECT_SET)


@dataclass
class RunConfig:
    command: str
    method: str = "vnb"
    regime: str = "nominal"
    objects: tuple = ("sphere-small", "box-small", "cylinder-small")
    betas: tuple = DEFAULT_BETAS
    seeds: int = 3
    out: str = "runs/out"
    profile: str = "simulation"
    t_max: int = 80
    ema: float = 0.3
    master_seed: int = 7
    epochs: int = 40
    train_episodes: int = 12
    episodes: int = 20
    k: int = 8
    n_samples: int = 256
    pf_particles: int = 100
    trials: int = 10000
    data: str | None = None
    weights: str | None = None
    freeze_timing: bool = False

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; "
                              f"valid: {', '.join(COMMANDS)}")
        for m in self.method_list():
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; "
                                  f"valid: {', '.join(METHODS)}")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; "
                              f"valid: {', '.join(REGIMES)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; "
                              f"valid: {', '.join(PROFILES)}")
        for name in self.objects:
            if name not in _OBJECT_NAMES:
                raise ConfigError(f"unknown object {name!r}; "
                                  f"valid: {', '.join(_OBJECT_NAMES)}")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if not self.betas or any(not 0.0 < b < 1.0 for b in self.betas):
            raise ConfigError("betas must lie in (0, 1)")
        if self.t_max < 1 or self.epochs < 1 or self.episodes < 1:
            raise ConfigError("t_max, epochs, episodes must be >= 1")
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigError("ema must lie in [0, 1]")

    def method_list(self) -> tuple:
        return tuple(m.strip() for m in self.method.split(",") if m.strip())

    def to_json(self) -> str:
        payload = asdict(self)
        payload["objects"] = list(self.objects)
        payload["betas"] = list(self.betas)
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        if "objects" in raw:
            raw["objects"] = tuple(raw["objects"])
        if "betas" in raw:
            raw["betas"] = tuple(float(b) for b in raw["betas"])
        return cls(**raw)

    def mpc(self) -> MpcConfig:
        lambda_v = 0.3 if self.profile == "synthetic-perception" else 0.0
        return MpcConfig(beta=self.betas[0], t_max=self.t_max,
                         ema_rate=self.ema, lambda_v=lambda_v,
                         n_samples=self.n_samples)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, k=self.k, ema_rate=self.ema)


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vnb",
                                description="risk-sensitive grasp planning")
    p.add_argument("--config", help="JSON config file; flags override it")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--method")
        sp.add_argument("--regime")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--seeds", type=int)
        sp.add_argument("--out")
        sp.add_argument("--profile")
        sp.add_argument("--t-max", type=int, dest="t_max")
        sp.add_argument("--ema", type=float)
        sp.add_argument("--seed", type=int, dest="master_seed")
        sp.add_argument("--objects", help="comma-separated object names")

    sp = sub.add_parser("gen-data", help="synthesize training trajectories")
    common(sp)
    sp.add_argument("--episodes", type=int)

    sp = sub.add_parser("train", help="fit belief nets on a dataset")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--k", type=int)

    sp = sub.add_parser("plan", help="run one closed-loop episode")
    common(sp)
    sp.add_argument("--weights")
    sp.add_argument("--object", dest="single_object")

    sp = sub.add_parser("bench", help="run the benchmark cross-product")
    common(sp)
    sp.add_argument("--weights")
    sp.add_argument("--betas", help="comma-separated risk levels")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--train-episodes", type=int, dest="train_episodes")
    sp.add_argument("--pf-particles", type=int, dest="pf_particles")
    sp.add_argument("--n-samples", type=int, dest="n_samples")
    sp.add_argument("--freeze-timing", action="store_true", default=None,
                    dest="freeze_timing",
                    help="zero recorded wall times for byte-stable output")

    sp = sub.add_parser("stress", help="close on an object, run the suite")
    common(sp)
    sp.add_argument("--object", dest="single_object")

    sp = sub.add_parser("calibrate", help="synthetic calibration check")
    common(sp)
    sp.add_argument("--trials", type=int)
    return p


def _build_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file does not parse: {exc}") from exc
    if args.command is None and "command" not in base:
        raise ConfigError("no command given (flag or config file)")

    overrides = {k: v for k, v in vars(args).items()
                 if v is not None and k not in ("config", "single_object",
                                                "beta", "betas", "objects")}
    merged = {**base, **overrides}
    if getattr(args, "objects", None):
        merged["objects"] = tuple(s.strip() for s in args.objects.split(","))
    elif "objects" in merged:
        merged["objects"] = tuple(merged["objects"])
    if getattr(args, "betas", None):
        merged["betas"] = tuple(float(s) for s in args.betas.split(","))
    elif getattr(args, "beta", None) is not None:
        merged["betas"] = (args.beta,)
    elif "betas" in merged:
        merged["betas"] = tuple(float(b) for b in merged["betas"])
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# -- subcommand bodies -----------------------------------------------------

def _cmd_gen_data(cfg: RunConfig) -> int:
    rng = np.random.default_rng(episode_seed(cfg.master_seed, "gen-data"))
    regime = FrictionRegime(cfg.regime)
    rows = []
    for i in range(cfg.episodes):
        obj = object_by_name(cfg.objects[i % len(cfg.objects)])
        rows.extend(generate_trajectories(1, obj, regime, rng))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(rows, str(out / "dataset.jsonl"))
    print(f"wrote {len(rows)} trajectories to {out / 'dataset.jsonl'}")
    return 0


def _cmd_train(cfg: RunConfig) -> int:
    if not cfg.data:
        raise ConfigError("train needs --data pointing at a dataset")
    if not Path(cfg.data).exists():
        raise ConfigError(f"dataset not found: {cfg.data}")
    dataset = load_dataset(cfg.data)
    rng = np.random.default_rng(episode_seed(cfg.master_seed, "train"))
    nets = train_belief_nets(dataset, cfg.train(), rng)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = cfg.weights or str(out / "weights.vnbw")
    save_nets(nets, weights)
    curve = out / "loss_curve.csv"
    lines = ["epoch,nll"] + [f"{i},{v:.6f}"
                             for i, v in enumerate(nets.loss_curve)]
    curve.write_text("\n".join(lines) + "\n")
    print(f"trained k={nets.k} nets; nll {nets.loss_curve[0]:.4f} -> "
          f"{nets.loss_curve[-1]:.4f}; weights at {weights}")
    return 0


def _load_or_require(cfg: RunConfig):
    if cfg.weights:
        if not Path(cfg.weights).exists():
            raise ConfigError(f"weights file not found: {cfg.weights}")
        return load_nets(cfg.weights)
    return None


def _cmd_plan(cfg: RunConfig, single_object: str | None) -> int:
    method = cfg.method_list()[0]
    nets = _load_or_require(cfg)
    if nets is None and method != "pf":
        raise ConfigError(f"method {method!r} needs --weights")
    obj_name = single_object or cfg.objects[0]
    if obj_name not in _OBJECT_NAMES:
        raise ConfigError(f"unknown object {obj_name!r}; "
                          f"valid: {', '.join(_OBJECT_NAMES)}")
    seed = episode_seed(cfg.master_seed, f"plan:{method}:{obj_name}")
    record = run_episode(method, obj_name, cfg.regime, cfg.mpc(), nets,
                         seed, pf_particles=cfg.pf_particles)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "episode.jsonl").write_text(record.to_json() + "\n")
    print(f"{method} on {obj_name}: eps {record.final_eps:.4f} "
          f"steps {len(record.steps)} "
          f"success {record.reached_quality}")
    return 0


def _cmd_bench(cfg: RunConfig) -> int:
    nets_cache = {}
    preloaded = _load_or_require(cfg)
    if preloaded is not None:
        for regime in (cfg.regime,):
            nets_cache[(regime, preloaded.k)] = preloaded
    rows, _ = run_benchmark(
        cfg.method_list(), (cfg.regime,), cfg.objects, cfg.betas,
        cfg.seeds, cfg.mpc(), cfg.train(), cfg.master_seed,
        out_dir=cfg.out, nets_cache=nets_cache,
        train_episodes=cfg.train_episodes, pf_particles=cfg.pf_particles,
        freeze_timing=cfg.freeze_timing)
    print(bench_mod.render_summary(rows))
    return 0


def _cmd_stress(cfg: RunConfig, single_object: str | None) -> int:
    obj_name = single_object or cfg.objects[0]
    if obj_name not in _OBJECT_NAMES:
        raise ConfigError(f"unknown object {obj_name!r}; "
                          f"valid: {', '.join(_OBJECT_NAMES)}")
    rng = np.random.default_rng(
        episode_seed(cfg.master_seed, f"stress:{obj_name}"))
    env = Simulator(object_by_name(obj_name), FrictionRegime(cfg.regime), rng)
    action = np.full(6, 0.2)
    for _ in range(cfg.t_max):
        env.step(action)
        if env.n_contacts() >= 3:
            break
    if env.n_contacts() < 1:
        print(f"no contacts formed on {obj_name}; nothing to stress")
        return 0
    report = stress_test(env.grasp_snapshot())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stress.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"{obj_name}: nominal {report.nominal_ok} "
          f"survival {report.survival_rate:.3f}")
    return 0


def _cmd_calibrate(cfg: RunConfig) -> int:
    rng = np.random.default_rng(episode_seed(cfg.master_seed, "calibrate"))
    result = synthetic_calibration(cfg.trials, rng)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return 0


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if cfg.command == "gen-data":
            return _cmd_gen_data(cfg)
        if cfg.command == "train":
            return _cmd_train(cfg)
        if cfg.command == "plan":
            return _cmd_plan(cfg, getattr(args, "single_object", None))
        if cfg.command == "bench":
            return _cmd_bench(cfg)
        if cfg.command == "stress":
            return _cmd_stress(cfg, getattr(args, "single_object", None))
        if cfg.command == "calibrate":
            return _cmd_calibrate(cfg)
        raise ConfigError(f"unhandled command {cfg.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationFault, TrainingDiverged, OSError, ValueError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
