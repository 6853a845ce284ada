"""Quasi-static grasp environment and the perturbation stress protocol.

Fingertips integrate joint rates along fixed approach rays; contacts form
when a fingertip reaches the object surface (1 mm tolerance) and persist
until it retracts past 2 mm, so a fingertip dithering at the boundary
does not chatter. Contact normal forces follow a penalty model
f = stiffness * penetration. The object itself never moves: grasp
outcomes are judged by wrench-space containment instead of rollout
dynamics, which is what makes the stress suite deterministic and cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Observation
from .grasp import ContactParams, HandModel, LatentState
from .wrench import Contact, WrenchSpace, build_wrench_space, \
    ferrari_canny_eps, wrench_containment

Array = np.ndarray

GRAVITY = 9.81
MU_FINGER = 0.35
CONTACT_TOL = 1e-3
RELEASE_TOL = 2e-3
SIGMA_BASE = 0.005
SIGMA_CAP = 0.01
OCCLUSION_RADIUS = 0.05
CAMERA_POS = np.array([0.3, 0.0, 0.3])
CONTACT_DAMPING = 5.0
SLIP_HALF_LIFE = 0.5
FORCE_CAP = 20.0
DT = 0.05


class SimulationFault(RuntimeError):
    """Raised when the environment state stops being finite."""


@dataclass
class ObjectSpec:
    """Parametric primitive: sphere (r,), box (hx,hy,hz), cylinder (r,hh)."""

    name: str
    shape: str
    size: tuple
    mass: float
    mu_o: float = 0.6

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.mass <= 0 or min(self.size) <= 0:
            raise ValueError("mass and sizes must be positive")


OBJECT_SET = [
    ObjectSpec("sphere-small", "sphere", (0.035,), 0.25),
    ObjectSpec("sphere-large", "sphere", (0.055,), 0.45),
    ObjectSpec("box-small", "box", (0.03, 0.03, 0.03), 0.30),
    ObjectSpec("box-large", "box", (0.05, 0.05, 0.05), 0.55),
    ObjectSpec("cylinder-small", "cylinder", (0.03, 0.05), 0.30),
    ObjectSpec("cylinder-large", "cylinder", (0.05, 0.07), 0.50),
    ObjectSpec("box-long", "box", (0.025, 0.025, 0.09), 0.35),
]


def object_by_name(name: str) -> ObjectSpec:
    for spec in OBJECT_SET:
        if spec.name == name:
            return spec
    raise ValueError(f"unknown object {name!r}")


@dataclass
class FrictionRegime:
    kind: str

    def __post_init__(self):
        if self.kind not in ("nominal", "wide", "bimodal"):
            raise ValueError(f"unknown regime {self.kind!r}")

    def sample_mu(self, rng: np.random.Generator) -> float:
        if self.kind == "nominal":
            return float(rng.uniform(0.4, 1.0))
        if self.kind == "wide":
            return float(rng.uniform(0.15, 1.2))
        # bimodal: equal mixture, truncated positive
        while True:
            if rng.uniform() < 0.5:
                mu = rng.normal(0.18, 0.03)
            else:
                mu = rng.normal(1.0, 0.05)
            if mu > 0:
                return float(mu)

    def mu_range(self) -> tuple[float, float]:
        return {"nominal": (0.4, 1.0), "wide": (0.15, 1.2),
                "bimodal": (0.09, 1.15)}[self.kind]


def effective_friction(mu_f: float, mu_o: float) -> float:
    if mu_f < 0 or mu_o < 0:
        raise ValueError("friction coefficients must be >= 0")
    return float(np.sqrt(mu_f * mu_o))


@dataclass
class PerturbationSuite:
    """Table of 28 disturbance tests plus the survival thresholds."""

    lateral_forces: tuple = (3.0, 5.0, 8.0, 12.0)
    torque_magnitudes: tuple = (0.3, 0.6, 1.0)
    friction_drops: tuple = (0.05, 0.10, 0.15)
    displacement_threshold: float = 0.04
    drop_threshold: float = 0.015
    rotation_threshold: float = 0.3

    def tests(self) -> list[tuple[str, str, object]]:
        dirs = {"+x": np.array([1.0, 0, 0]), "-x": np.array([-1.0, 0, 0]),
                "+y": np.array([0, 1.0, 0]), "-y": np.array([0, -1.0, 0])}
        out = []
        for f in self.lateral_forces:
            for dname, d in dirs.items():
                out.append((f"lateral-{f:g}N-{dname}", "lateral", f * d))
        axes = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]),
                "z": np.array([0, 0, 1.0])}
        for tq in self.torque_magnitudes:
            for aname, ax in axes.items():
                out.append((f"torque-{tq:g}Nm-{aname}", "torque", tq * ax))
        for mu in self.friction_drops:
            out.append((f"friction-{mu:g}", "friction", mu))
        return out


@dataclass
class EpisodeParams:
    mass: float
    stiffness: float
    mu_o: float
    mu_eff: float
    pose: Array


def signed_distance(obj: ObjectSpec, center: Array, p: Array
                    ) -> tuple[float, Array]:
    """Signed distance and outward normal at p (rotation not modeled)."""
    v = np.asarray(p, dtype=float) - np.asarray(center, dtype=float)
    if obj.shape == "sphere":
        r = np.linalg.norm(v)
        if r < 1e-12:
            return -obj.size[0], np.array([0.0, 0.0, 1.0])
        return float(r - obj.size[0]), v / r
    if obj.shape == "box":
        half = np.asarray(obj.size)
        q = np.abs(v) - half
        outside = np.maximum(q, 0.0)
        sd = np.linalg.norm(outside) + min(q.max(), 0.0)
        if sd > 0:
            n = np.sign(v) * outside
            return float(sd), n / np.linalg.norm(n)
        j = int(np.argmax(q))
        n = np.zeros(3)
        n[j] = np.sign(v[j]) if v[j] != 0 else 1.0
        return float(sd), n
    r, hh = obj.size
    rxy = np.linalg.norm(v[:2])
    dr, dz = rxy - r, abs(v[2]) - hh
    sd = min(max(dr, dz), 0.0) + np.hypot(max(dr, 0.0), max(dz, 0.0))
    if dr >= dz and rxy > 1e-12:
        n = np.array([v[0] / rxy, v[1] / rxy, 0.0])
    else:
        n = np.array([0.0, 0.0, np.sign(v[2]) if v[2] != 0 else 1.0])
    return float(sd), n


class Simulator:
    """One grasp episode's environment. Not reusable across episodes."""

    def __init__(self, obj: ObjectSpec, regime: FrictionRegime | None,
                 rng: np.random.Generator, pose_noise: float = 0.01,
                 profile: str = "simulation"):
        self.obj = obj
        self.regime = regime
        self.rng = rng
        self.profile = profile
        mass = obj.mass * rng.uniform(0.8, 1.2)
        stiffness = max(100.0, rng.normal(1000.0, 250.0))
        mu_o = regime.sample_mu(rng) if regime is not None else obj.mu_o
        pose = np.zeros(6)
        pose[:2] = rng.normal(0.0, pose_noise, size=2)
        self.params = EpisodeParams(mass, stiffness, mu_o,
                                    effective_friction(MU_FINGER, mu_o),
                                    pose)
        self.hand = HandModel.default()
        self.t = 0
        # finger -> (ContactParams, inward normal, surface point, formed at)
        self._contacts: dict[int, dict] = {}
        self._update_contacts()

    # -- geometry ----------------------------------------------------------

    def _sdf(self, p: Array) -> tuple[float, Array]:
        return signed_distance(self.obj, self.params.pose[:3], p)

    def _update_contacts(self) -> None:
        tips = self.hand.fingertips()
        for i in range(5):
            if i in self._contacts:
                # sticking contact: the surface point and normal freeze at
                # formation, so continued closing deepens the penalty
                # overlap instead of dragging the contact through the
                # object; only retraction past the anchor releases
                entry = self._contacts[i]
                ret = float((tips[i] - entry["point"]) @ entry["normal"])
                if -ret > RELEASE_TOL:
                    del self._contacts[i]
                else:
                    entry["penetration"] = max(0.0, ret)
            else:
                sd, outward = self._sdf(tips[i])
                if sd <= CONTACT_TOL:
                    slip0 = float(self.rng.uniform(0.0, 0.01))
                    self._contacts[i] = {
                        "params": ContactParams(self.params.mu_eff,
                                                self.params.stiffness,
                                                CONTACT_DAMPING, slip0),
                        "normal": -outward,
                        "point": tips[i] - sd * outward,
                        "penetration": max(0.0, -sd),
                        "formed_t": self.t,
                    }

    # -- public surface ----------------------------------------------------

    def step(self, action: Array, dt: float = DT) -> Observation:
        action = np.asarray(action, dtype=float)
        if action.shape != (6,) or not np.all(np.isfinite(action)):
            raise SimulationFault("non-finite or misshapen action")
        self.hand.q = self.hand.q + action * dt
        if not np.all(np.isfinite(self.hand.q)):
            raise SimulationFault("joint state became non-finite")
        self.t += 1
        self._update_contacts()
        return self.observe(action)

    def observe(self, last_action: Array | None = None) -> Observation:
        if last_action is None:
            last_action = np.zeros(6)
        tips = self.hand.fingertips()
        noise = self.rng.normal(0.0, SIGMA_BASE, size=6)
        pose = self.params.pose + noise
        trace = 6.0 * SIGMA_BASE ** 2
        tactile = np.zeros(5)
        flags = np.zeros(5)
        for i, entry in self._contacts.items():
            tactile[i] = entry["params"].kappa * entry["penetration"]
            flags[i] = 1.0
        joint_pos = np.zeros(11)
        joint_pos[:6] = self.hand.q
        joint_vel = np.zeros(11)
        joint_vel[:6] = last_action
        occ = self._occlusion(tips)
        seg = 1.0 - min(1.0, max(0.0, trace / SIGMA_CAP))
        return Observation(pose, trace, tactile, flags, joint_pos,
                           joint_vel, occ, seg)

    def _occlusion(self, tips: Array) -> float:
        ray = self.params.pose[:3] - CAMERA_POS
        ray /= np.linalg.norm(ray)
        rel = tips - CAMERA_POS
        along = rel @ ray
        perp = rel - along[:, None] * ray
        close = np.linalg.norm(perp, axis=1) < OCCLUSION_RADIUS
        return float(np.mean(close))

    def slip_now(self, entry: dict) -> float:
        age = (self.t - entry["formed_t"]) * DT
        return entry["params"].slip * 0.5 ** (age / SLIP_HALF_LIFE)

    def n_contacts(self) -> int:
        return len(self._contacts)

    def true_latent_vector(self) -> Array:
        """Slot-aligned 26-dim latent; inactive finger slots are zero."""
        state = LatentState(self.params.pose.copy(), [])
        vec = state.to_vector()
        for i, entry in self._contacts.items():
            p = entry["params"]
            vec[6 + 4 * i: 6 + 4 * i + 4] = (
                p.mu, p.kappa / 1e3, p.damping, self.slip_now(entry))
        return vec

    def true_latent_state(self) -> LatentState:
        contacts = [ContactParams(e["params"].mu, e["params"].kappa,
                                  e["params"].damping, self.slip_now(e))
                    for _, e in sorted(self._contacts.items())]
        return LatentState(self.params.pose.copy(), contacts)

    def contact_list(self, mu_override: float | None = None
                     ) -> list[Contact]:
        out = []
        for i, entry in sorted(self._contacts.items()):
            n = entry["normal"]
            mu = entry["params"].mu if mu_override is None else mu_override
            out.append(Contact(entry["point"], n / np.linalg.norm(n), mu))
        return out

    def grasp_snapshot(self) -> "GraspSnapshot":
        return GraspSnapshot(self.contact_list(), self.params.pose[:3].copy(),
                             self.params.mass)

    def current_eps(self) -> float:
        contacts = self.contact_list()
        if not contacts:
            return -1.0
        ws = build_wrench_space(contacts, self.params.pose[:3], edges=8)
        return ferrari_canny_eps(ws)


@dataclass
class GraspSnapshot:
    """Frozen contact set for stress testing after an episode."""

    contacts: list[Contact]
    center: Array
    mass: float


@dataclass
class StressReport:
    nominal_ok: bool
    results: list[tuple[str, bool]]
    survival_rate: float

    def passed_all(self) -> bool:
        return all(ok for _, ok in self.results)

    def to_dict(self) -> dict:
        return {"nominal_ok": self.nominal_ok,
                "survival_rate": self.survival_rate,
                "results": [{"test": name, "ok": bool(ok)}
                            for name, ok in self.results]}


def _required_wrench(mass: float, force: Array | None = None,
                     torque: Array | None = None) -> Array:
    w = np.zeros(6)
    w[2] = mass * GRAVITY
    if force is not None:
        w[:3] -= force
    if torque is not None:
        w[3:] -= torque
    return w


def stress_test(snapshot: GraspSnapshot, suite: PerturbationSuite | None
                = None, force_cap: float = FORCE_CAP) -> StressReport:
    """Nominal lift check plus the 28-test disturbance suite.

    Every judgment is a wrench-containment feasibility problem: the grasp
    survives a disturbance iff gravity plus the disturbance wrench can be
    balanced by cone-edge forces within the per-contact normal-force cap.
    """
    if not snapshot.contacts:
        raise ValueError("stress test requires an established grasp")
    suite = suite or PerturbationSuite()
    center = snapshot.center
    ws = build_wrench_space(snapshot.contacts, center, edges=8)

    def contained(target: Array, space: WrenchSpace = ws) -> bool:
        return wrench_containment(space, target, force_cap=force_cap)

    nominal_ok = contained(_required_wrench(snapshot.mass))
    for f in suite.lateral_forces:
        nominal_ok = nominal_ok and contained(
            _required_wrench(snapshot.mass,
                             force=np.array([f, 0.0, 0.0])))

    results = []
    dropped_ws: dict[float, WrenchSpace] = {}
    for name, kind, payload in suite.tests():
        if kind == "lateral":
            ok = contained(_required_wrench(snapshot.mass, force=payload))
        elif kind == "torque":
            ok = contained(_required_wrench(snapshot.mass, torque=payload))
        else:
            mu = float(payload)
            if mu not in dropped_ws:
                dropped = [Contact(c.position, c.normal, mu)
                           for c in snapshot.contacts]
                dropped_ws[mu] = build_wrench_space(dropped, center, edges=8)
            ok = contained(_required_wrench(snapshot.mass),
                           space=dropped_ws[mu])
        results.append((name, bool(ok)))
    rate = float(np.mean([ok for _, ok in results]))
    return StressReport(bool(nominal_ok), results, rate)


def snapshot_eps(snapshot: GraspSnapshot,
                 mu_override: float | None = None) -> float:
    contacts = snapshot.contacts
    if mu_override is not None:
        contacts = [Contact(c.position, c.normal, mu_override)
                    for c in contacts]
    if not contacts:
        return -1.0
    return ferrari_canny_eps(build_wrench_space(contacts, snapshot.center,
                                                edges=8))


def generate_trajectories(n_episodes: int, obj: ObjectSpec,
                          regime: FrictionRegime | None,
                          rng: np.random.Generator, t_len: int = 30,
                          max_rate: float = 0.3) -> list[dict]:
    """Random-closing rollouts with ground-truth latents, for training."""
    out = []
    for _ in range(n_episodes):
        env = Simulator(obj, regime, rng)
        obs_rows, act_rows, lat_rows = [], [], []
        for _ in range(t_len):
            action = rng.uniform(0.0, max_rate, size=6)
            obs = env.step(action)
            obs_rows.append(obs.to_vector())
            act_rows.append(action)
            lat_rows.append(env.true_latent_vector())
        out.append({"observations": np.array(obs_rows),
                    "actions": np.array(act_rows),
                    "latents": np.array(lat_rows)})
    return out
