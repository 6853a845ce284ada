"""Latent grasp state, the hand abstraction, and the cost functionals.

The hand is a deliberately small kinematic stand-in: five fingertips ride
fixed approach rays toward the object, driven by six joint rates (two for
the thumb, one per remaining finger). That keeps every cost term an
explicit differentiable function of the action while matching the
six-rate action interface of the planner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .risk import sigmoid, softplus
from .wrench import Contact, build_wrench_space, ferrari_canny_eps

Array = np.ndarray

LATENT_DIM = 26
MAX_CONTACTS = 5
# The latent vector stores stiffness in kN/m so one decoder log-std range
# covers every slot; ContactParams.kappa stays in N/m.
KAPPA_VEC_SCALE = 1e3

# fixed contact-quality penalty when no contact exists at all; strictly
# worse than any real contact's three terms
EMPTY_CONTACT_COST = 3.0 * (1.0 + np.log(2.0))
_MU_FLOOR = 1e-3


@dataclass
class ContactParams:
    """Per-contact latent parameters (friction, stiffness, damping, slip)."""

    mu: float
    kappa: float
    damping: float = 0.0
    slip: float = 0.0


@dataclass
class LatentState:
    """Object pose (position + axis-angle) plus up to five contacts."""

    pose: Array
    contacts: list[ContactParams] = field(default_factory=list)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        if self.pose.shape != (6,) or not np.all(np.isfinite(self.pose)):
            raise ValueError("pose must be 6 finite reals")
        if len(self.contacts) > MAX_CONTACTS:
            raise ValueError(f"at most {MAX_CONTACTS} contacts")

    def to_vector(self) -> Array:
        v = np.zeros(LATENT_DIM)
        v[:6] = self.pose
        for i, c in enumerate(self.contacts):
            v[6 + 4 * i: 6 + 4 * i + 4] = (c.mu, c.kappa / KAPPA_VEC_SCALE,
                                           c.damping, c.slip)
        return v

    @classmethod
    def from_vector(cls, vec: Array,
                    n_contacts: int = MAX_CONTACTS) -> "LatentState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (LATENT_DIM,):
            raise ValueError(f"latent vector must have {LATENT_DIM} entries")
        contacts = [ContactParams(vec[6 + 4 * i],
                                  vec[6 + 4 * i + 1] * KAPPA_VEC_SCALE,
                                  vec[6 + 4 * i + 2], vec[6 + 4 * i + 3])
                    for i in range(n_contacts)]
        return cls(vec[:6].copy(), contacts)


@dataclass
class CostWeights:
    alpha_s: float = 1.0
    alpha_g: float = 0.5
    alpha_r: float = 2.0
    alpha_n: float = 0.1
    omega_pose: float = 1.0
    omega_occ: float = 1.0
    omega_seg: float = 1.0
    lambda_v: float = 0.0

    def __post_init__(self):
        for name in ("alpha_s", "alpha_g", "alpha_r", "alpha_n",
                     "omega_pose", "omega_occ", "omega_seg", "lambda_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class HandModel:
    """Five fingertips on fixed approach rays, six actuated joint rates."""

    bases: Array       # (5, 3)
    dirs: Array        # (5, 3) unit rays toward the nominal center
    joint_map: Array   # (5, 6) meters of fingertip travel per radian
    q: Array           # (6,) current joint positions, rad
    dt: float = 0.05
    center_nominal: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=float)
        self.dirs = np.asarray(self.dirs, dtype=float)
        self.joint_map = np.asarray(self.joint_map, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.center_nominal = np.asarray(self.center_nominal, dtype=float)

    @classmethod
    def default(cls, center: Array | None = None,
                ring_radius: float = 0.10) -> "HandModel":
        center = np.zeros(3) if center is None else np.asarray(center, float)
        azim = np.array([np.pi, -0.7, -0.25, 0.25, 0.7])
        height = np.array([0.0, 0.012, -0.012, 0.012, -0.012])
        bases = center + np.stack([ring_radius * np.cos(azim),
                                   ring_radius * np.sin(azim),
                                   height], axis=1)
        dirs = center - bases
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        w = np.zeros((5, 6))
        w[0, 0] = w[0, 1] = 0.1          # thumb uses two joints
        for i in range(1, 5):
            w[i, i + 1] = 0.2
        return cls(bases, dirs, w, np.zeros(6), center_nominal=center)

    def fingertips(self, q: Array | None = None) -> Array:
        q = self.q if q is None else np.asarray(q, dtype=float)
        travel = self.joint_map @ q
        return self.bases + travel[:, None] * self.dirs

    def copy(self) -> "HandModel":
        return HandModel(self.bases.copy(), self.dirs.copy(),
                         self.joint_map.copy(), self.q.copy(), self.dt,
                         self.center_nominal.copy())


def _contact_cost_terms(mu: Array, kappa: Array, slip: Array) -> Array:
    # exponents clamped at zero: belief samples can carry negative mu/kappa
    return (np.exp(-np.maximum(mu, 0.0)) + np.exp(-np.maximum(kappa, 0.0))
            + softplus(slip))


def grasp_cost(theta: LatentState, action: Array, hand: HandModel) -> float:
    """Closure strength + friction-limited term + contact-quality term."""
    action = np.asarray(action, dtype=float)
    if action.shape != (6,) or not np.all(np.isfinite(action)):
        raise ValueError("action must be 6 finite joint rates")
    a_bar = float(action.mean())
    p = hand.fingertips(hand.q + action * hand.dt)
    c_obj = theta.pose[:3]
    dist = np.linalg.norm(p - c_obj, axis=1)
    g_close = -float(dist.sum())
    w = CostWeights()
    c_str = -w.alpha_s * a_bar - w.alpha_g * g_close

    if theta.contacts:
        mu = np.array([ct.mu for ct in theta.contacts])
        kappa = np.array([ct.kappa for ct in theta.contacts])
        slip = np.array([ct.slip for ct in theta.contacts])
        mu_inv_min = float(np.min(1.0 / np.clip(mu, _MU_FLOOR, None)))
        c_rho = -w.alpha_r * max(0.0, w.alpha_n * a_bar - mu_inv_min)
        c_ctc = float(np.mean(_contact_cost_terms(mu, kappa, slip)))
    else:
        c_rho = 0.0
        c_ctc = EMPTY_CONTACT_COST
    return c_str + c_rho + c_ctc


def grasp_cost_grad(theta: LatentState, action: Array,
                    hand: HandModel) -> Array:
    """Analytic d(grasp_cost)/d(action); the contact-quality term is flat."""
    action = np.asarray(action, dtype=float)
    a_bar = float(action.mean())
    w = CostWeights()
    grad = np.full(6, -w.alpha_s / 6.0)

    q1 = hand.q + action * hand.dt
    p = hand.fingertips(q1)
    c_obj = theta.pose[:3]
    diff = p - c_obj
    dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-9)
    t = np.einsum("ij,ij->i", diff / dist[:, None], hand.dirs)
    # d(-alpha_g * G_close)/da = alpha_g * sum_i t_i * W_i * dt
    grad += w.alpha_g * hand.dt * (t @ hand.joint_map)

    if theta.contacts:
        mu = np.array([ct.mu for ct in theta.contacts])
        mu_inv_min = float(np.min(1.0 / np.clip(mu, _MU_FLOOR, None)))
        if w.alpha_n * a_bar - mu_inv_min > 0.0:
            grad += -w.alpha_r * w.alpha_n / 6.0
    return grad


def split_latent_batch(latents: Array
                       ) -> tuple[Array, Array, Array, Array]:
    """(n,26) latent rows -> centers (n,3), mu/kappa/slip each (n,5).

    kappa comes back in N/m (the vector slot stores kN/m).
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    centers = latents[:, :3]
    mu = latents[:, 6::4]
    kappa = latents[:, 7::4] * KAPPA_VEC_SCALE
    slip = latents[:, 9::4]
    return centers, mu, kappa, slip


def grasp_cost_batch(centers: Array, mu: Array, kappa: Array, slip: Array,
                     active: Array, action: Array, hand: HandModel,
                     q0: Array | None = None
                     ) -> tuple[Array, Array, Array]:
    """Vectorized cost and action-gradient over belief samples.

    centers (n,3) are believed object centers; mu/kappa/slip are (n,5)
    believed contact parameters with `active` (n,5) marking which finger
    slots count as contacts for each sample. Returns (costs (n,),
    dcost/daction (n,6), fk_grads (n,6)); fk_grads is the closure-distance
    chain alone, which is the piece earlier actions in a multi-step
    horizon inherit.
    """
    action = np.asarray(action, dtype=float)
    q0 = hand.q if q0 is None else q0
    w = CostWeights()
    a_bar = float(action.mean())

    p = hand.fingertips(q0 + action * hand.dt)          # (5, 3)
    diff = p[None, :, :] - centers[:, None, :]          # (n, 5, 3)
    dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-9)
    costs = -w.alpha_s * a_bar + w.alpha_g * dist.sum(axis=1)

    n_act = active.sum(axis=1)
    any_act = n_act > 0
    mu_inv = np.where(active, 1.0 / np.clip(mu, _MU_FLOOR, None), np.inf)
    mu_inv_min = mu_inv.min(axis=1)
    rho_arg = w.alpha_n * a_bar - mu_inv_min
    rho_on = any_act & (rho_arg > 0.0)
    costs = costs - w.alpha_r * np.where(rho_on, rho_arg, 0.0)

    terms = _contact_cost_terms(mu, kappa, slip)
    ctc = np.where(any_act,
                   (terms * active).sum(axis=1) / np.maximum(n_act, 1),
                   EMPTY_CONTACT_COST)
    costs = costs + ctc

    t = np.einsum("nij,ij->ni", diff / dist[:, :, None], hand.dirs)
    fk_grads = w.alpha_g * hand.dt * (t @ hand.joint_map)
    grads = np.full((centers.shape[0], 6), -w.alpha_s / 6.0) + fk_grads
    grads -= (w.alpha_r * w.alpha_n / 6.0) * rho_on[:, None]
    return costs, grads, fk_grads


def grasp_cost_latent_grads(centers: Array, mu: Array, kappa: Array,
                            slip: Array, active: Array, action: Array,
                            hand: HandModel, q0: Array | None = None
                            ) -> Array:
    """Per-sample d(cost)/d(latent vector), shape (n, 26).

    Gradients are in latent-vector coordinates, so the stiffness column
    carries the kN/m chain factor. Rotation and damping slots are flat.
    Kinks (ReLU boundary, mu/kappa sign clamps, friction argmax ties)
    follow the subgradient the forward pass uses.
    """
    action = np.asarray(action, dtype=float)
    q0 = hand.q if q0 is None else q0
    w = CostWeights()
    a_bar = float(action.mean())
    n = centers.shape[0]
    grads = np.zeros((n, 26))

    p = hand.fingertips(q0 + action * hand.dt)
    diff = p[None, :, :] - centers[:, None, :]
    dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-9)
    grads[:, :3] = -w.alpha_g * (diff / dist[:, :, None]).sum(axis=1)

    n_act = active.sum(axis=1)
    any_act = n_act > 0
    mu_c = np.clip(mu, _MU_FLOOR, None)
    mu_inv = np.where(active, 1.0 / mu_c, np.inf)
    argmin = mu_inv.argmin(axis=1)
    rho_on = any_act & (w.alpha_n * a_bar - mu_inv.min(axis=1) > 0.0)

    inv_n = 1.0 / np.maximum(n_act, 1)
    d_mu = np.where(active, -np.exp(-np.maximum(mu, 0.0)) * (mu > 0),
                    0.0) * inv_n[:, None]
    rows = np.flatnonzero(rho_on & (mu[np.arange(n), argmin] > _MU_FLOOR))
    d_mu[rows, argmin[rows]] -= w.alpha_r / mu_c[rows, argmin[rows]] ** 2
    d_kappa = np.where(active, -np.exp(-np.maximum(kappa, 0.0)) * (kappa > 0),
                       0.0) * inv_n[:, None] * KAPPA_VEC_SCALE
    d_slip = np.where(active, sigmoid(slip), 0.0) * inv_n[:, None]

    grads[:, 6::4] = d_mu
    grads[:, 7::4] = d_kappa
    grads[:, 9::4] = d_slip
    return grads


def visual_cost(obs, weights: CostWeights | None = None) -> float:
    """Pose-covariance trace + occlusion softplus + segmentation slack."""
    weights = weights if weights is not None else CostWeights()
    trace = float(obs.pose_trace)
    occ = float(obs.occlusion)
    seg = float(obs.seg_confidence)
    if trace < 0:
        raise ValueError("pose covariance trace must be >= 0")
    if not (0.0 <= occ <= 1.0 and 0.0 <= seg <= 1.0):
        raise ValueError("visual scores must lie in [0, 1]")
    return (weights.omega_pose * trace
            + weights.omega_occ * float(softplus(occ))
            + weights.omega_seg * (1.0 - seg))


def tactile_force(taxels: Array, k: float) -> float:
    """Calibrated sum of one tactile pad (6x12 taxels, 0..255)."""
    taxels = np.asarray(taxels)
    if taxels.shape != (6, 12):
        raise ValueError("taxel grid must be 6x12")
    if np.any(taxels < 0) or np.any(taxels > 255):
        raise ValueError("taxel values must lie in [0, 255]")
    if not k > 0:
        raise ValueError("calibration constant must be positive")
    return float(taxels.sum() / k)


def tactile_quality_proxy(contacts: list[Contact]) -> float:
    """Force-closure proxy from tactile-detected contacts.

    Contacts are rebuilt with fixed mu=0.5 and unit normal forces; torques
    are taken about the contact centroid. Fewer than two contacts score 0.
    """
    if len(contacts) < 2:
        return 0.0
    center = np.mean([c.position for c in contacts], axis=0)
    fixed = [Contact(c.position, c.normal, mu=0.5, normal_force=1.0)
             for c in contacts]
    return ferrari_canny_eps(build_wrench_space(fixed, center, edges=8))
