"""Contact frames, friction cones, and grasp wrench space geometry.

The grasp wrench space (GWS) is the convex hull of the edge wrenches of
the linearized friction cone at every contact. Its quality number is the
radius of the largest origin-centered ball inside the hull; the sign of
that number is the force-closure certificate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.spatial import ConvexHull, QhullError

Array = np.ndarray

_WORLD_Z = np.array([0.0, 0.0, 1.0])
_WORLD_X = np.array([1.0, 0.0, 0.0])


def contact_frame(fingertip: Array, center: Array,
                  reference: Array | None = None) -> Array:
    """Right-handed orthonormal frame rows (n, t1, t2).

    The normal points from the fingertip toward the object center. The
    reference axis seeds t1; near-parallel references fall back to world
    z, then world x.
    """
    p = np.asarray(fingertip, dtype=float)
    c = np.asarray(center, dtype=float)
    v = c - p
    dist = np.linalg.norm(v)
    if dist < 1e-12:
        raise ValueError("fingertip coincides with the object center")
    n = v / dist
    candidates = [] if reference is None else [np.asarray(reference, float)]
    candidates += [_WORLD_Z, _WORLD_X]
    for e in candidates:
        e = e / np.linalg.norm(e)
        if abs(n @ e) <= 1.0 - 1e-6:
            t1 = np.cross(n, e)
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(n, t1)
            return np.vstack([n, t1, t2])
    raise ValueError("no usable reference axis")  # unreachable for unit n


@dataclass
class Contact:
    """Point contact with Coulomb friction and a local frame."""

    position: Array
    normal: Array
    mu: float
    normal_force: float = 1.0
    frame: Array | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("contact normal must be unit length")
        if self.mu < 0:
            raise ValueError("friction coefficient must be >= 0")
        if self.frame is None:
            # reuse the tangent construction with the normal already fixed
            for e in (_WORLD_Z, _WORLD_X):
                if abs(self.normal @ e) <= 1.0 - 1e-6:
                    t1 = np.cross(self.normal, e)
                    t1 /= np.linalg.norm(t1)
                    t2 = np.cross(self.normal, t1)
                    self.frame = np.vstack([self.normal, t1, t2])
                    break
        else:
            self.frame = np.asarray(self.frame, dtype=float)
            if not np.allclose(self.frame @ self.frame.T, np.eye(3),
                               atol=1e-9):
                raise ValueError("contact frame must be orthonormal")
            if np.linalg.det(self.frame) < 0:
                raise ValueError("contact frame must be right-handed")


@dataclass
class WrenchSpace:
    """Edge wrenches (rows) whose convex hull is the GWS."""

    wrenches: Array                      # (n_edges_total, 6)
    cone_edges: int
    contact_index: Array = field(default_factory=lambda: np.zeros(0, int))
    normal_components: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.wrenches = np.asarray(self.wrenches, dtype=float).reshape(-1, 6)
        self.contact_index = np.asarray(self.contact_index, dtype=int)
        self.normal_components = np.asarray(self.normal_components,
                                            dtype=float)

    @property
    def n_contacts(self) -> int:
        return int(self.contact_index.max()) + 1 if self.contact_index.size \
            else 0

    def to_json(self) -> str:
        return json.dumps({
            "wrenches": self.wrenches.tolist(),
            "cone_edges": int(self.cone_edges),
            "contact_index": self.contact_index.tolist(),
            "normal_components": self.normal_components.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "WrenchSpace":
        doc = json.loads(text)
        return cls(np.array(doc["wrenches"], dtype=float),
                   int(doc["cone_edges"]),
                   np.array(doc["contact_index"], dtype=int),
                   np.array(doc["normal_components"], dtype=float))


def build_wrench_space(contacts: list[Contact], center: Array,
                       edges: int = 8) -> WrenchSpace:
    """Linearized friction-cone edge wrenches about `center`.

    Each edge force is n + mu (cos p t1 + sin p t2), normalized to unit
    length, then scaled by the contact's normal force budget. Torques use
    the lever arm from `center`.
    """
    if edges < 3:
        raise ValueError("at least 3 cone edges required")
    center = np.asarray(center, dtype=float)
    if not contacts:
        return WrenchSpace(np.zeros((0, 6)), edges)
    rows, idx, ncomp = [], [], []
    phis = 2.0 * np.pi * np.arange(edges) / edges
    for i, ct in enumerate(contacts):
        n, t1, t2 = ct.frame
        f = n[None, :] + ct.mu * (np.cos(phis)[:, None] * t1
                                  + np.sin(phis)[:, None] * t2)
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        f *= ct.normal_force
        arm = ct.position - center
        tau = np.cross(np.broadcast_to(arm, f.shape), f)
        rows.append(np.hstack([f, tau]))
        idx.append(np.full(edges, i))
        ncomp.append(f @ n)
    return WrenchSpace(np.vstack(rows), edges, np.concatenate(idx),
                       np.concatenate(ncomp))


def min_norm_point(points: Array) -> tuple[Array, float]:
    """Closest point of conv(points) to the origin.

    Solved as a nonnegative least-squares problem with a penalty row
    enforcing the convex-combination constraint; the residual constraint
    violation is O(dist^2 / rho^2) and removed by renormalizing.
    """
    p = np.asarray(points, dtype=float)
    rho = 1e6 * max(1.0, float(np.abs(p).max()))
    a = np.vstack([p.T, np.full((1, p.shape[0]), rho)])
    b = np.concatenate([np.zeros(p.shape[1]), [rho]])
    lam, _ = nnls(a, b)
    s = lam.sum()
    if s <= 0:
        lam = np.full(p.shape[0], 1.0 / p.shape[0])
    else:
        lam = lam / s
    x = lam @ p
    return x, float(np.linalg.norm(x))


def ferrari_canny_eps(ws: WrenchSpace) -> float:
    """Largest origin-centered ball radius inside the GWS hull.

    Negative values are the signed distance from the origin to the hull
    (origin outside, no force closure); rank-deficient wrench sets cannot
    enclose a 6-D ball and report 0 on the hull, negative off it.
    """
    pts = ws.wrenches
    if pts.shape[0] == 0:
        raise ValueError("empty wrench space")
    if pts.shape[0] >= 7:
        spread = pts - pts[0]
        if np.linalg.matrix_rank(spread, tol=1e-9) == 6:
            try:
                hull = ConvexHull(pts)
            except QhullError:
                hull = None
            if hull is not None:
                offsets = hull.equations[:, 6]
                worst = float(offsets.max())
                if worst <= 0.0:
                    return -worst
                _, dist = min_norm_point(pts)
                return -dist
    _, dist = min_norm_point(pts)
    return 0.0 if dist <= 1e-9 else -dist


def wrench_containment(ws: WrenchSpace, target: Array,
                       force_cap: float | None = None) -> bool:
    """Can nonnegative edge-force combinations produce `target` exactly?

    With force_cap set, the summed normal force at each contact is limited
    to that many newtons.
    """
    pts = ws.wrenches
    if pts.shape[0] == 0:
        return bool(np.allclose(np.asarray(target, float), 0.0))
    target = np.asarray(target, dtype=float)
    n = pts.shape[0]
    a_ub = b_ub = None
    if force_cap is not None and ws.contact_index.size == n:
        k = ws.n_contacts
        a_ub = np.zeros((k, n))
        a_ub[ws.contact_index, np.arange(n)] = ws.normal_components
        b_ub = np.full(k, force_cap)
    res = linprog(np.ones(n), A_ub=a_ub, b_ub=b_ub,
                  A_eq=pts.T, b_eq=target,
                  bounds=(0, None), method="highs")
    return bool(res.status == 0)
