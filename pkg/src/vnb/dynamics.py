"""Learned belief dynamics: prediction, correction, decode, training.

The recurrent state h is 64-dim. A transition net consumes [h; action],
a correction net consumes [predicted h; observation], and a decoder maps
h to mixture parameters (K logits, K*26 means, K*26 log-stds). Belief
parameters are smoothed with an EMA so a single noisy observation cannot
yank the planner's belief.

Training is teacher-forced backpropagation through time against the
ground-truth latents of simulator rollouts, with the exact mixture NLL
as the objective.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefParams
from .nn import Adam, Dense, Mlp

Array = np.ndarray

D_LATENT = 26
D_HIDDEN = 64
D_ACTION = 6
D_OBS = 41

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

VNBW_MAGIC = b"VNBW"
VNBW_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Observation:
    """41-dim sensor snapshot, stored by named block."""

    pose: Array
    pose_trace: float
    tactile: Array
    contacts: Array
    joint_pos: Array
    joint_vel: Array
    occlusion: float
    seg_confidence: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.tactile = np.asarray(self.tactile, dtype=float)
        self.contacts = np.asarray(self.contacts, dtype=float)
        self.joint_pos = np.asarray(self.joint_pos, dtype=float)
        self.joint_vel = np.asarray(self.joint_vel, dtype=float)
        if self.pose.shape != (6,):
            raise ValueError("pose block must have 6 entries")
        if self.tactile.shape != (5,) or self.contacts.shape != (5,):
            raise ValueError("tactile/contact blocks must have 5 entries")
        if self.joint_pos.shape != (11,) or self.joint_vel.shape != (11,):
            raise ValueError("joint blocks must have 11 entries")
        if not np.all((self.contacts == 0.0) | (self.contacts == 1.0)):
            raise ValueError("contact flags must be binary")
        if not (0.0 <= self.occlusion <= 1.0
                and 0.0 <= self.seg_confidence <= 1.0):
            raise ValueError("visual scores must lie in [0, 1]")

    def to_vector(self) -> Array:
        return np.concatenate([
            self.pose, [self.pose_trace], self.tactile, self.contacts,
            self.joint_pos, self.joint_vel,
            [self.occlusion, self.seg_confidence]])

    @classmethod
    def from_vector(cls, v: Array) -> "Observation":
        v = np.asarray(v, dtype=float)
        if v.shape != (D_OBS,):
            raise ValueError(f"observation vector must have {D_OBS} entries")
        return cls(v[:6], float(v[6]), v[7:12], v[12:17], v[17:28],
                   v[28:39], float(v[39]), float(v[40]))


@dataclass
class BeliefNets:
    f_trans: Mlp
    f_obs: Mlp
    decoder: Mlp
    k: int
    loss_curve: list = field(default_factory=list)

    @classmethod
    def build(cls, k: int, rng: np.random.Generator) -> "BeliefNets":
        f_trans = Mlp.build([D_HIDDEN + D_ACTION, 128, 128, D_HIDDEN], rng)
        f_obs = Mlp.build([D_HIDDEN + D_OBS, 128, 128, D_HIDDEN], rng)
        decoder = Mlp.build([D_HIDDEN, 64, k * (2 * D_LATENT + 1)], rng)
        return cls(f_trans, f_obs, decoder, k)

    def parameters(self) -> list[Array]:
        return (self.f_trans.parameters() + self.f_obs.parameters()
                + self.decoder.parameters())


def decode_belief(nets: BeliefNets, h: Array,
                  temperature: float = 0.1) -> BeliefParams:
    out = nets.decoder(np.asarray(h, dtype=float))
    k = nets.k
    logits = out[:k]
    means = out[k:k + k * D_LATENT].reshape(k, D_LATENT)
    log_stds = np.clip(out[k + k * D_LATENT:].reshape(k, D_LATENT),
                       LOG_STD_MIN, LOG_STD_MAX)
    return BeliefParams(logits, means, log_stds, temperature)


def neural_belief_update(h: Array, phi: BeliefParams, action: Array,
                         obs, nets: BeliefNets, ema: float
                         ) -> tuple[Array, BeliefParams]:
    """Predict with the action, correct with the observation, EMA-blend."""
    h = np.asarray(h, dtype=float)
    action = np.asarray(action, dtype=float)
    o = obs.to_vector() if isinstance(obs, Observation) \
        else np.asarray(obs, dtype=float)
    if h.shape != (D_HIDDEN,) or action.shape != (D_ACTION,) \
            or o.shape != (D_OBS,):
        raise ValueError("h/action/obs shape mismatch")
    if not 0.0 <= ema <= 1.0:
        raise ValueError("ema rate must lie in [0, 1]")
    z = nets.f_trans(np.concatenate([h, action]))
    h_next = nets.f_obs(np.concatenate([z, o]))
    dec = decode_belief(nets, h_next, temperature=phi.temperature)
    if dec.k != phi.k or dec.d != phi.d:
        raise ValueError("decoded belief shape does not match prior belief")
    blended = BeliefParams(
        (1.0 - ema) * phi.logits + ema * dec.logits,
        (1.0 - ema) * phi.means + ema * dec.means,
        (1.0 - ema) * phi.log_stds + ema * dec.log_stds,
        phi.temperature)
    return h_next, blended


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    epochs: int = 500
    k: int = 8
    tau_start: float = 1.0
    tau_end: float = 0.1
    ema_rate: float = 0.3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def tau_at(self, epoch: int) -> float:
        # cosine from tau_start to tau_end across the run
        frac = min(1.0, epoch / max(1, self.epochs))
        return self.tau_end + 0.5 * (self.tau_start - self.tau_end) \
            * (1.0 + np.cos(np.pi * frac))


def _gmm_nll_and_grad(out: Array, k: int, theta: Array
                      ) -> tuple[float, Array]:
    """Mixture NLL of theta under raw decoder outputs, plus d(nll)/d(out)."""
    d = D_LATENT
    logits = out[:k]
    means = out[k:k + k * d].reshape(k, d)
    raw_ls = out[k + k * d:].reshape(k, d)
    log_stds = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    sig = np.exp(log_stds)

    z = (theta - means) / sig
    log_norm = -0.5 * (z * z).sum(axis=1) - log_stds.sum(axis=1) \
        - 0.5 * d * np.log(2.0 * np.pi)
    log_pi = logits - (np.max(logits)
                       + np.log(np.exp(logits - np.max(logits)).sum()))
    joint = log_pi + log_norm
    m = np.max(joint)
    logp = m + np.log(np.exp(joint - m).sum())
    nll = -logp

    r = np.exp(joint - logp)                    # responsibilities
    pi = np.exp(log_pi)
    g = np.empty_like(out)
    g[:k] = pi - r
    g[k:k + k * d] = (-(r[:, None] * z / sig)).ravel()
    g_ls = -(r[:, None] * (z * z - 1.0))
    # clamped log-stds pass no gradient
    g_ls[(raw_ls <= LOG_STD_MIN) | (raw_ls >= LOG_STD_MAX)] = 0.0
    g[k + k * d:] = g_ls.ravel()
    return float(nll), g


def _dataset_nll(nets: BeliefNets, dataset: list[dict]) -> float:
    total, count = 0.0, 0
    for traj in dataset:
        obs, acts, lats = traj["observations"], traj["actions"], \
            traj["latents"]
        h = np.zeros(D_HIDDEN)
        for t in range(len(acts)):
            z = nets.f_trans(np.concatenate([h, acts[t]]))
            h = nets.f_obs(np.concatenate([z, obs[t]]))
            out = nets.decoder(h)
            nll, _ = _gmm_nll_and_grad(out, nets.k, lats[t])
            total += nll
            count += 1
    return total / max(count, 1)


def train_belief_nets(dataset: list[dict], cfg: TrainConfig,
                      rng: np.random.Generator) -> BeliefNets:
    """Teacher-forced BPTT on simulator trajectories.

    Each dataset entry holds arrays "observations" (T,41), "actions"
    (T,6), "latents" (T,26). The recorded loss curve starts with the
    pre-update dataset NLL and ends with the post-training dataset NLL.
    """
    if not dataset:
        raise ValueError("empty dataset")
    dataset = [_as_traj_arrays(t) for t in dataset]
    nets = BeliefNets.build(cfg.k, rng)
    params = nets.parameters()
    opt = Adam(lr=cfg.lr)
    nets.loss_curve = [_dataset_nll(nets, dataset)]

    n_tr = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_tr)
        epoch_losses = []
        for start in range(0, n_tr, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for ti in batch:
                loss, tg = _traj_backward(nets, dataset[ti])
                batch_loss += loss
                for g, dg in zip(grads, tg):
                    g += dg
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch)
            for g in grads:
                g /= len(batch)
            opt.step(params, grads)
            epoch_losses.append(batch_loss)
        nets.loss_curve.append(float(np.mean(epoch_losses)))
    nets.loss_curve.append(_dataset_nll(nets, dataset))
    return nets


def _as_traj_arrays(traj: dict) -> dict:
    out = {key: np.asarray(traj[key], dtype=float)
           for key in ("observations", "actions", "latents")}
    t = out["actions"].shape[0]
    if out["observations"].shape != (t, D_OBS) \
            or out["latents"].shape != (t, D_LATENT) \
            or out["actions"].shape != (t, D_ACTION):
        raise ValueError("trajectory block shapes disagree")
    return out


def _traj_backward(nets: BeliefNets, traj: dict
                   ) -> tuple[float, list[Array]]:
    """Loss and full-parameter gradients for one trajectory (BPTT)."""
    obs, acts, lats = traj["observations"], traj["actions"], traj["latents"]
    t_len = len(acts)
    h = np.zeros(D_HIDDEN)
    caches = []
    loss = 0.0
    douts = []
    for t in range(t_len):
        x = np.concatenate([h, acts[t]])
        z, c_tr = nets.f_trans.forward(x)
        y = np.concatenate([z, obs[t]])
        h, c_ob = nets.f_obs.forward(y)
        out, c_de = nets.decoder.forward(h)
        nll, dout = _gmm_nll_and_grad(out, nets.k, lats[t])
        loss += nll
        caches.append((c_tr, c_ob, c_de))
        douts.append(dout)
    loss /= t_len

    g_trans = [(np.zeros_like(l.w), np.zeros_like(l.b))
               for l in nets.f_trans.layers]
    g_obs = [(np.zeros_like(l.w), np.zeros_like(l.b))
             for l in nets.f_obs.layers]
    g_dec = [(np.zeros_like(l.w), np.zeros_like(l.b))
             for l in nets.decoder.layers]
    gh_next = np.zeros(D_HIDDEN)
    for t in range(t_len - 1, -1, -1):
        c_tr, c_ob, c_de = caches[t]
        gdec_in, pg = nets.decoder.backward(c_de, douts[t] / t_len)
        _accumulate(g_dec, pg)
        gh = gdec_in[0] + gh_next
        gy, pg = nets.f_obs.backward(c_ob, gh)
        _accumulate(g_obs, pg)
        gx, pg = nets.f_trans.backward(c_tr, gy[0][:D_HIDDEN])
        _accumulate(g_trans, pg)
        gh_next = gx[0][:D_HIDDEN]

    flat: list[Array] = []
    for pairs in (g_trans, g_obs, g_dec):
        for gw, gb in pairs:
            flat.append(gw)
            flat.append(gb)
    return loss, flat


def _accumulate(acc: list, pg: list) -> None:
    for (aw, ab), (gw, gb) in zip(acc, pg):
        aw += gw
        ab += gb


# ---------------------------------------------------------------------------
# Weight serialization: "VNBW" header then f64 row-major blocks


def save_nets(nets: BeliefNets, path: str) -> None:
    layers = (nets.f_trans.layers + nets.f_obs.layers
              + nets.decoder.layers)
    with open(path, "wb") as fh:
        fh.write(VNBW_MAGIC)
        fh.write(struct.pack("<II", VNBW_VERSION, len(layers)))
        for layer in layers:
            fh.write(struct.pack("<II", layer.w.shape[0], layer.w.shape[1]))
        for layer in layers:
            fh.write(np.ascontiguousarray(layer.w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def load_nets(path: str) -> BeliefNets:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VNBW_MAGIC:
        raise ValueError("not a VNBW weight file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VNBW_VERSION:
        raise ValueError(f"unsupported VNBW version {version}")
    shapes = []
    off = 12
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", blob, off)
        shapes.append((rows, cols))
        off += 8
    layers = []
    for rows, cols in shapes:
        need = rows * cols * 8
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols,
                          offset=off).reshape(rows, cols).copy()
        off += need
        b = np.frombuffer(blob, dtype="<f8", count=cols, offset=off).copy()
        off += cols * 8
        layers.append(Dense(w, b))
    if off != len(blob):
        raise ValueError("trailing bytes in VNBW file")
    if count != 8:
        raise ValueError(f"expected 8 layers, found {count}")
    f_trans = Mlp(layers[0:3], ["tanh", "tanh", "linear"])
    f_obs = Mlp(layers[3:6], ["tanh", "tanh", "linear"])
    decoder = Mlp(layers[6:8], ["tanh", "linear"])
    out_dim = layers[7].w.shape[1]
    if out_dim % (2 * D_LATENT + 1) != 0:
        raise ValueError("decoder output is not K*(2d+1)")
    return BeliefNets(f_trans, f_obs, decoder,
                      out_dim // (2 * D_LATENT + 1))


# ---------------------------------------------------------------------------
# Trajectory datasets: JSON-lines, one trajectory per line


def save_dataset(dataset: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        for traj in dataset:
            fh.write(json.dumps({
                "observations": np.asarray(traj["observations"]).tolist(),
                "actions": np.asarray(traj["actions"]).tolist(),
                "latents": np.asarray(traj["latents"]).tolist(),
            }) + "\n")


def load_dataset(path: str) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(_as_traj_arrays(json.loads(line)))
    return out
