"""Joint fitting of static and dynamic Gaussians to a posed monocular
sequence.

Per optimization step: render a batch of query frames against the input
images, aligned depth and motion masks; composite dynamic-only
correspondence maps toward a shared set of target frames and penalize
their reprojection against the observed 2D tracks; regularize with a
local rigidity term, an acceleration penalty on the motion bases and
sampled camera-space depths, and a scale-isotropy penalty.  All losses
are mean-reduced over their valid elements.

Gradient flow notes: the rigidity kernel exp(-beta * dist) is evaluated
on values only (a fixed attention weight, not a target), and track maps
enter the loss unnormalized, exactly as composited.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .errors import (DegenerateConfiguration, InvalidSpec, NonFiniteValue,
                     ShapeMismatch)
from .geometry import Camera, Z_NEAR, unproject_points
from .initialization import (PrefitConfig, TrackTable, align_depth,
                             cluster_centers, cluster_velocities, init_bases,
                             init_coeffs, lift_tracks, prefit,
                             sample_canonical_means, select_canonical_frame)
from .motion import (IDENTITY_6D, MotionBases, MotionCoeffs, blend_vars,
                     quat_to_matrix_var, rot6d_to_matrix_var)
from .optim import Adam
from .splat import GaussianSet, render_graph

ABLATIONS = ("none", "no-tracks", "no-init", "transl-bases", "per-gaussian")

# composite channel layout used throughout training renders
CH_DEPTH = 3
CH_DYN = 4
CH_EXTRA = 5        # first correspondence channel when targets are attached


@dataclass
class LossWeights:
    lambda_depth: float = 0.5
    lambda_mask: float = 1.0
    lambda_track2d: float = 2.0
    lambda_trackdepth: float = 0.1
    lambda_rigidity: float = 0.1
    lambda_depthgrad: float = 1.0
    lambda_smooth: float = 0.1
    lambda_isotropy: float = 0.1
    beta_rigidity: float = 2.0

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise InvalidSpec(f"{name} must be >= 0, got {val}")


@dataclass
class TrainConfig:
    epochs: int = 500
    query_batch: int = 8
    targets_per_query: int = 4
    rigidity_centers: int = 32
    rigidity_knn: int = 16
    n_bases: int = 20
    n_dynamic: int = 40000
    n_static: int = 100000
    seed: int = 0
    prune_every: int = 100
    prune_opacity: float = 0.005
    smooth_samples: int = 32
    prefit_steps: int = 300
    lr_means: float = 1.6e-4
    lr_opacity: float = 1e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 1e-2
    lr_bases: float = 1.6e-4
    lr_coeffs: float = 1e-2
    ablate: str = "none"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("epochs", "query_batch", "targets_per_query",
                     "rigidity_centers", "rigidity_knn", "n_bases",
                     "n_dynamic", "n_static", "prune_every", "smooth_samples"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if self.ablate not in ABLATIONS:
            raise InvalidSpec(f"unknown ablation {self.ablate!r}")


# ---------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------


def loss_recon(render: Var, image: np.ndarray, depth: np.ndarray,
               mask: np.ndarray, weights: LossWeights) -> dict:
    """Per-frame reconstruction terms on a composited (H, W, >=6) render.

    Channels: rgb, camera depth, dynamic coverage, ..., alpha.  The mask
    term pulls dynamic coverage toward 1 on motion-mask pixels only; what
    coverage does elsewhere is the image/depth terms' business.  Returns
    weighted component Vars plus their sum under "total"; a perfect render
    scores exactly 0 on every component.
    """
    H, W = render.value.shape[:2]
    if image.shape != (H, W, 3) or depth.shape != (H, W) or mask.shape != (H, W):
        raise ShapeMismatch("render/input shapes differ")
    tape = render.tape
    img_term = (render[:, :, 0:3] - tape.const(image)).abs().mean()
    d_hat = render[:, :, CH_DEPTH]
    depth_term = (d_hat - tape.const(depth)).abs().mean()
    m_hat = render[:, :, CH_DYN]
    inside = np.flatnonzero(mask.reshape(-1))
    if inside.size:
        mask_term = (m_hat.reshape(-1).take(inside) - 1.0).abs().mean()
    else:
        mask_term = tape.const(np.zeros(()))
    gx = (d_hat[:, 1:] - d_hat[:, :-1]) - tape.const(np.diff(depth, axis=1))
    gy = (d_hat[1:, :] - d_hat[:-1, :]) - tape.const(np.diff(depth, axis=0))
    grad_term = 0.5 * (gx.abs().mean() + gy.abs().mean())
    out = {
        "image": img_term,
        "depth": weights.lambda_depth * depth_term,
        "mask": weights.lambda_mask * mask_term,
        "depthgrad": weights.lambda_depthgrad * grad_term,
    }
    out["total"] = out["image"] + out["depth"] + out["mask"] + out["depthgrad"]
    return out


def project_var(cam: Camera, X: Var) -> tuple[Var, Var]:
    """Taped pinhole projection of (N, 3) world points: ((N, 2) uv, (N,) z)."""
    tape = X.tape
    Xc = ad.einsum("ij,nj->ni", tape.const(cam.E.R), X) + tape.const(cam.E.t)
    z = Xc[:, 2].clamp_min(Z_NEAR)
    u = cam.fx * Xc[:, 0] / z + cam.cx
    v = cam.fy * Xc[:, 1] / z + cam.cy
    return ad.stack([u, v], axis=-1), z


def loss_track(world_target: Var, cam_target: Camera, uv_obs: np.ndarray,
               depth_obs: Var | None, weights: LossWeights
               ) -> tuple[Var, Var]:
    """Track losses for one (query, target) frame pair, already weighted.

    world_target (K, 3) are composited correspondence positions sampled at
    the query pixels; uv_obs are the observed target-frame positions.  The
    2D term is an l1 in pixel coordinates normalized by the longest image
    edge; the depth term compares the correspondences' camera depth with
    depth_obs (the target frame's rendered depth at uv_obs).
    """
    tape = world_target.tape
    if world_target.value.shape[0] == 0:
        zero = tape.const(np.zeros(()))
        return zero, zero
    uv_hat, z_hat = project_var(cam_target, world_target)
    max_edge = float(max(cam_target.width, cam_target.height))
    t2d = ((uv_hat - tape.const(uv_obs)).abs().sum(axis=-1) / max_edge).mean()
    if depth_obs is None:
        tdep = tape.const(np.zeros(()))
    else:
        tdep = (z_hat - depth_obs).abs().mean()
    return weights.lambda_track2d * t2d, weights.lambda_trackdepth * tdep


def loss_rigidity(mu_t: Var, mu_tprime: Var, centers: np.ndarray,
                  neighbors: np.ndarray, beta: float) -> Var:
    """Distance preservation between two timesteps, unweighted.

    centers (C,) and neighbors (C, K) index rows of mu_t/mu_tprime.  Pairs
    are weighted by exp(-beta * dist_t) and the loss is the mean over all
    pairs.  The kernel stays on the tape so the weight itself pulls pairs
    closer, matching finite differences.
    """
    C, K = neighbors.shape
    flat = neighbors.reshape(-1)

    def dists(mu):
        a = mu.take(centers).reshape(C, 1, 3)
        b = mu.take(flat).reshape(C, K, 3)
        return (a - b).norm(axis=-1)

    d_t = dists(mu_t)
    d_tp = dists(mu_tprime)
    return ((d_t - d_tp).square() * (d_t * (-beta)).exp()).mean()


def loss_smooth(rot6d: Var | None, transl: Var, z_samples: Var | None) -> Var:
    """Mean squared second difference along time, unweighted.

    rot6d (B, T, 6) and transl (B, T, 3) are the basis sequences (rot6d
    None when rotations are frozen); z_samples (S, T) are camera-space
    depths of sampled dynamic Gaussians.  Zero for T < 3.
    """
    tape = transl.tape

    def accel(x: Var) -> Var:
        if x.value.shape[1] < 3:
            return tape.const(np.zeros(()))
        return (x[:, 2:] - 2.0 * x[:, 1:-1] + x[:, :-2]).square().mean()

    total = accel(transl)
    if rot6d is not None:
        total = total + accel(rot6d)
    if z_samples is not None and z_samples.value.shape[1] >= 3:
        zacc = (z_samples[:, 2:] - 2.0 * z_samples[:, 1:-1]
                + z_samples[:, :-2]).square().mean()
        total = total + zacc
    return total


def loss_isotropy(scale: Var) -> Var:
    """Mean per-Gaussian variance of the three axis scales, unweighted.

    Uses the pairwise identity var = sum of squared pairwise diffs / 9 so
    perfectly isotropic rows give bitwise zero.
    """
    a, b, c = scale[:, 0], scale[:, 1], scale[:, 2]
    pair = (a - b).square() + (b - c).square() + (a - c).square()
    return pair.mean() * (1.0 / 9.0)


# ---------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class SceneModel:
    """All trainable state: per-Gaussian parameters for the dynamic and
    static sets, shared motion bases, and per-dynamic-Gaussian blend
    logits (absent in per-Gaussian motion mode, where basis b belongs to
    Gaussian b)."""

    dyn_mu0: Parameter
    dyn_quat: Parameter
    dyn_log_scale: Parameter
    dyn_opacity: Parameter
    dyn_color: Parameter
    coeff_logits: Parameter | None
    bases_rot6d: Parameter      # (B, T, 6)
    bases_transl: Parameter     # (B, T, 3)
    sta_mu: Parameter
    sta_quat: Parameter
    sta_log_scale: Parameter
    sta_opacity: Parameter
    sta_color: Parameter
    t0: int
    rot_frozen: bool = False
    per_gaussian: bool = False

    @property
    def n_dynamic(self) -> int:
        return self.dyn_mu0.value.shape[0]

    @property
    def n_static(self) -> int:
        return self.sta_mu.value.shape[0]

    @property
    def n_bases(self) -> int:
        return self.bases_rot6d.value.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bases_rot6d.value.shape[1]

    def parameters(self) -> list[Parameter]:
        ps = [self.dyn_mu0, self.dyn_quat, self.dyn_log_scale, self.dyn_opacity,
              self.dyn_color, self.bases_rot6d, self.bases_transl,
              self.sta_mu, self.sta_quat, self.sta_log_scale, self.sta_opacity,
              self.sta_color]
        if self.coeff_logits is not None:
            ps.insert(5, self.coeff_logits)
        return ps

    def state_dict(self) -> dict:
        state = {p.name: p.value.copy() for p in self.parameters()}
        state["_meta/t0"] = np.array([self.t0])
        state["_meta/flags"] = np.array([int(self.rot_frozen),
                                         int(self.per_gaussian)])
        return state

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            p.value = state[p.name].copy()
            p.grad = np.zeros_like(p.value)
        self.t0 = int(state["_meta/t0"][0])
        self.rot_frozen = bool(state["_meta/flags"][0])
        self.per_gaussian = bool(state["_meta/flags"][1])

    def gaussians(self) -> GaussianSet:
        """Canonical GaussianSet with dynamic rows first."""
        return GaussianSet(
            mu0=np.concatenate([self.dyn_mu0.value, self.sta_mu.value]),
            quat=np.concatenate([self.dyn_quat.value, self.sta_quat.value]),
            log_scale=np.concatenate([self.dyn_log_scale.value,
                                      self.sta_log_scale.value]),
            opacity_logit=np.concatenate([self.dyn_opacity.value,
                                          self.sta_opacity.value]),
            color=np.concatenate([np.clip(self.dyn_color.value, 0, 1),
                                  np.clip(self.sta_color.value, 0, 1)]),
            is_dynamic=np.concatenate([np.ones(self.n_dynamic, dtype=bool),
                                       np.zeros(self.n_static, dtype=bool)]),
        )

    def motion(self) -> tuple[MotionBases, MotionCoeffs]:
        bases = MotionBases(self.bases_rot6d.value.copy(),
                            self.bases_transl.value.copy(), self.t0)
        if self.per_gaussian:
            coeffs = MotionCoeffs(np.eye(self.n_bases) * 60.0)
        else:
            coeffs = MotionCoeffs(self.coeff_logits.value.copy())
        return bases, coeffs


def scene_model_from_state(state: dict) -> SceneModel:
    """Rebuild a SceneModel from a state_dict (checkpoint payload)."""
    flags = state["_meta/flags"]
    per_gaussian = bool(flags[1])

    def par(name):
        return Parameter(np.array(state[name], dtype=np.float64), name)

    return SceneModel(
        dyn_mu0=par("dyn_mu0"), dyn_quat=par("dyn_quat"),
        dyn_log_scale=par("dyn_log_scale"), dyn_opacity=par("dyn_opacity"),
        dyn_color=par("dyn_color"),
        coeff_logits=None if per_gaussian else par("coeff_logits"),
        bases_rot6d=par("bases_rot6d"), bases_transl=par("bases_transl"),
        sta_mu=par("sta_mu"), sta_quat=par("sta_quat"),
        sta_log_scale=par("sta_log_scale"), sta_opacity=par("sta_opacity"),
        sta_color=par("sta_color"),
        t0=int(state["_meta/t0"][0]),
        rot_frozen=bool(flags[0]),
        per_gaussian=per_gaussian,
    )


def _identity_bases(B: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    rot = np.tile(IDENTITY_6D, (B, T, 1))
    return rot, np.zeros((B, T, 3))


def _median_nn(pts: np.ndarray) -> float:
    n = pts.shape[0]
    if n < 2:
        return 0.05
    d2 = np.sum((pts[:, None] - pts[None, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(d2.min(axis=1))))


def _bilinear(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    u = np.clip(uv[:, 0], 0, W - 1)
    v = np.clip(uv[:, 1], 0, H - 1)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return ((1 - fv) * ((1 - fu) * img[v0, u0] + fu * img[v0, u1])
            + fv * ((1 - fu) * img[v1, u0] + fu * img[v1, u1]))


def aligned_depths(seq) -> np.ndarray:
    """Metric per-frame depth maps from the relative inputs and anchors."""
    out = np.zeros_like(seq.depths_rel)
    for t in range(seq.n_frames):
        a, _ = align_depth(seq.depths_rel[t], seq.ref_points[t])
        out[t] = a.scale * seq.depths_rel[t] + a.shift
    return out


def _translation_only_bases(lifted: TrackTable, labels: np.ndarray, t0: int,
                            B: int) -> MotionBases:
    """Per-cluster confidence-weighted mean displacement from the canonical
    frame; gaps filled by linear interpolation.  Rotations stay identity."""
    P, T = lifted.visible.shape
    rot, transl = _identity_bases(B, T)
    for b in range(B):
        members = np.flatnonzero((labels == b) & lifted.visible[:, t0])
        if members.size == 0:
            raise DegenerateConfiguration(f"cluster {b} invisible at t0")
        known = np.zeros(T, dtype=bool)
        for t in range(T):
            rows = members[lifted.visible[members, t]]
            if rows.size == 0:
                continue
            w = lifted.confidence[rows, t] * lifted.confidence[rows, t0]
            if w.sum() <= 0:
                continue
            disp = lifted.xyz[rows, t] - lifted.xyz[rows, t0]
            transl[b, t] = (disp * w[:, None]).sum(axis=0) / w.sum()
            known[t] = True
        if not known.any():
            raise DegenerateConfiguration(f"cluster {b} never co-visible with t0")
        idx = np.arange(T)
        for k in range(3):
            transl[b, :, k] = np.interp(idx, idx[known], transl[b, known, k])
    return MotionBases(rot, transl, t0)


def init_model(seq, tracks: TrackTable, config: TrainConfig
               ) -> tuple[SceneModel, dict]:
    """Build the initial model from a sequence and its 2D tracks.

    Static Gaussians are unprojected from pixels outside the motion mask;
    dynamic Gaussians come from the lifted-track pipeline (clustering,
    per-cluster rigid fits, coefficient seeding, prefit) unless the
    ablation disables it.  Returns (model, info) where info carries the
    canonical frame, cluster labels and the source track index per
    dynamic Gaussian when available.
    """
    rng = np.random.default_rng(config.seed)
    T, H, W = seq.n_frames, seq.height, seq.width
    metric = aligned_depths(seq)
    info: dict = {}

    # static set: sample background pixels over all frames
    cand = []
    for t in range(T):
        vs, us = np.nonzero(~seq.masks[t])
        cand.append(np.stack([np.full(vs.size, t), vs, us], axis=1))
    cand = np.concatenate(cand, axis=0)
    if cand.shape[0] == 0:
        raise DegenerateConfiguration("motion mask covers every pixel")
    pick = rng.choice(cand.shape[0], size=config.n_static,
                      replace=config.n_static > cand.shape[0])
    sta_mu = np.zeros((config.n_static, 3))
    sta_color = np.zeros((config.n_static, 3))
    sta_scale = np.zeros(config.n_static)
    for t in np.unique(cand[pick, 0]):
        rows = np.flatnonzero(cand[pick, 0] == t)
        vs, us = cand[pick[rows], 1], cand[pick[rows], 2]
        uv = np.stack([us, vs], axis=1).astype(np.float64)
        z = metric[t, vs, us]
        sta_mu[rows] = unproject_points(seq.cams[t], uv, z)
        sta_color[rows] = seq.images[t, vs, us]
        sta_scale[rows] = z / seq.cams[t].fx
    bg_per_frame = max(1.0, cand.shape[0] / T)
    spacing = max(1.0, np.sqrt(bg_per_frame / config.n_static))
    sta_log_scale = np.log(np.maximum(0.9 * sta_scale * spacing, 1e-4))

    use_tracks = config.ablate not in ("no-tracks", "no-init")
    B = config.n_bases
    if use_tracks:
        lifted = lift_tracks(tracks, metric, seq.cams)
        t0 = select_canonical_frame(lifted)
        labels = cluster_velocities(lifted, B, seed=config.seed)
        if config.ablate == "transl-bases":
            bases = _translation_only_bases(lifted, labels, t0, B)
        else:
            bases = init_bases(lifted, labels, t0)
        mu0, track_idx = sample_canonical_means(lifted, labels, bases,
                                                config.n_dynamic, rng)
        centers = cluster_centers(lifted, labels, bases)
        coeffs = init_coeffs(mu0, centers)
        if config.prefit_steps > 0 and config.ablate != "transl-bases":
            pf = PrefitConfig(steps=config.prefit_steps)
            mu0, coeffs, bases, _ = prefit(mu0, coeffs, bases,
                                           lifted.subset(track_idx), pf)
        dyn_color = np.full((config.n_dynamic, 3), 0.5)
        for i, p in enumerate(track_idx):
            tf = int(np.argmax(lifted.visible[p]))
            if lifted.visible[p, tf]:
                dyn_color[i] = _bilinear(seq.images[tf], lifted.uv[p, tf][None])[0]
        info.update(t0=t0, labels=labels, track_idx=track_idx)
    else:
        t0 = 0
        vs, us = np.nonzero(seq.masks[t0])
        if vs.size == 0:
            raise DegenerateConfiguration("motion mask empty at frame 0")
        pick_d = rng.choice(vs.size, size=config.n_dynamic,
                            replace=config.n_dynamic > vs.size)
        uv = np.stack([us[pick_d], vs[pick_d]], axis=1).astype(np.float64)
        z = metric[t0, vs[pick_d], us[pick_d]]
        mu0 = unproject_points(seq.cams[t0], uv, z)
        dyn_color = seq.images[t0, vs[pick_d], us[pick_d]]
        rot, transl = _identity_bases(B, T)
        bases = MotionBases(rot, transl, t0)
        coeffs = MotionCoeffs(0.01 * rng.standard_normal((config.n_dynamic, B)))
        info.update(t0=t0)

    per_gaussian = config.ablate == "per-gaussian"
    if per_gaussian:
        owner = coeffs.argmax_basis()
        bases = MotionBases(bases.rot6d[owner], bases.transl[owner], t0)
        coeff_param = None
    else:
        coeff_param = Parameter(coeffs.logits, "coeff_logits")

    nd = mu0.shape[0]
    quat_id = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (nd, 1))
    dyn_log_scale = np.full((nd, 3), np.log(max(_median_nn(mu0), 1e-3)))

    model = SceneModel(
        dyn_mu0=Parameter(mu0, "dyn_mu0"),
        dyn_quat=Parameter(quat_id, "dyn_quat"),
        dyn_log_scale=Parameter(dyn_log_scale, "dyn_log_scale"),
        dyn_opacity=Parameter(np.full(nd, _logit(0.8)), "dyn_opacity"),
        dyn_color=Parameter(dyn_color, "dyn_color"),
        coeff_logits=coeff_param,
        bases_rot6d=Parameter(bases.rot6d, "bases_rot6d"),
        bases_transl=Parameter(bases.transl, "bases_transl"),
        sta_mu=Parameter(sta_mu, "sta_mu"),
        sta_quat=Parameter(np.tile(np.array([1.0, 0.0, 0.0, 0.0]),
                                   (config.n_static, 1)), "sta_quat"),
        sta_log_scale=Parameter(np.tile(sta_log_scale[:, None], (1, 3)),
                                "sta_log_scale"),
        sta_opacity=Parameter(np.full(config.n_static, _logit(0.8)), "sta_opacity"),
        sta_color=Parameter(sta_color, "sta_color"),
        t0=t0,
        rot_frozen=config.ablate == "transl-bases",
        per_gaussian=per_gaussian,
    )
    return model, info


# ---------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------


HISTORY_FIELDS = ("step", "image", "depth", "mask", "depthgrad", "track2d",
                  "trackdepth", "rigidity", "smooth", "isotropy", "total")


class Trainer:
    """Owns the optimization loop; one Trainer per fit.

    Keeps a snapshot of the last finite state; a non-finite total loss
    restores it and raises NonFiniteValue.
    """

    def __init__(self, model: SceneModel, seq, tracks: TrackTable,
                 config: TrainConfig):
        self.model = model
        self.seq = seq
        self.config = config
        self.depth_in = aligned_depths(seq)
        self.track_uv = tracks.uv
        self.track_ok = tracks.visible & (tracks.confidence >= 0.5)
        self.use_tracks = config.ablate != "no-tracks"
        self.rng = np.random.default_rng(config.seed)
        self.history: list[dict] = []
        lr = {
            "dyn_mu0": config.lr_means, "sta_mu": config.lr_means,
            "dyn_quat": config.lr_rotation, "sta_quat": config.lr_rotation,
            "dyn_log_scale": config.lr_scale, "sta_log_scale": config.lr_scale,
            "dyn_opacity": config.lr_opacity, "sta_opacity": config.lr_opacity,
            "dyn_color": config.lr_color, "sta_color": config.lr_color,
            "bases_rot6d": config.lr_bases, "bases_transl": config.lr_bases,
            "coeff_logits": config.lr_coeffs,
        }
        self.opt = Adam(model.parameters(), lr)
        self._snapshot = self._take_snapshot()

    # -- state safety --------------------------------------------------

    def _take_snapshot(self) -> dict:
        return {"model": self.model.state_dict(),
                "opt": self.opt.state_dict(),
                "rng": self.rng.bit_generator.state,
                "n_hist": len(self.history)}

    def _restore_snapshot(self) -> None:
        snap = self._snapshot
        self.model.load_state_dict(snap["model"])
        self.opt.load_state_dict(snap["opt"])
        self.rng.bit_generator.state = snap["rng"]
        del self.history[snap["n_hist"]:]

    def resume_from(self, opt_state: dict, rng_state: dict,
                    history: list[dict]) -> None:
        """Adopt checkpointed optimizer/rng/history state; the model must
        already hold the checkpoint parameters."""
        self.opt.load_state_dict(opt_state)
        self.rng.bit_generator.state = rng_state
        self.history = [dict(r) for r in history]
        self._snapshot = self._take_snapshot()

    # -- graph pieces ----------------------------------------------------

    def _dyn_frame(self, tape, leaves, weights_var, R0_dyn, t: int):
        """Dynamic positions/orientations at frame t as Vars."""
        m = self.model
        if m.rot_frozen:
            B = m.n_bases
            rot_t = tape.const(np.tile(IDENTITY_6D, (B, 1)))
        else:
            rot_t = leaves["bases_rot6d"][:, t]
        tr_t = leaves["bases_transl"][:, t]
        if m.per_gaussian:
            R_blend = rot6d_to_matrix_var(rot_t)
            t_blend = tr_t
        else:
            R_blend, t_blend = blend_vars(weights_var, rot_t, tr_t)
        mu_t = ad.einsum("nij,nj->ni", R_blend, leaves["dyn_mu0"]) + t_blend
        R_t = ad.einsum("nij,njk->nik", R_blend, R0_dyn)
        return mu_t, R_t

    def _render(self, tape, cam, mu, R, scale, opac, color, dynflag,
                extra=None) -> Var:
        payload_extra = dynflag if extra is None else ad.concat(
            [dynflag, extra], axis=1)
        return render_graph(tape, cam, mu, R, scale, opac, color,
                            extra_payload=payload_extra)

    # -- one optimization step -------------------------------------------

    def step(self) -> dict:
        cfg, w, m = self.config, self.config.weights, self.model
        T = self.seq.n_frames
        rng = self.rng
        nq = min(cfg.query_batch, T)
        queries = rng.choice(T, size=nq, replace=False)
        targets = rng.choice(T, size=min(cfg.targets_per_query, T),
                             replace=False)
        nd = m.n_dynamic
        rig_pair = (int(queries[rng.integers(nq)]),
                    int(targets[rng.integers(len(targets))]))
        rig_centers = rng.choice(nd, size=min(cfg.rigidity_centers, nd),
                                 replace=False)
        smooth_idx = rng.choice(nd, size=min(cfg.smooth_samples, nd),
                                replace=False)

        tape = Tape()
        leaves = {p.name: tape.leaf(p) for p in m.parameters()}
        weights_var = (None if m.per_gaussian
                       else ad.softmax(leaves["coeff_logits"], axis=-1))
        R0_dyn = quat_to_matrix_var(leaves["dyn_quat"])
        R0_sta = quat_to_matrix_var(leaves["sta_quat"])
        dyn_scale = leaves["dyn_log_scale"].exp()
        sta_scale = leaves["sta_log_scale"].exp()
        dyn_op = leaves["dyn_opacity"].sigmoid()
        sta_op = leaves["sta_opacity"].sigmoid()
        dynflag = tape.const(np.concatenate(
            [np.ones((nd, 1)), np.zeros((m.n_static, 1))]))
        dynflag_only = tape.const(np.ones((nd, 1)))

        frames = sorted(set(queries.tolist()) | set(targets.tolist()))
        at = {f: self._dyn_frame(tape, leaves, weights_var, R0_dyn, f)
              for f in frames}

        def full_render(f: int) -> Var:
            mu_d, R_d = at[f]
            mu = ad.concat([mu_d, leaves["sta_mu"]], axis=0)
            R = ad.concat([R_d, R0_sta], axis=0)
            scale = ad.concat([dyn_scale, sta_scale], axis=0)
            op = ad.concat([dyn_op, sta_op], axis=0)
            color = ad.concat([leaves["dyn_color"], leaves["sta_color"]], axis=0)
            return self._render(tape, self.seq.cams[f], mu, R, scale, op,
                                color, dynflag)

        renders = {f: full_render(f) for f in frames}

        zero = tape.const(np.zeros(()))
        terms = {k: zero for k in ("image", "depth", "mask", "depthgrad",
                                   "track2d", "trackdepth")}
        for t in queries:
            rec = loss_recon(renders[t], self.seq.images[t], self.depth_in[t],
                             self.seq.masks[t], w)
            for k in ("image", "depth", "mask", "depthgrad"):
                terms[k] = terms[k] + rec[k]
        for k in ("image", "depth", "mask", "depthgrad"):
            terms[k] = terms[k] / float(nq)

        if self.use_tracks:
            n_pairs = 0
            for t in queries:
                rows = np.flatnonzero(self.track_ok[:, t]
                                      & self.track_ok[:, targets].any(axis=1))
                if rows.size == 0:
                    continue
                mu_d, R_d = at[t]
                payload = ad.concat([at[tp][0] for tp in targets], axis=1)
                track_out = self._render(tape, self.seq.cams[t], mu_d, R_d,
                                         dyn_scale, dyn_op,
                                         leaves["dyn_color"], dynflag_only,
                                         extra=payload)
                samples = ad.bilinear_sample(track_out, self.track_uv[rows, t])
                for j, tp in enumerate(targets):
                    sub = np.flatnonzero(self.track_ok[rows, tp])
                    if sub.size == 0:
                        continue
                    lo = CH_EXTRA + 3 * j
                    world = samples[:, lo:lo + 3].take(sub)
                    uv_obs = self.track_uv[rows[sub], tp]
                    dmap = renders[tp][:, :, CH_DEPTH:CH_DEPTH + 1]
                    depth_obs = ad.bilinear_sample(dmap, uv_obs)[:, 0]
                    t2d, tdep = loss_track(world, self.seq.cams[tp], uv_obs,
                                           depth_obs, w)
                    terms["track2d"] = terms["track2d"] + t2d
                    terms["trackdepth"] = terms["trackdepth"] + tdep
                    n_pairs += 1
            if n_pairs:
                terms["track2d"] = terms["track2d"] / float(n_pairs)
                terms["trackdepth"] = terms["trackdepth"] / float(n_pairs)

        # rigidity on one sampled frame pair
        t_r, tp_r = rig_pair
        mu_r = at[t_r][0]
        mu_rp = at[tp_r][0]
        knn = min(cfg.rigidity_knn, nd - 1)
        if knn >= 1:
            d2 = np.sum((mu_r.value[rig_centers, None]
                         - mu_r.value[None, :]) ** 2, axis=-1)
            d2[np.arange(rig_centers.size), rig_centers] = np.inf
            nbrs = np.argpartition(d2, knn - 1, axis=1)[:, :knn]
            rig = loss_rigidity(mu_r, mu_rp, rig_centers, nbrs, w.beta_rigidity)
        else:
            rig = zero
        terms["rigidity"] = w.lambda_rigidity * rig

        # smoothness: basis acceleration plus sampled camera-depth acceleration
        if m.per_gaussian:
            w_small = None
            rot_leaf = None if m.rot_frozen else leaves["bases_rot6d"]
            transl_leaf = leaves["bases_transl"]
        else:
            w_small = weights_var.take(smooth_idx)
            rot_leaf = None if m.rot_frozen else leaves["bases_rot6d"]
            transl_leaf = leaves["bases_transl"]
        zs = []
        mu0_small = leaves["dyn_mu0"].take(smooth_idx)
        for f in range(T):
            if m.per_gaussian:
                mu_f = at[f][0].take(smooth_idx) if f in at else None
                if mu_f is None:
                    rot_t = (tape.const(np.tile(IDENTITY_6D, (nd, 1)))
                             if m.rot_frozen else leaves["bases_rot6d"][:, f])
                    Rb = rot6d_to_matrix_var(rot_t.take(smooth_idx))
                    tb = leaves["bases_transl"][:, f].take(smooth_idx)
                    mu_f = ad.einsum("nij,nj->ni", Rb, mu0_small) + tb
            else:
                rot_t = (tape.const(np.tile(IDENTITY_6D, (m.n_bases, 1)))
                         if m.rot_frozen else leaves["bases_rot6d"][:, f])
                Rb, tb = blend_vars(w_small, rot_t, leaves["bases_transl"][:, f])
                mu_f = ad.einsum("nij,nj->ni", Rb, mu0_small) + tb
            cam = self.seq.cams[f]
            zf = (ad.einsum("ij,nj->ni", tape.const(cam.E.R), mu_f)
                  + tape.const(cam.E.t))[:, 2]
            zs.append(zf)
        z_samples = ad.stack(zs, axis=1)
        terms["smooth"] = w.lambda_smooth * loss_smooth(
            rot_leaf, transl_leaf, z_samples)
        terms["isotropy"] = w.lambda_isotropy * loss_isotropy(dyn_scale)

        total = zero
        for k in HISTORY_FIELDS[1:-1]:
            total = total + terms[k]

        if not np.isfinite(total.value):
            self._restore_snapshot()
            raise NonFiniteValue(f"non-finite loss at step {len(self.history)}")

        self.opt.zero_grad()
        tape.backward(total)
        # the canonical timestep stays pinned to the identity
        self.model.bases_rot6d.grad[:, self.model.t0] = 0.0
        self.model.bases_transl.grad[:, self.model.t0] = 0.0
        self.opt.step()
        self._project()

        row = {"step": len(self.history)}
        row.update({k: float(terms[k].value) for k in HISTORY_FIELDS[1:-1]})
        row["total"] = float(total.value)
        self.history.append(row)

        if len(self.history) % self.config.prune_every == 0:
            self.prune()
        self._snapshot = self._take_snapshot()
        return row

    def _project(self) -> None:
        m = self.model
        np.clip(m.dyn_color.value, 0.0, 1.0, out=m.dyn_color.value)
        np.clip(m.sta_color.value, 0.0, 1.0, out=m.sta_color.value)
        np.clip(m.dyn_log_scale.value, -12.0, 2.0, out=m.dyn_log_scale.value)
        np.clip(m.sta_log_scale.value, -12.0, 2.0, out=m.sta_log_scale.value)
        m.bases_rot6d.value[:, m.t0] = IDENTITY_6D
        m.bases_transl.value[:, m.t0] = 0.0

    def prune(self) -> None:
        """Drop Gaussians whose opacity fell below the threshold."""
        m, thr = self.model, self.config.prune_opacity

        def sig(x):
            return 1.0 / (1.0 + np.exp(-x))

        keep_d = sig(m.dyn_opacity.value) >= thr
        if keep_d.any() and not keep_d.all():
            rows = [m.dyn_mu0, m.dyn_quat, m.dyn_log_scale, m.dyn_opacity,
                    m.dyn_color]
            if m.coeff_logits is not None:
                rows.append(m.coeff_logits)
            if m.per_gaussian:
                rows.extend([m.bases_rot6d, m.bases_transl])
            for p in rows:
                p.value = p.value[keep_d]
                p.grad = np.zeros_like(p.value)
                self.opt.prune_rows(p.name, keep_d)
        keep_s = sig(m.sta_opacity.value) >= thr
        if keep_s.any() and not keep_s.all():
            for p in (m.sta_mu, m.sta_quat, m.sta_log_scale, m.sta_opacity,
                      m.sta_color):
                p.value = p.value[keep_s]
                p.grad = np.zeros_like(p.value)
                self.opt.prune_rows(p.name, keep_s)

    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.seq.n_frames / self.config.query_batch))

    def run(self, n_steps: int | None = None) -> list[dict]:
        if n_steps is None:
            n_steps = self.config.epochs * self.steps_per_epoch()
        for _ in range(n_steps):
            self.step()
        return self.history


def train(model: SceneModel, seq, tracks: TrackTable, config: TrainConfig
          ) -> list[dict]:
    """Run the full schedule on a model in place; returns the history."""
    return Trainer(model, seq, tracks, config).run()


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def read_history_csv(path) -> list[dict]:
    with open(path) as f:
        return [{k: (int(v) if k == "step" else float(v))
                 for k, v in row.items()}
                for row in csv.DictReader(f)]
