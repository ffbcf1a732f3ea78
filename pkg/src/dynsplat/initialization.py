"""Initialization pipeline: from 2D tracks and monocular depth to a first
estimate of the motion bases, blend coefficients and canonical means.

Stages, in pipeline order:

  1. align_depth      per-frame affine (scale, shift) fit of relative depth
                      against sparse metric reference samples
  2. lift_tracks      2D tracks + aligned depth -> 3D track table
  3. select_canonical_frame
  4. cluster_velocities   k-means on per-step 3D displacement features
  5. weighted_procrustes / init_bases   per-cluster rigid motion recovery
  6. sample_canonical_means / cluster_centers / init_coeffs
  7. prefit           first-pass optimization of means, coefficients and
                      bases against the lifted 3D tracks only

The prefit minimizes an l1 trajectory error plus an l2 acceleration
regularizer on the basis sequences, with Adam learning rates decayed
exponentially to a tenth of their initial values over the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .errors import (DegenerateConfiguration, DegenerateSamples, EmptyValidSet,
                     ShapeMismatch)
from .geometry import Camera, RigidTransform, Z_NEAR, matrix_to_rot6d, unproject_points
from .imageops import bilinear_sample_array, in_bounds
from .motion import MotionBases, MotionCoeffs, blend_vars
from .optim import Adam


@dataclass
class TrackTable:
    """P tracks over T frames.

    uv: (P, T, 2) pixel positions (NaN where invisible)
    visible: (P, T) bool
    confidence: (P, T) in [0, 1] (0 where invisible)
    xyz: (P, T, 3) world positions, NaN until lift_tracks fills them
    """

    uv: np.ndarray
    visible: np.ndarray
    confidence: np.ndarray
    xyz: np.ndarray | None = None

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        P, T = self.visible.shape
        if self.uv.shape != (P, T, 2) or self.confidence.shape != (P, T):
            raise ShapeMismatch("TrackTable: inconsistent field shapes")
        if self.xyz is not None:
            self.xyz = np.asarray(self.xyz, dtype=np.float64)
            if self.xyz.shape != (P, T, 3):
                raise ShapeMismatch("TrackTable: xyz must be (P, T, 3)")

    @property
    def n_tracks(self) -> int:
        return self.visible.shape[0]

    @property
    def n_frames(self) -> int:
        return self.visible.shape[1]

    def subset(self, idx) -> "TrackTable":
        return TrackTable(self.uv[idx], self.visible[idx], self.confidence[idx],
                          None if self.xyz is None else self.xyz[idx])


@dataclass
class DepthAlignment:
    """Per-frame affine map: metric = scale * relative + shift."""

    scale: float
    shift: float

    def apply(self, rel_depth: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(rel_depth, dtype=np.float64) + self.shift


def align_depth(rel_depth: np.ndarray, ref_samples: np.ndarray
                ) -> tuple[DepthAlignment, float]:
    """Least-squares affine alignment of a relative depth map.

    ref_samples is (K, 3): columns (u, v, metric_depth).  Solves the 2x2
    normal equations for (scale, shift) minimizing
    sum (scale * rel(u, v) + shift - metric)^2 and returns the alignment
    plus the residual RMS.  Raises DegenerateSamples when K < 2, when the
    normal-equation matrix has condition number > 1e12 (e.g. constant
    relative depth), or when the fitted scale is not positive.
    """
    ref = np.asarray(ref_samples, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] != 3:
        raise ShapeMismatch("ref_samples must be (K, 3): u, v, metric depth")
    if ref.shape[0] < 2:
        raise DegenerateSamples(f"need at least 2 samples, got {ref.shape[0]}")
    r = bilinear_sample_array(rel_depth, ref[:, :2])
    d = ref[:, 2]
    A = np.array([[np.sum(r * r), np.sum(r)],
                  [np.sum(r), float(r.size)]])
    if np.linalg.cond(A) > 1e12:
        raise DegenerateSamples("normal equations are singular (constant depth?)")
    b = np.array([np.sum(r * d), np.sum(d)])
    scale, shift = np.linalg.solve(A, b)
    if scale <= 0:
        raise DegenerateSamples(f"fitted scale {scale:.3g} is not positive")
    rms = float(np.sqrt(np.mean((scale * r + shift - d) ** 2)))
    return DepthAlignment(float(scale), float(shift)), rms


def lift_tracks(tracks: TrackTable, depths: np.ndarray, cams: list[Camera]
                ) -> TrackTable:
    """Fill the xyz column by unprojecting each visible track point through
    the (already aligned, metric) per-frame depth maps.

    depths is (T, H, W).  Points that fall outside the image or sample a
    depth <= Z_NEAR are marked invisible in the returned table.
    """
    P, T = tracks.visible.shape
    depths = np.asarray(depths, dtype=np.float64)
    if depths.shape[0] != T or len(cams) != T:
        raise ShapeMismatch("depths/cams length must match track frames")
    H, W = depths.shape[1:]
    xyz = np.full((P, T, 3), np.nan)
    visible = tracks.visible.copy()
    confidence = tracks.confidence.copy()
    for t in range(T):
        vis = np.flatnonzero(visible[:, t])
        if vis.size == 0:
            continue
        uv = tracks.uv[vis, t]
        ok = in_bounds(uv, W, H)
        d = np.full(vis.size, -1.0)
        d[ok] = bilinear_sample_array(depths[t], uv[ok])
        good = ok & (d > Z_NEAR)
        xyz[vis[good], t] = unproject_points(cams[t], uv[good], d[good])
        bad = vis[~good]
        visible[bad, t] = False
        confidence[bad, t] = 0.0
    return TrackTable(tracks.uv, visible, confidence, xyz)


def select_canonical_frame(tracks: TrackTable) -> int:
    """Frame with the most visible tracks; ties go to the earliest frame."""
    counts = tracks.visible.sum(axis=0)
    return int(np.argmax(counts))


# ---------------------------------------------------------------------
# velocity clustering
# ---------------------------------------------------------------------


def _displacement_features(tracks: TrackTable) -> np.ndarray:
    """Per-track feature vector: the 3(T-1) concatenated step displacements.

    A step is valid when the track is visible at both endpoints; invalid
    steps start as zero and are then replaced by the per-dimension mean of
    the valid entries (mean imputation).
    """
    if tracks.xyz is None:
        raise EmptyValidSet("tracks must be lifted to 3D before clustering")
    P, T = tracks.visible.shape
    disp = tracks.xyz[:, 1:] - tracks.xyz[:, :-1]            # (P, T-1, 3)
    valid = tracks.visible[:, 1:] & tracks.visible[:, :-1]   # (P, T-1)
    disp = np.where(valid[..., None], disp, 0.0)
    feats = disp.reshape(P, -1)
    vmask = np.repeat(valid, 3, axis=1)
    col_count = vmask.sum(axis=0)
    col_sum = (feats * vmask).sum(axis=0)
    col_mean = np.divide(col_sum, col_count, out=np.zeros_like(col_sum),
                         where=col_count > 0)
    return np.where(vmask, feats, col_mean)


def _kmeans_pp_seed(feats: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = feats.shape[0]
    centers = np.empty((k, feats.shape[1]))
    centers[0] = feats[rng.integers(n)]
    d2 = np.sum((feats - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = feats[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = feats[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((feats - centers[j]) ** 2, axis=1))
    return centers


def cluster_velocities(tracks: TrackTable, n_clusters: int, seed: int = 0,
                       max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd's k-means (k-means++ seeding, fixed seed) on displacement
    features.  Returns integer labels (P,).  Empty clusters are re-seeded to
    the point farthest from its assigned center."""
    feats = _displacement_features(tracks)
    P = feats.shape[0]
    if n_clusters < 1 or n_clusters > P:
        raise DegenerateConfiguration(
            f"cannot form {n_clusters} clusters from {P} tracks")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seed(feats, n_clusters, rng)
    labels = np.zeros(P, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((feats[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(n_clusters):
            members = labels == j
            if members.any():
                new_centers[j] = feats[members].mean(axis=0)
            else:
                far = np.argmax(d2[np.arange(P), labels])
                new_centers[j] = feats[far]
                labels[far] = j
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    return labels


# ---------------------------------------------------------------------
# rigid motion recovery
# ---------------------------------------------------------------------


def weighted_procrustes(src: np.ndarray, dst: np.ndarray, weights: np.ndarray
                        ) -> RigidTransform:
    """Weighted rigid alignment: find (R, t) minimizing
    sum_i w_i ||R src_i + t - dst_i||^2.

    Zero-weight rows are ignored exactly (their coordinates may be NaN).
    Raises DegenerateConfiguration with fewer than 3 positive-weight points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch("src/dst must both be (M, 3)")
    if w.shape != (src.shape[0],):
        raise ShapeMismatch("weights must be (M,)")
    active = w > 0
    if active.sum() < 3:
        raise DegenerateConfiguration(
            f"need >= 3 positive-weight correspondences, got {int(active.sum())}")
    src, dst, w = src[active], dst[active], w[active]
    wn = w / w.sum()
    cs = wn @ src
    cd = wn @ dst
    X = src - cs
    Y = dst - cd
    Hm = (X * wn[:, None]).T @ Y
    U, _, Vt = np.linalg.svd(Hm)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def init_bases(tracks: TrackTable, labels: np.ndarray, t0: int) -> MotionBases:
    """Per-cluster rigid motion from the canonical frame to every frame.

    For each cluster and frame, runs weighted Procrustes over the members
    co-visible at t0 and that frame, weighted by the product of the two
    confidences.  Frames without 3 co-visible members are filled by linear
    interpolation of the raw 6D rotation and the translation between the
    nearest solved frames (clamped at the ends).
    """
    if tracks.xyz is None:
        raise EmptyValidSet("tracks must be lifted to 3D before init_bases")
    labels = np.asarray(labels)
    B = int(labels.max()) + 1
    T = tracks.n_frames
    rot6d = np.zeros((B, T, 6))
    transl = np.zeros((B, T, 3))
    for b in range(B):
        members = np.flatnonzero(labels == b)
        solved = np.zeros(T, dtype=bool)
        for t in range(T):
            co = members[tracks.visible[members, t0] & tracks.visible[members, t]]
            if co.size < 3:
                continue
            w = tracks.confidence[co, t0] * tracks.confidence[co, t]
            if (w > 0).sum() < 3:
                continue
            Tr = weighted_procrustes(tracks.xyz[co, t0], tracks.xyz[co, t], w)
            rot6d[b, t] = matrix_to_rot6d(Tr.R)
            transl[b, t] = Tr.t
            solved[t] = True
        if not solved.any():
            raise DegenerateConfiguration(
                f"cluster {b} has no frame with 3 points co-visible with t0")
        good = np.flatnonzero(solved)
        for t in np.flatnonzero(~solved):
            lo = good[good < t]
            hi = good[good > t]
            if lo.size and hi.size:
                a, c = lo[-1], hi[0]
                f = (t - a) / (c - a)
                rot6d[b, t] = (1 - f) * rot6d[b, a] + f * rot6d[b, c]
                transl[b, t] = (1 - f) * transl[b, a] + f * transl[b, c]
            else:
                near = lo[-1] if lo.size else hi[0]
                rot6d[b, t] = rot6d[b, near]
                transl[b, t] = transl[b, near]
    bases = MotionBases(rot6d, transl, t0)
    bases.pin_canonical()
    return bases


def canonical_positions(tracks: TrackTable, labels: np.ndarray,
                        bases: MotionBases) -> tuple[np.ndarray, np.ndarray]:
    """Each track's 3D position expressed in the canonical frame.

    Tracks visible at t0 use their lifted position there; others take their
    first visible frame mapped back through their cluster's initialized
    transform.  Returns ((P, 3) positions, (P,) usable mask).
    """
    if tracks.xyz is None:
        raise EmptyValidSet("tracks must be lifted to 3D first")
    P, T = tracks.visible.shape
    t0 = bases.t0
    pos = np.full((P, 3), np.nan)
    ok = np.zeros(P, dtype=bool)
    at_t0 = tracks.visible[:, t0]
    pos[at_t0] = tracks.xyz[at_t0, t0]
    ok[at_t0] = True
    for p in np.flatnonzero(~at_t0):
        vis = np.flatnonzero(tracks.visible[p])
        if vis.size == 0:
            continue
        tau = int(vis[0])
        Tr = bases.basis_transform(int(labels[p]), tau)
        pos[p] = Tr.inverse().apply(tracks.xyz[p, tau])
        ok[p] = True
    return pos, ok


def cluster_centers(tracks: TrackTable, labels: np.ndarray, bases: MotionBases
                    ) -> np.ndarray:
    """Mean canonical-frame position of each cluster's usable tracks: (B, 3)."""
    pos, ok = canonical_positions(tracks, labels, bases)
    labels = np.asarray(labels)
    B = int(labels.max()) + 1
    centers = np.zeros((B, 3))
    for b in range(B):
        members = ok & (labels == b)
        if not members.any():
            raise DegenerateConfiguration(f"cluster {b} has no usable track")
        centers[b] = pos[members].mean(axis=0)
    return centers


def sample_canonical_means(tracks: TrackTable, labels: np.ndarray,
                           bases: MotionBases, n: int, rng: np.random.Generator
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Randomly sample n canonical means from the tracks' canonical positions.

    Samples without replacement when possible, with replacement when n
    exceeds the number of usable tracks.  Returns (mu0 (n, 3), track_idx (n,)).
    """
    pos, ok = canonical_positions(tracks, labels, bases)
    usable = np.flatnonzero(ok)
    if usable.size == 0:
        raise EmptyValidSet("no track has a usable canonical position")
    idx = rng.choice(usable, size=n, replace=n > usable.size)
    return pos[idx], idx


def init_coeffs(mu0: np.ndarray, centers: np.ndarray) -> MotionCoeffs:
    """Distance-based seeding of the blend-coefficient logits.

    logits[i, b] = -||mu0_i - center_b|| / sigma, with sigma the median
    pairwise distance between cluster centers (1.0 for a single center).
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    B = centers.shape[0]
    if B > 1:
        iu = np.triu_indices(B, k=1)
        pairwise = np.linalg.norm(centers[iu[0]] - centers[iu[1]], axis=1)
        sigma = float(np.median(pairwise))
        if sigma <= 0:
            sigma = 1.0
    else:
        sigma = 1.0
    dist = np.linalg.norm(mu0[:, None, :] - centers[None], axis=2)
    return MotionCoeffs(-dist / sigma)


# ---------------------------------------------------------------------
# prefit
# ---------------------------------------------------------------------


@dataclass
class PrefitConfig:
    steps: int = 1000
    lr_means: float = 1e-3
    lr_coeffs: float = 1e-2
    lr_bases: float = 1e-2
    lr_decay: float = 0.1          # final lr = lr_decay * initial lr
    smooth_weight: float = 0.1     # l2 acceleration on basis sequences


def prefit(mu0: np.ndarray, coeffs: MotionCoeffs, bases: MotionBases,
           tracks: TrackTable, config: PrefitConfig | None = None
           ) -> tuple[np.ndarray, MotionCoeffs, MotionBases, list[float]]:
    """First-pass trajectory fit against the lifted 3D tracks.

    Row i of mu0/coeffs corresponds to row i of tracks (the sampled subset).
    Minimizes the mean l1 error between predicted and observed positions
    over visible entries, plus an l2 acceleration penalty on the basis
    rotation and translation sequences.  The canonical timestep stays
    pinned to the identity throughout.  Returns refined copies and the
    per-step loss history.
    """
    if config is None:
        config = PrefitConfig()
    if tracks.xyz is None:
        raise EmptyValidSet("tracks must be lifted to 3D before prefit")
    N = mu0.shape[0]
    if tracks.n_tracks != N or coeffs.n != N:
        raise ShapeMismatch("mu0, coeffs and tracks must align row-for-row")
    T = tracks.n_frames
    t0 = bases.t0

    p_mu = Parameter(mu0, "prefit_mu0")
    p_logit = Parameter(coeffs.logits, "prefit_logits")
    p_rot = Parameter(bases.rot6d, "prefit_rot")
    p_tr = Parameter(bases.transl, "prefit_transl")
    params = [p_mu, p_logit, p_rot, p_tr]
    opt = Adam(params, lrs={"prefit_mu0": config.lr_means,
                            "prefit_logits": config.lr_coeffs,
                            "prefit_rot": config.lr_bases,
                            "prefit_transl": config.lr_bases})

    target = np.where(tracks.visible[..., None], np.nan_to_num(tracks.xyz), 0.0)
    mask = tracks.visible[..., None].astype(np.float64) * np.ones(3)
    count = mask.sum()
    if count == 0:
        raise EmptyValidSet("no visible track entries to fit")

    history: list[float] = []
    for step in range(config.steps):
        tape = Tape()
        w = ad.softmax(tape.leaf(p_logit), axis=-1)
        rot = tape.leaf(p_rot)
        tr = tape.leaf(p_tr)
        mu = tape.leaf(p_mu)
        preds = []
        for t in range(T):
            Rb, tb = blend_vars(w, rot[:, t, :], tr[:, t, :])
            preds.append(ad.einsum("nij,nj->ni", Rb, mu) + tb)
        pred = ad.stack(preds, axis=1)  # (N, T, 3)
        data = ((pred - target).abs() * mask).sum() / count

        acc_r = rot[:, 2:, :] - 2.0 * rot[:, 1:-1, :] + rot[:, :-2, :]
        acc_t = tr[:, 2:, :] - 2.0 * tr[:, 1:-1, :] + tr[:, :-2, :]
        smooth = acc_r.square().mean() + acc_t.square().mean()
        loss = data + config.smooth_weight * smooth

        opt.zero_grad()
        tape.backward(loss)
        # keep the canonical frame pinned: no update flows into the t0 slice
        p_rot.grad[:, t0, :] = 0.0
        p_tr.grad[:, t0, :] = 0.0
        scale = config.lr_decay ** (step / max(config.steps - 1, 1))
        opt.step(lr_scale=scale)
        history.append(float(loss.value))

    out_bases = MotionBases(p_rot.value.copy(), p_tr.value.copy(), t0)
    out_bases.pin_canonical()
    return p_mu.value.copy(), MotionCoeffs(p_logit.value.copy()), out_bases, history
