"""Rendered-trajectory prediction and whole-model metric reports.

Prediction samples the correspondence maps the same way training renders
them, but alpha-normalizes the payload (training keeps the raw composite;
normalization turns the expected-position map into a convex combination,
which is what a point estimate wants).  A query is valid where the
dynamic-only alpha at the query pixel reaches 0.5; a prediction is called
occluded at a target frame when the query was invalid, the reprojection
leaves the image or the near plane, the full-scene alpha at the landing
pixel misses 0.5 (nothing rendered there), or the reprojected depth
exceeds the coverage-normalized rendered depth by more than 5% relative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .errors import EmptyValidSet, ShapeMismatch
from .geometry import Z_NEAR, Camera
from .metrics import MetricReport, epe_3d, psnr, ssim, tapvid_metrics
from .motion import blend_batch, trajectories
from .splat import GaussianPoses, rasterize_frame, render_graph
from .training import SceneModel

OCCLUSION_DEPTH_TOL = 0.05
VALID_ALPHA = 0.5


@dataclass
class TrajectoryPrediction:
    """Model trajectories for P queried points over all T frames."""

    xyz: np.ndarray       # (P, T, 3) world positions (NaN where query invalid)
    uv: np.ndarray        # (P, T, 2) pixel positions per frame camera
    depth: np.ndarray     # (P, T) camera depth per frame
    occluded: np.ndarray  # (P, T) bool
    valid: np.ndarray     # (P,) alpha >= 0.5 at the query pixel


def _sample_map(m: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W) or (H, W, C) map with border clamp."""
    H, W = m.shape[:2]
    u = np.clip(uv[:, 0], 0.0, W - 1.0)
    v = np.clip(uv[:, 1], 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0).reshape(-1, *([1] * (m.ndim - 2)))
    fv = (v - v0).reshape(-1, *([1] * (m.ndim - 2)))
    top = m[v0, u0] * (1.0 - fu) + m[v0, u1] * fu
    bot = m[v1, u0] * (1.0 - fu) + m[v1, u1] * fu
    return top * (1.0 - fv) + bot * fv


def _model_poses(model: SceneModel, bases, weights, t: int) -> GaussianPoses:
    """World poses for the full canonical set at frame t (dynamic first)."""
    R_d, t_d = blend_batch(bases, weights, t)
    ns = model.n_static
    R = np.concatenate([R_d, np.broadcast_to(np.eye(3), (ns, 3, 3))])
    tr = np.concatenate([t_d, np.zeros((ns, 3))])
    return GaussianPoses(R, tr)


def render_view(model: SceneModel, cam: Camera, frame: int):
    """Full-scene render of the model at one frame from one camera."""
    bases, coeffs = model.motion()
    poses = _model_poses(model, bases, coeffs.weights(), frame)
    return rasterize_frame(model.gaussians(), poses, cam)


def predict_trajectories(model: SceneModel, cams: list[Camera],
                         query_uv: np.ndarray, query_t: np.ndarray
                         ) -> TrajectoryPrediction:
    """Trajectories of P query pixels through all frames.

    query_uv (P, 2) pixel positions, query_t (P,) frame indices.  Each
    query samples the dynamic-only correspondence maps rendered from its
    own frame; positions for every target frame composite in one pass.
    """
    query_uv = np.asarray(query_uv, dtype=np.float64)
    query_t = np.asarray(query_t)
    if query_uv.shape != (len(query_t), 2):
        raise ShapeMismatch("query_uv must be (P, 2) matching query_t")
    T = model.n_frames
    P = len(query_t)
    gs = model.gaussians()
    dyn = gs.is_dynamic
    nd = int(dyn.sum())
    bases, coeffs = model.motion()
    wts = coeffs.weights()
    traj = trajectories(gs.mu0[dyn], wts, bases)        # (nd, T, 3)

    xyz = np.full((P, T, 3), np.nan)
    uv = np.full((P, T, 2), np.nan)
    depth = np.full((P, T), np.nan)
    occluded = np.ones((P, T), dtype=bool)
    valid = np.zeros(P, dtype=bool)

    full = [rasterize_frame(gs, _model_poses(model, bases, wts, f), cams[f])
            for f in range(T)]

    for t in np.unique(query_t):
        rows = np.flatnonzero(query_t == t)
        cam_q = cams[int(t)]
        R_d, t_d = blend_batch(bases, wts, int(t))
        mu_q = np.einsum("nij,nj->ni", R_d, gs.mu0[dyn]) + t_d
        R_q = np.einsum("nij,njk->nik", R_d, gs.rotations()[dyn])
        tape = Tape()
        out = render_graph(
            tape, cam_q,
            tape.const(mu_q), tape.const(R_q),
            tape.const(gs.scale()[dyn]), tape.const(gs.opacity()[dyn]),
            tape.const(gs.color[dyn]),
            extra_payload=tape.const(traj.reshape(nd, 3 * T)),
        ).value
        samples = _sample_map(out, query_uv[rows])
        alpha = samples[:, -1]
        ok = alpha >= VALID_ALPHA
        valid[rows] = ok
        with np.errstate(divide="ignore", invalid="ignore"):
            pay = samples[:, 4:4 + 3 * T] / alpha[:, None]
        pay[~ok] = np.nan
        pos = pay.reshape(-1, T, 3)
        xyz[rows] = pos
        for f in range(T):
            cam_f = cams[f]
            Xc = pos[:, f] @ cam_f.E.R.T + cam_f.E.t
            z = Xc[:, 2]
            front = z > Z_NEAR
            with np.errstate(divide="ignore", invalid="ignore"):
                u = cam_f.fx * Xc[:, 0] / z + cam_f.cx
                v = cam_f.fy * Xc[:, 1] / z + cam_f.cy
            uvf = np.stack([u, v], axis=-1)
            uvf[~front] = np.nan
            uv[rows, f] = uvf
            depth[rows, f] = z
            inb = (front & (u >= 0) & (u <= cam_f.width - 1)
                   & (v >= 0) & (v <= cam_f.height - 1))
            seen = np.zeros(len(rows), dtype=bool)
            if inb.any():
                # expected depth given a hit: composite depth / coverage
                dref = _sample_map(full[f].depth, uvf[inb])
                aref = _sample_map(full[f].alpha, uvf[inb])
                hit = aref >= VALID_ALPHA
                dref = dref / np.where(hit, aref, 1.0)
                seen[inb] = hit & (z[inb] <= dref * (1.0 + OCCLUSION_DEPTH_TOL))
            occluded[rows, f] = ~(ok & seen)
    return TrajectoryPrediction(xyz=xyz, uv=uv, depth=depth,
                                occluded=occluded, valid=valid)


def project_points(cams: list[Camera], xyz: np.ndarray) -> np.ndarray:
    """Pinhole projection of (P, T, 3) world tracks: (P, T, 2) pixels."""
    P, T, _ = xyz.shape
    out = np.empty((P, T, 2))
    for t in range(T):
        cam = cams[t]
        Xc = xyz[:, t] @ cam.E.R.T + cam.E.t
        z = np.where(Xc[:, 2] > Z_NEAR, Xc[:, 2], np.nan)
        out[:, t, 0] = cam.fx * Xc[:, 0] / z + cam.cx
        out[:, t, 1] = cam.fy * Xc[:, 1] / z + cam.cy
    return out


def evaluate_model(model: SceneModel, seq, gt_xyz: np.ndarray,
                   gt_occluded: np.ndarray,
                   epe_thresholds: tuple = (0.05, 0.10)) -> MetricReport:
    """Score a fitted model against withheld trajectories and val views.

    Queries each track at its first ground-truth-visible frame.  EPE and
    the distance fractions are computed over entries that are gt-visible
    and have a valid query; TAP-Vid metrics score all gt-visible entries
    with prediction misses counting against the model.
    """
    gt_xyz = np.asarray(gt_xyz, dtype=np.float64)
    gt_occluded = np.asarray(gt_occluded, dtype=bool)
    P, T = gt_occluded.shape
    if gt_xyz.shape != (P, T, 3) or T != seq.n_frames:
        raise ShapeMismatch("ground truth does not match the sequence")
    vis = ~gt_occluded
    keep = vis.any(axis=1)
    if not keep.any():
        raise EmptyValidSet("no ground-truth-visible tracks")
    gt_xyz, gt_occluded, vis = gt_xyz[keep], gt_occluded[keep], vis[keep]

    gt_uv = project_points(seq.cams, gt_xyz)
    q_t = np.argmax(vis, axis=1)
    q_uv = gt_uv[np.arange(len(q_t)), q_t]
    pred = predict_trajectories(model, seq.cams, q_uv, q_t)

    ok = vis & pred.valid[:, None] & np.isfinite(pred.xyz).all(axis=-1)
    if not ok.any():
        raise EmptyValidSet("no valid prediction overlaps ground truth")
    epe, d5, d10 = epe_3d(np.where(ok[..., None], pred.xyz, 0.0), gt_xyz, ok,
                          epe_thresholds)
    W, H = seq.cams[0].width, seq.cams[0].height
    tap = tapvid_metrics(pred.uv, gt_uv, pred.occluded, gt_occluded, W, H)

    ps = ss = float("nan")
    if seq.val_images is not None and len(seq.val_cams):
        pvals, svals = [], []
        for i, cam in enumerate(seq.val_cams):
            ren = render_view(model, cam, int(seq.val_frames[i]))
            img = np.clip(ren.image, 0.0, 1.0)
            pvals.append(psnr(img, seq.val_images[i]))
            svals.append(ssim(img, seq.val_images[i]))
        ps, ss = float(np.mean(pvals)), float(np.mean(svals))

    return MetricReport(
        epe=epe, delta_5cm=d5, delta_10cm=d10,
        aj=tap["aj"], delta_avg=tap["delta_avg"], oa=tap["oa"],
        psnr=ps, ssim=ss,
        per_threshold={"delta": tap["delta_per_threshold"],
                       "jaccard": tap["jaccard_per_threshold"]},
    )
