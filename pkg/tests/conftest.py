import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynsplat.geometry import Camera, RigidTransform, make_camera
from dynsplat.splat import GaussianSet


def look_at_camera(position, target, fx, fy, width, height) -> Camera:
    """World-to-camera extrinsics for a camera at `position` looking at
    `target`, image v axis pointing down."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    zc = target - position
    zc = zc / np.linalg.norm(zc)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, zc)) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    xc = np.cross(zc, up)
    xc = xc / np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    R = np.stack([xc, yc, zc])
    return make_camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                       RigidTransform(R, -R @ position), width, height)


def random_camera(rng, width, height, dist_range=(2.0, 4.0)) -> Camera:
    """Camera on a random viewpoint aimed at the origin."""
    d = rng.uniform(*dist_range)
    theta = rng.uniform(0, 2 * np.pi)
    phi = rng.uniform(-0.5, 0.5)
    pos = d * np.array([np.cos(phi) * np.sin(theta), np.sin(phi),
                        np.cos(phi) * np.cos(theta)])
    f = rng.uniform(0.8, 1.3) * width
    return look_at_camera(pos, np.zeros(3), f, f * rng.uniform(0.95, 1.05),
                          width, height)


def random_gaussians(rng, n, radius=0.7, scale_range=(0.05, 0.3),
                     opacity_logit_range=(-1.0, 3.0), dynamic=True) -> GaussianSet:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        mu0=rng.uniform(-radius, radius, size=(n, 3)),
        quat=q,
        log_scale=np.log(rng.uniform(*scale_range, size=(n, 3))),
        opacity_logit=rng.uniform(*opacity_logit_range, size=n),
        color=rng.uniform(0.0, 1.0, size=(n, 3)),
        is_dynamic=np.full(n, dynamic, dtype=bool),
    )


def gt_scene_model(gt, T, B=None):
    """SceneModel holding a generated scene's true Gaussians and motion.

    Bases copy the generator's per-cluster transforms (identity rows when
    B is None, for static scenes); coefficients are near-one-hot logits
    from the true cluster labels.
    """
    from dynsplat.autodiff import Parameter
    from dynsplat.motion import IDENTITY_6D
    from dynsplat.training import SceneModel

    g = gt.gaussians
    dyn = g.is_dynamic
    nd = int(dyn.sum())
    if B is None:
        B = 1
        rot = np.tile(IDENTITY_6D, (B, T, 1))
        tr = np.zeros((B, T, 3))
        logits = np.zeros((nd, B))
    else:
        # 6D encoding stores the first two *columns* of R
        rot = gt.cluster_R[:B].swapaxes(-1, -2)[:, :, :2, :].reshape(B, T, 6)
        tr = gt.cluster_t[:B].copy()
        labels = gt.gauss_cluster[dyn]
        logits = np.where(labels[:, None] == np.arange(B)[None, :],
                          60.0, -60.0)
    return SceneModel(
        dyn_mu0=Parameter(g.mu0[dyn].copy(), "dyn_mu0"),
        dyn_quat=Parameter(g.quat[dyn].copy(), "dyn_quat"),
        dyn_log_scale=Parameter(g.log_scale[dyn].copy(), "dyn_log_scale"),
        dyn_opacity=Parameter(g.opacity_logit[dyn].copy(), "dyn_opacity"),
        dyn_color=Parameter(g.color[dyn].copy(), "dyn_color"),
        coeff_logits=Parameter(logits, "coeff_logits"),
        bases_rot6d=Parameter(rot, "bases_rot6d"),
        bases_transl=Parameter(tr, "bases_transl"),
        sta_mu=Parameter(g.mu0[~dyn].copy(), "sta_mu"),
        sta_quat=Parameter(g.quat[~dyn].copy(), "sta_quat"),
        sta_log_scale=Parameter(g.log_scale[~dyn].copy(), "sta_log_scale"),
        sta_opacity=Parameter(g.opacity_logit[~dyn].copy(), "sta_opacity"),
        sta_color=Parameter(g.color[~dyn].copy(), "sta_color"),
        t0=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
