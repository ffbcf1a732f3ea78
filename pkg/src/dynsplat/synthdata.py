"""Synthetic rigid-cluster scenes with exact ground truth.

A scene is a set of planar disk "boards", each carrying a rigid cluster of
tracked points, moving in front of a static backdrop plane.  Everything
downstream of the generator is analytic:

  * depth maps come from ray/plane intersection, not from splatting, so a
    tracked point lifted through its own depth pixel reproduces its true
    3D position to float precision (the splatted depth would carry the
    1 - alpha_max bias and break that);
  * occlusion flags compare the point's own board against the nearest
    surface hit along its viewing ray;
  * track confidence encodes the injected pixel noise, exp(-|noise|).

Images are rendered by splatting a ground-truth Gaussian per surface
point, so the photometric channel is exactly representable by the model
being fitted.  Observed depth is relative: the true map is warped by a
per-frame affine (a_t, b_t) the generator reports only through sparse
metric reference samples.

The same seed always regenerates the same scene, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import Sequence
from .errors import InvalidSpec
from .geometry import Camera, RigidTransform, Z_NEAR, make_camera, project_points
from .initialization import TrackTable
from .splat import GaussianPoses, GaussianSet, rasterize_frame

MOTION_KINDS = ("constant_velocity", "sinusoid", "spin")
CAMERA_PATHS = ("static", "linear", "orbit")

OCCLUSION_MARGIN = 0.01


@dataclass
class SceneSpec:
    """Everything needed to regenerate a scene deterministically."""

    n_frames: int = 12
    width: int = 48
    height: int = 48
    n_clusters: int = 2
    points_per_cluster: int = 60
    camera_path: str = "static"
    cluster_motions: tuple = ("constant_velocity", "spin")
    track_noise_px: float = 0.0
    depth_noise_frac: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    n_val_views: int = 0
    ref_points_per_frame: int = 64
    board_radius: float = 0.42
    board_tilt_deg: float = 0.0
    motion_scale: float = 0.5
    spin_total_deg: float = 110.0
    cam_distance: float = 3.2
    orbit_deg: float = 25.0
    focal_px: float = 0.0          # 0 -> defaults to image width
    backdrop_z: float = 1.6
    backdrop_grid: int = 40
    backdrop_extent: float = 3.5
    point_sigma_factor: float = 1.3
    opacity_logit: float = 7.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise InvalidSpec("need at least 2 frames")
        if self.n_clusters < 1:
            raise InvalidSpec("need at least 1 cluster")
        if self.points_per_cluster < 4:
            raise InvalidSpec("need at least 4 points per cluster")
        if self.camera_path not in CAMERA_PATHS:
            raise InvalidSpec(f"unknown camera path {self.camera_path!r}")
        for kind in self.cluster_motions:
            if kind not in MOTION_KINDS:
                raise InvalidSpec(f"unknown motion kind {kind!r}")
        if min(self.track_noise_px, self.depth_noise_frac, self.dropout) < 0:
            raise InvalidSpec("noise levels must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout must lie in [0, 1)")
        if self.width < 8 or self.height < 8:
            raise InvalidSpec("image too small")


@dataclass
class GroundTruth:
    """Withheld state for evaluation and invariant tests."""

    xyz: np.ndarray                 # (P, T, 3) true point trajectories
    cluster: np.ndarray             # (P,) cluster id per track
    occluded: np.ndarray            # (P, T) bool, true visibility complement
    cluster_R: np.ndarray           # (B, T, 3, 3) frame-0-relative rotations
    cluster_t: np.ndarray           # (B, T, 3)
    depth_scale: np.ndarray         # (T,) a_t: metric = a_t * rel + b_t
    depth_shift: np.ndarray         # (T,) b_t
    depths_true: np.ndarray         # (T, H, W) metric analytic depth
    gaussians: GaussianSet          # true render model
    gauss_cluster: np.ndarray       # (N,) cluster id per gaussian, -1 static
    board_centers: np.ndarray       # (B, 3) at frame 0
    board_normals: np.ndarray       # (B, 3) at frame 0
    board_radii: np.ndarray         # (B,)
    backdrop_z: float


# ---------------------------------------------------------------------
# primitive helpers
# ---------------------------------------------------------------------


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _look_at(position, target, fx, fy, width, height) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])     # y points down in pixels
    right = np.cross(up, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)   # world <- camera
    R = R_wc.T
    t = -R @ position
    return make_camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                       RigidTransform(R, t), width, height)


def _cameras(spec: SceneSpec, rng: np.random.Generator):
    fx = spec.focal_px if spec.focal_px > 0 else float(spec.width)
    d = spec.cam_distance
    T = spec.n_frames

    def place(az, elev, frac):
        pos = np.array([d * np.sin(az), 0.12 + 0.3 * elev, -d * np.cos(az)])
        if spec.camera_path == "linear":
            pos = pos + np.array([-0.5 + frac, 0.15 * frac, 0.0])
        return _look_at(pos, [0.0, 0.0, 0.0], fx, fx, spec.width, spec.height)

    cams, vals = [], []
    if spec.camera_path == "static":
        azs = np.zeros(T)
    elif spec.camera_path == "linear":
        azs = np.zeros(T)
    else:
        half = np.deg2rad(spec.orbit_deg)
        azs = np.linspace(-half, half, T)
    for t in range(T):
        frac = t / max(T - 1, 1)
        elev = np.sin(2.0 * np.pi * frac) * 0.3 if spec.camera_path == "orbit" else 0.0
        cams.append(place(azs[t], elev, frac))
    val_frames = np.array([], dtype=int)
    if spec.n_val_views > 0:
        val_frames = np.unique(np.round(
            np.linspace(0, T - 1, spec.n_val_views)).astype(int))
        for k, tf in enumerate(val_frames):
            off = np.deg2rad(6.0 + 3.0 * (k % 2))
            vals.append(place(azs[tf] + off, 0.5, tf / max(T - 1, 1)))
    return cams, vals, val_frames


def _boards(spec: SceneSpec, rng: np.random.Generator):
    B = spec.n_clusters
    centers = np.zeros((B, 3))
    normals = np.zeros((B, 3))
    frames_u = np.zeros((B, 3))
    frames_v = np.zeros((B, 3))
    ring = max(0.65, 1.05 * spec.board_radius * B / np.pi)
    for b in range(B):
        ang = 2.0 * np.pi * b / B + rng.uniform(-0.15, 0.15)
        centers[b] = [ring * np.cos(ang), 0.75 * ring * np.sin(ang),
                      rng.uniform(-0.15, 0.15)]
        n = np.array([0.0, 0.0, 1.0])
        tilt = np.deg2rad(spec.board_tilt_deg)
        if tilt > 0:
            ax = rng.normal(size=3)
            ax[2] = 0.0
            if np.linalg.norm(ax) < 1e-9:
                ax = np.array([1.0, 0.0, 0.0])
            n = _axis_angle(ax, rng.uniform(0.3, 1.0) * tilt) @ n
        normals[b] = n
        u = np.cross(n, [0.0, 1.0, 0.0])
        u = u / np.linalg.norm(u)
        frames_u[b] = u
        frames_v[b] = np.cross(n, u)
    return centers, normals, frames_u, frames_v


def _motions(spec: SceneSpec, rng: np.random.Generator, centers, normals):
    """Frame-0-relative rigid transform per cluster per frame."""
    B, T = spec.n_clusters, spec.n_frames
    R = np.tile(np.eye(3), (B, T, 1, 1))
    t = np.zeros((B, T, 3))
    phase = np.linspace(0.0, 1.0, T)
    for b in range(B):
        kind = spec.cluster_motions[b % len(spec.cluster_motions)]
        if kind == "constant_velocity":
            direction = rng.normal(size=3)
            direction[2] *= 0.4
            direction = direction / np.linalg.norm(direction)
            vel = spec.motion_scale * direction
            t[b] = phase[:, None] * vel[None, :]
        elif kind == "sinusoid":
            direction = rng.normal(size=3)
            direction[2] *= 0.4
            direction = direction / np.linalg.norm(direction)
            cycles = rng.uniform(0.8, 1.6)
            amp = 0.5 * spec.motion_scale
            t[b] = amp * np.sin(2.0 * np.pi * cycles * phase)[:, None] * direction
        else:   # spin about the board normal through its center
            total = np.deg2rad(spec.spin_total_deg) * rng.choice([-1.0, 1.0])
            for k in range(T):
                Rk = _axis_angle(normals[b], total * phase[k])
                R[b, k] = Rk
                t[b, k] = centers[b] - Rk @ centers[b]
    return R, t


# ---------------------------------------------------------------------
# analytic depth
# ---------------------------------------------------------------------


def _ray_grid(cam: Camera):
    """Per-pixel world-space ray (origin, direction with unit camera depth)."""
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - cam.K[0, 2]) / cam.K[0, 0],
                      (vv - cam.K[1, 2]) / cam.K[1, 1],
                      np.ones_like(uu)], axis=-1)
    dirs = d_cam @ cam.E.R          # (H, W, 3) rows: R^T d
    origin = cam.E.inverse().t
    return origin, dirs


def _ray_surface(origin, dirs, planes):
    """Nearest surface along each ray.

    planes: list of (normal, point, radius_or_none, surf_id).  Returns
    (depth, surf_id) with surf_id -1 where only the backdrop is hit and
    -2 where nothing is (depth fixed at 100).
    """
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    sid = np.full(shape, -2, dtype=np.int64)
    for n, q, radius, surf in planes:
        denom = dirs @ n
        numer = (q - origin) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = numer / denom
        hit = np.isfinite(s) & (s > Z_NEAR)
        if radius is not None:
            x = origin + s[..., None] * dirs
            hit &= np.linalg.norm(x - q, axis=-1) <= radius
        take = hit & (s < best)
        best[take] = s[take]
        sid[take] = surf
    missed = ~np.isfinite(best)
    best[missed] = 100.0
    return best, sid


def _planes_at(centers, normals, radii, cluster_R, cluster_t, t, backdrop_z):
    planes = []
    for b in range(centers.shape[0]):
        Rb, tb = cluster_R[b, t], cluster_t[b, t]
        planes.append((Rb @ normals[b], Rb @ centers[b] + tb, radii[b], b))
    planes.append((np.array([0.0, 0.0, 1.0]),
                   np.array([0.0, 0.0, backdrop_z]), None, -1))
    return planes


def analytic_depth(cam: Camera, planes) -> tuple[np.ndarray, np.ndarray]:
    """(H, W) metric depth and surface-id maps by ray casting."""
    origin, dirs = _ray_grid(cam)
    return _ray_surface(origin, dirs, planes)


def surface_at(cam: Camera, planes, uv: np.ndarray):
    """Depth and surface id along the rays through subpixel coords uv (P, 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[:, 0] - cam.K[0, 2]) / cam.K[0, 0],
                      (uv[:, 1] - cam.K[1, 2]) / cam.K[1, 1],
                      np.ones(uv.shape[0])], axis=-1)
    dirs = d_cam @ cam.E.R
    origin = cam.E.inverse().t
    return _ray_surface(origin, dirs, planes)


def occlusion_flags(xyz: np.ndarray, cams: list, depths: np.ndarray,
                    margin: float = OCCLUSION_MARGIN) -> np.ndarray:
    """Flag (P, T) points whose camera depth exceeds the depth map.

    A point is occluded at t when it projects out of bounds, lies behind
    the camera, or its depth exceeds the bilinearly sampled map value by
    more than `margin` relative.  Works on any (T, H, W) metric depth.
    """
    from .imageops import bilinear_sample_array, in_bounds

    xyz = np.asarray(xyz, dtype=np.float64)
    P, T = xyz.shape[0], xyz.shape[1]
    occ = np.ones((P, T), dtype=bool)
    for t in range(T):
        cam = cams[t]
        uv, z, ok = project_points(cam, xyz[:, t])
        ok &= in_bounds(uv, cam.width, cam.height)
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            continue
        surf = bilinear_sample_array(depths[t], uv[idx])
        occ[idx, t] = z[idx] > surf * (1.0 + margin)
    return occ


# ---------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------


def generate(spec: SceneSpec) -> tuple[Sequence, TrackTable, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    B, T, P_c = spec.n_clusters, spec.n_frames, spec.points_per_cluster
    P = B * P_c

    centers, normals, bu, bv = _boards(spec, rng)
    radii = np.full(B, spec.board_radius)

    # cluster points: uniform in each disk, slight color jitter per point
    pts0 = np.zeros((P, 3))
    cluster = np.repeat(np.arange(B), P_c)
    base_colors = rng.uniform(0.25, 0.95, size=(B, 3))
    colors = np.zeros((P, 3))
    for b in range(B):
        rad = radii[b] * np.sqrt(rng.uniform(0.0, 1.0, size=P_c))
        ang = rng.uniform(0.0, 2.0 * np.pi, size=P_c)
        sl = slice(b * P_c, (b + 1) * P_c)
        pts0[sl] = (centers[b][None, :]
                    + rad[:, None] * np.cos(ang)[:, None] * bu[b][None, :]
                    + rad[:, None] * np.sin(ang)[:, None] * bv[b][None, :])
        colors[sl] = np.clip(base_colors[b] + rng.uniform(-0.12, 0.12, (P_c, 3)),
                             0.02, 0.98)

    cluster_R, cluster_t = _motions(spec, rng, centers, normals)
    cams, val_cams, val_frames = _cameras(spec, rng)

    # true trajectories
    xyz = np.einsum("ptij,pj->pti", cluster_R[cluster], pts0) + cluster_t[cluster]

    # ground-truth gaussians: cluster points plus a backdrop grid
    ext, ng = spec.backdrop_extent, spec.backdrop_grid
    gx, gy = np.meshgrid(np.linspace(-ext, ext, ng), np.linspace(-ext, ext, ng))
    back_pts = np.stack([gx.ravel(), gy.ravel(),
                         np.full(ng * ng, spec.backdrop_z)], axis=-1)
    xn = (back_pts[:, 0] / ext + 1.0) / 2.0
    yn = (back_pts[:, 1] / ext + 1.0) / 2.0
    back_colors = np.stack([0.25 + 0.2 * xn, 0.3 + 0.25 * yn,
                            0.55 - 0.2 * xn * yn], axis=-1)
    sigma_pt = spec.point_sigma_factor * spec.board_radius / np.sqrt(P_c)
    sigma_back = 0.8 * (2.0 * ext / (ng - 1))
    n_g = P + back_pts.shape[0]
    quat = np.zeros((n_g, 4))
    quat[:, 0] = 1.0
    gaussians = GaussianSet(
        mu0=np.concatenate([pts0, back_pts], axis=0),
        quat=quat,
        log_scale=np.concatenate([
            np.full((P, 3), np.log(sigma_pt)),
            np.full((back_pts.shape[0], 3), np.log(sigma_back))], axis=0),
        opacity_logit=np.full(n_g, spec.opacity_logit),
        color=np.concatenate([colors, back_colors], axis=0),
        is_dynamic=np.concatenate([np.ones(P, dtype=bool),
                                   np.zeros(back_pts.shape[0], dtype=bool)]),
    )
    gauss_cluster = np.concatenate([cluster, np.full(back_pts.shape[0], -1)])

    def poses_at(t):
        R = np.tile(np.eye(3), (n_g, 1, 1))
        tr = np.zeros((n_g, 3))
        dyn = gauss_cluster >= 0
        R[dyn] = cluster_R[gauss_cluster[dyn], t]
        tr[dyn] = cluster_t[gauss_cluster[dyn], t]
        return GaussianPoses(R, tr)

    # renders, analytic depth, masks
    images = np.zeros((T, spec.height, spec.width, 3))
    depths_true = np.zeros((T, spec.height, spec.width))
    masks = np.zeros((T, spec.height, spec.width), dtype=bool)
    for t in range(T):
        out = rasterize_frame(gaussians, poses_at(t), cams[t])
        images[t] = np.clip(out.image, 0.0, 1.0)
        planes = _planes_at(centers, normals, radii, cluster_R, cluster_t,
                            t, spec.backdrop_z)
        dmap, sid = analytic_depth(cams[t], planes)
        depths_true[t] = dmap
        masks[t] = sid >= 0

    val_images = None
    if len(val_cams):
        val_images = np.zeros((len(val_cams), spec.height, spec.width, 3))
        for k, tf in enumerate(val_frames):
            out = rasterize_frame(gaussians, poses_at(tf), val_cams[k])
            val_images[k] = np.clip(out.image, 0.0, 1.0)

    # observed relative depth: per-frame affine warp plus optional noise
    depth_scale = rng.uniform(1.4, 2.2, size=T)
    depth_shift = rng.uniform(-0.4, 0.4, size=T)
    depths_rel = (depths_true - depth_shift[:, None, None]) / depth_scale[:, None, None]
    if spec.depth_noise_frac > 0:
        depths_rel = depths_rel * (1.0 + spec.depth_noise_frac
                                   * rng.standard_normal(depths_rel.shape))
        depths_rel = np.maximum(depths_rel, 1e-6)

    # sparse metric anchors at integer pixels
    K_ref = spec.ref_points_per_frame
    ref_points = np.zeros((T, K_ref, 3))
    for t in range(T):
        uu = rng.integers(0, spec.width, size=K_ref)
        vv = rng.integers(0, spec.height, size=K_ref)
        ref_points[t] = np.stack([uu.astype(np.float64), vv.astype(np.float64),
                                  depths_true[t, vv, uu]], axis=-1)

    # tracks: project, occlusion-test analytically, then corrupt
    uv_true = np.zeros((P, T, 2))
    occluded = np.ones((P, T), dtype=bool)
    edge_ok = np.zeros((P, T), dtype=bool)
    for t in range(T):
        planes = _planes_at(centers, normals, radii, cluster_R, cluster_t,
                            t, spec.backdrop_z)
        uv, z, ok = project_points(cams[t], xyz[:, t])
        uv_true[:, t] = uv
        inb = np.zeros(P, dtype=bool)
        inb[ok] = ((uv[ok, 0] >= 0) & (uv[ok, 0] <= spec.width - 1)
                   & (uv[ok, 1] >= 0) & (uv[ok, 1] <= spec.height - 1))
        idx = np.flatnonzero(inb)
        if idx.size:
            _, sid = surface_at(cams[t], planes, uv[idx])
            occluded[idx, t] = sid != cluster[idx]
            # the four pixels lift_tracks will blend must all see this board,
            # otherwise interpolated depth straddles a discontinuity
            _, sid_map = analytic_depth(cams[t], planes)
            u0 = np.floor(uv[idx, 0]).astype(int)
            v0 = np.floor(uv[idx, 1]).astype(int)
            u1 = np.minimum(u0 + 1, spec.width - 1)
            v1 = np.minimum(v0 + 1, spec.height - 1)
            same = ((sid_map[v0, u0] == cluster[idx])
                    & (sid_map[v0, u1] == cluster[idx])
                    & (sid_map[v1, u0] == cluster[idx])
                    & (sid_map[v1, u1] == cluster[idx]))
            edge_ok[idx, t] = same

    noise = (spec.track_noise_px * rng.standard_normal((P, T, 2))
             if spec.track_noise_px > 0 else np.zeros((P, T, 2)))
    drop = (rng.uniform(size=(P, T)) < spec.dropout if spec.dropout > 0
            else np.zeros((P, T), dtype=bool))
    visible = ~occluded & edge_ok & ~drop
    uv_obs = uv_true + noise
    conf = np.exp(-np.linalg.norm(noise, axis=-1))
    uv_obs[~visible] = np.nan
    conf = np.where(visible, conf, 0.0)
    tracks = TrackTable(uv_obs, visible, conf)

    seq = Sequence(images=images, depths_rel=depths_rel, masks=masks, cams=cams,
                   ref_points=ref_points, val_cams=val_cams,
                   val_images=val_images, val_frames=val_frames)
    gt = GroundTruth(xyz=xyz, cluster=cluster, occluded=occluded,
                     cluster_R=cluster_R, cluster_t=cluster_t,
                     depth_scale=depth_scale, depth_shift=depth_shift,
                     depths_true=depths_true, gaussians=gaussians,
                     gauss_cluster=gauss_cluster, board_centers=centers,
                     board_normals=normals, board_radii=radii,
                     backdrop_z=spec.backdrop_z)
    return seq, tracks, gt
