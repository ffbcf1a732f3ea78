"""Differentiable 3D Gaussian rasterization on the CPU.

Rendering model: each Gaussian is an anisotropic 3D blob with mean mu,
orientation R, per-axis scale s, opacity o in (0, 1) and color c.  After
projection into a pinhole camera the 2D footprint is the linearized
covariance J Sigma J^T plus an isotropic floor of 0.3 px^2.  Pixels
composite front to back:

    value(p) = sum_i T_i * alpha_i * payload_i,
    alpha_i  = min(o_i * exp(-0.5 * d^T Sigma2d^-1 d), 0.999),
    T_i      = prod_{j<i} (1 - alpha_j),

over the Gaussians whose 3-sigma elliptical footprint covers p, ordered by
camera-frame depth (ties broken by index).  Accumulation stops contributing
once T < 1e-4.  The background is opaque black: no residual background term
is added, so the composited alpha is also the rendered coverage.

The compositing step is a single custom autodiff primitive with a
hand-written vectorized backward pass; the depth ordering and footprint
selection are treated as non-differentiable.  Everything upstream of
compositing (rigid transforms, projection, the covariance chain) is built
from ordinary taped ops, so the whole renderer is differentiable end to end
with respect to every Gaussian attribute.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import BehindCamera, ShapeMismatch
from .geometry import Camera, RigidTransform, Z_NEAR, quat_to_matrix_batch

# Compositing constants.  ALPHA_MAX keeps log1p(-alpha) finite; T_CUTOFF
# stops contributions once a pixel is effectively saturated.
ALPHA_MAX = 0.999
T_CUTOFF = 1e-4
COV2D_FLOOR = 0.3  # px^2, added to both diagonal entries of the 2D covariance
FOOTPRINT_MAHAL2 = 9.0  # 3-sigma elliptical support


@dataclass
class GaussianSet:
    """Canonical-frame Gaussians.

    mu0: (N, 3) means, quat: (N, 4) wxyz orientations, log_scale: (N, 3),
    opacity_logit: (N,), color: (N, 3) in [0, 1], is_dynamic: (N,) bool.
    Scales and opacities are stored in unconstrained form (log / logit) so
    optimizers can step freely.
    """

    mu0: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    is_dynamic: np.ndarray

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.is_dynamic = np.asarray(self.is_dynamic, dtype=bool)
        n = self.mu0.shape[0]
        if self.mu0.shape != (n, 3) or self.quat.shape != (n, 4) \
                or self.log_scale.shape != (n, 3) or self.opacity_logit.shape != (n,) \
                or self.color.shape != (n, 3) or self.is_dynamic.shape != (n,):
            raise ShapeMismatch("GaussianSet: inconsistent field shapes")

    @property
    def n(self) -> int:
        return self.mu0.shape[0]

    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def rotations(self) -> np.ndarray:
        """(N, 3, 3) canonical orientation matrices."""
        return quat_to_matrix_batch(self.quat)

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.mu0[idx], self.quat[idx], self.log_scale[idx],
                           self.opacity_logit[idx], self.color[idx], self.is_dynamic[idx])


def concat_gaussians(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    return GaussianSet(
        np.concatenate([a.mu0, b.mu0]),
        np.concatenate([a.quat, b.quat]),
        np.concatenate([a.log_scale, b.log_scale]),
        np.concatenate([a.opacity_logit, b.opacity_logit]),
        np.concatenate([a.color, b.color]),
        np.concatenate([a.is_dynamic, b.is_dynamic]),
    )


@dataclass
class GaussianPoses:
    """Per-Gaussian world-frame rigid transforms at one timestep."""

    R: np.ndarray  # (N, 3, 3)
    t: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape[1:] != (3, 3) or self.t.shape != (self.R.shape[0], 3):
            raise ShapeMismatch("GaussianPoses: bad shapes")

    @staticmethod
    def identity(n: int) -> "GaussianPoses":
        return GaussianPoses(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3)))

    @staticmethod
    def from_transforms(transforms: list[RigidTransform]) -> "GaussianPoses":
        return GaussianPoses(np.stack([T.R for T in transforms]),
                             np.stack([T.t for T in transforms]))

    def subset(self, idx) -> "GaussianPoses":
        return GaussianPoses(self.R[idx], self.t[idx])


@dataclass
class RenderOutput:
    image: np.ndarray        # (H, W, 3) in [0, 1 + eps]
    depth: np.ndarray        # (H, W) expected camera depth (unnormalized)
    alpha: np.ndarray        # (H, W) composited coverage in [0, 1]
    track_world: np.ndarray  # (H, W, 3) expected world position at target time
    valid: np.ndarray        # (H, W) bool, alpha >= 0.5


def project_gaussian(cam: Camera, mu: np.ndarray, R: np.ndarray,
                     scale: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Project one world-frame Gaussian; reference (non-taped) path.

    Returns (mu2d (2,), cov2d (2, 2), depth).  The 2D covariance already
    includes the 0.3 px^2 floor.  Raises BehindCamera at z <= Z_NEAR.
    """
    mu = np.asarray(mu, dtype=np.float64)
    x = cam.E.apply(mu)
    z = float(x[2])
    if z <= Z_NEAR:
        raise BehindCamera(f"gaussian center depth {z:.3g} <= {Z_NEAR}")
    u = cam.fx * x[0] / z + cam.cx
    v = cam.fy * x[1] / z + cam.cy
    M = cam.E.R @ np.asarray(R, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    cov_cam = (M * s ** 2) @ M.T
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x[0] / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * x[1] / z ** 2]])
    cov2d = J @ cov_cam @ J.T + COV2D_FLOOR * np.eye(2)
    return np.array([u, v]), cov2d, z


# ---------------------------------------------------------------------
# compositing primitive
# ---------------------------------------------------------------------


def splat_composite(mu2d: Var, cov2d: Var, opacity: Var, payload: Var,
                    depth_key: np.ndarray, height: int, width: int) -> Var:
    """Depth-sorted alpha compositing as one taped primitive.

    Inputs are per-Gaussian Vars: mu2d (N, 2), cov2d (N, 2, 2) with the
    pixel floor already added, opacity (N,) in (0, 1), payload (N, C).
    depth_key is a plain array of camera depths used only for ordering
    (the ordering itself is non-differentiable).  Returns an
    (H, W, C + 1) Var whose last channel is the composited alpha.
    """
    tape = mu2d.tape
    N = mu2d.value.shape[0]
    C = payload.value.shape[1]
    m = mu2d.value
    Cv = cov2d.value
    o = opacity.value
    pay_aug = np.concatenate([payload.value, np.ones((N, 1))], axis=1)

    out = np.zeros((height, width, C + 1))
    state: dict = {}

    if N > 0:
        a = Cv[:, 0, 0]
        b = Cv[:, 0, 1]
        c = Cv[:, 1, 0]
        d = Cv[:, 1, 1]
        det = a * d - b * c
        Q = np.empty_like(Cv)
        Q[:, 0, 0] = d / det
        Q[:, 1, 1] = a / det
        Q[:, 0, 1] = -b / det
        Q[:, 1, 0] = -c / det

        # conservative bbox from the largest eigenvalue of cov2d
        half_tr = 0.5 * (a + d)
        disc = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * c, 0.0))
        radius = 3.0 * np.sqrt(np.maximum(half_tr + disc, 0.0))
        x0 = np.ceil(m[:, 0] - radius).astype(np.int64)
        x1 = np.floor(m[:, 0] + radius).astype(np.int64)
        y0 = np.ceil(m[:, 1] - radius).astype(np.int64)
        y1 = np.floor(m[:, 1] + radius).astype(np.int64)
        np.clip(x0, 0, width - 1, out=x0)
        np.clip(x1, -1, width - 1, out=x1)
        np.clip(y0, 0, height - 1, out=y0)
        np.clip(y1, -1, height - 1, out=y1)
        bw = np.maximum(x1 - x0 + 1, 0)
        bh = np.maximum(y1 - y0 + 1, 0)
        # empty bbox when the center is far outside the image
        off_img = (m[:, 0] + radius < 0) | (m[:, 0] - radius > width - 1) \
            | (m[:, 1] + radius < 0) | (m[:, 1] - radius > height - 1)
        bw[off_img] = 0
        counts = (bw * bh).astype(np.int64)
        total = int(counts.sum())
    else:
        total = 0

    if total > 0:
        gi = np.repeat(np.arange(N), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        offs = np.arange(total) - np.repeat(starts, counts)
        bwg = bw[gi]
        px = x0[gi] + offs % bwg
        py = y0[gi] + offs // bwg

        dx = px - m[gi, 0]
        dy = py - m[gi, 1]
        q00 = Q[gi, 0, 0]
        q01 = Q[gi, 0, 1] + Q[gi, 1, 0]
        q11 = Q[gi, 1, 1]
        m2 = q00 * dx * dx + q01 * dx * dy + q11 * dy * dy
        keep = m2 <= FOOTPRINT_MAHAL2
        gi, px, py, dx, dy, m2 = gi[keep], px[keep], py[keep], dx[keep], dy[keep], m2[keep]

    if total > 0 and gi.size > 0:
        gauss = np.exp(-0.5 * m2)
        a_pre = o[gi] * gauss
        acap = np.minimum(a_pre, ALPHA_MAX)

        order = np.argsort(depth_key, kind="stable")
        rank = np.empty(N, dtype=np.int64)
        rank[order] = np.arange(N)
        pid = py * width + px
        perm = np.lexsort((rank[gi], pid))
        gi, pid, dx, dy = gi[perm], pid[perm], dx[perm], dy[perm]
        gauss, a_pre, acap = gauss[perm], a_pre[perm], acap[perm]

        first = np.ones(gi.size, dtype=bool)
        first[1:] = pid[1:] != pid[:-1]
        seg_id = np.cumsum(first) - 1
        lg = np.log1p(-acap)
        ce = np.cumsum(lg) - lg  # exclusive prefix sum
        seg_base = ce[first]
        T = np.exp(ce - seg_base[seg_id])
        live = T >= T_CUTOFF
        w = np.where(live, T * acap, 0.0)

        npix = height * width
        flat = np.empty((npix, C + 1))
        for ch in range(C + 1):
            flat[:, ch] = np.bincount(pid, weights=w * pay_aug[gi, ch], minlength=npix)
        out = flat.reshape(height, width, C + 1)

        state.update(gi=gi, pid=pid, dx=dx, dy=dy, gauss=gauss, a_pre=a_pre,
                     acap=acap, T=T, live=live, w=w, seg_id=seg_id,
                     n_seg=int(seg_id[-1]) + 1, Q=Q, pay_aug=pay_aug, o=o)

    holder: dict = {"g": None, "res": None}

    def _full_backward(G):
        if holder["g"] is G:
            return holder["res"]
        dmu2d = np.zeros((N, 2))
        dcov2d = np.zeros((N, 2, 2))
        dop = np.zeros(N)
        dpay = np.zeros((N, C))
        if state:
            gi = state["gi"]
            pid = state["pid"]
            w = state["w"]
            T = state["T"]
            live = state["live"]
            acap = state["acap"]
            a_pre = state["a_pre"]
            gauss = state["gauss"]
            pay_aug = state["pay_aug"]
            seg_id = state["seg_id"]
            Q = state["Q"]
            o = state["o"]
            dx, dy = state["dx"], state["dy"]

            Gf = np.asarray(G, dtype=np.float64).reshape(height * width, C + 1)
            Gp = Gf[pid]  # (M, C+1)

            wG = w[:, None] * Gp
            for ch in range(C):
                dpay[:, ch] = np.bincount(gi, weights=wG[:, ch], minlength=N)

            dw = np.einsum("mc,mc->m", Gp, pay_aug[gi])
            s = w * dw
            cs = np.cumsum(s)
            firsts = np.zeros(s.size, dtype=bool)
            firsts[0] = True
            firsts[1:] = seg_id[1:] != seg_id[:-1]
            base = (cs - s)[firsts]
            incl = cs - base[seg_id]  # within-segment inclusive prefix sum
            seg_sum = np.bincount(seg_id, weights=s, minlength=state["n_seg"])
            suffix = seg_sum[seg_id] - incl  # strict suffix sum of w*dw
            da = np.where(live, T * dw - suffix / (1.0 - acap), 0.0)
            da = np.where(a_pre < ALPHA_MAX, da, 0.0)

            dop_pair = da * gauss
            dop[:] = np.bincount(gi, weights=dop_pair, minlength=N)
            dgauss = da * o[gi]
            dm2 = -0.5 * gauss * dgauss

            q00 = Q[gi, 0, 0]
            q01s = Q[gi, 0, 1] + Q[gi, 1, 0]
            q11 = Q[gi, 1, 1]
            ddx = dm2 * (2.0 * q00 * dx + q01s * dy)
            ddy = dm2 * (2.0 * q11 * dy + q01s * dx)
            dmu2d[:, 0] = -np.bincount(gi, weights=ddx, minlength=N)
            dmu2d[:, 1] = -np.bincount(gi, weights=ddy, minlength=N)

            dQ = np.zeros((N, 2, 2))
            dQ[:, 0, 0] = np.bincount(gi, weights=dm2 * dx * dx, minlength=N)
            dQ[:, 0, 1] = np.bincount(gi, weights=dm2 * dx * dy, minlength=N)
            dQ[:, 1, 0] = dQ[:, 0, 1]
            dQ[:, 1, 1] = np.bincount(gi, weights=dm2 * dy * dy, minlength=N)
            # Q = cov^-1  =>  dcov = -Q dQ Q
            dcov2d[:] = -np.einsum("nij,njk,nkl->nil", Q, dQ, Q)

        res = (dmu2d, dcov2d, dop, dpay)
        holder["g"] = G
        holder["res"] = res
        return res

    vjps = (
        lambda g: _full_backward(g)[0],
        lambda g: _full_backward(g)[1],
        lambda g: _full_backward(g)[2],
        lambda g: _full_backward(g)[3],
    )
    return tape.custom(out, (mu2d, cov2d, opacity, payload), vjps)


# ---------------------------------------------------------------------
# taped projection + render graph
# ---------------------------------------------------------------------


def render_graph(tape: Tape, cam: Camera, mu_t: Var, R_t: Var, scale: Var,
                 opacity: Var, color: Var, extra_payload: Var | None = None) -> Var:
    """Build the full differentiable render graph for one camera.

    mu_t/R_t are world-frame positions and orientations at render time.
    Returns the composited (H, W, C + 1) Var with channel layout
    [color rgb, camera depth, extra..., alpha].  Gaussians behind the near
    plane are culled (no gradient flows to them from this render).
    """
    ER = tape.const(cam.E.R)
    mu_cam = ad.einsum("ij,nj->ni", ER, mu_t) + tape.const(cam.E.t)

    zvals = mu_cam.value[:, 2]
    keep = zvals > Z_NEAR
    extras = [] if extra_payload is None else [extra_payload]
    if not np.all(keep):
        idx = np.flatnonzero(keep)
        mu_cam = mu_cam.take(idx)
        R_t = R_t.take(idx)
        scale = scale.take(idx)
        opacity = opacity.take(idx)
        color = color.take(idx)
        extras = [e.take(idx) for e in extras]

    n = mu_cam.value.shape[0]
    c_extra = 0 if extra_payload is None else extra_payload.value.shape[1]
    if n == 0:
        return tape.const(np.zeros((cam.height, cam.width, 3 + 1 + c_extra + 1)))

    x = mu_cam[:, 0]
    y = mu_cam[:, 1]
    z = mu_cam[:, 2]
    invz = 1.0 / z
    u = cam.fx * x * invz + cam.cx
    v = cam.fy * y * invz + cam.cy
    mu2d = ad.stack([u, v], axis=-1)

    M = ad.einsum("ij,njk->nik", tape.const(cam.E.R), R_t)
    Ms = M * scale.reshape(n, 1, 3)
    cov_cam = ad.einsum("nij,nkj->nik", Ms, Ms)

    zero = tape.const(np.zeros(n))
    row0 = ad.stack([cam.fx * invz, zero, -cam.fx * x * invz * invz], axis=-1)
    row1 = ad.stack([zero, cam.fy * invz, -cam.fy * y * invz * invz], axis=-1)
    J = ad.stack([row0, row1], axis=-2)  # (n, 2, 3)
    JC = ad.einsum("nij,njk->nik", J, cov_cam)
    cov2d = ad.einsum("nij,nkj->nik", JC, J) + tape.const(COV2D_FLOOR * np.eye(2))

    payload = ad.concat([color, z.reshape(n, 1)] + extras, axis=1)
    return splat_composite(mu2d, cov2d, opacity, payload, zvals[keep], cam.height, cam.width)


def _poses_to_arrays(poses, n: int) -> GaussianPoses:
    if poses is None:
        return GaussianPoses.identity(n)
    if isinstance(poses, GaussianPoses):
        return poses
    return GaussianPoses.from_transforms(list(poses))


def rasterize_frame(gaussians: GaussianSet, poses, cam: Camera,
                    target_poses=None) -> RenderOutput:
    """Render one frame (value-level convenience over the taped graph).

    poses place each canonical Gaussian in the world at render time; pass
    None for identity (static scenes).  If target_poses is given, the
    track_world output composites the Gaussians' positions under those
    poses instead of the render-time ones, i.e. the expected correspondence
    map from this frame to the target timestep.
    """
    n = gaussians.n
    P = _poses_to_arrays(poses, n)
    if P.R.shape[0] != n:
        raise ShapeMismatch("poses count does not match Gaussian count")
    mu_t = np.einsum("nij,nj->ni", P.R, gaussians.mu0) + P.t
    R_t = np.einsum("nij,njk->nik", P.R, gaussians.rotations())

    if target_poses is None:
        mu_target = mu_t
    else:
        TP = _poses_to_arrays(target_poses, n)
        if TP.R.shape[0] != n:
            raise ShapeMismatch("target poses count does not match Gaussian count")
        mu_target = np.einsum("nij,nj->ni", TP.R, gaussians.mu0) + TP.t

    tape = Tape()
    out = render_graph(
        tape, cam,
        tape.const(mu_t), tape.const(R_t),
        tape.const(gaussians.scale()), tape.const(gaussians.opacity()),
        tape.const(gaussians.color),
        extra_payload=tape.const(mu_target),
    ).value

    alpha = out[..., -1]
    return RenderOutput(
        image=out[..., 0:3],
        depth=out[..., 3],
        alpha=alpha,
        track_world=out[..., 4:7],
        valid=alpha >= 0.5,
    )


def rasterize_tracks(gaussians: GaussianSet, poses_t, poses_tprime,
                     cam_t: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Expected world-coordinate map from query time t to target time t'.

    Weights (ordering, alphas) come from the query-time configuration; the
    composited payload is each Gaussian's position at the target time.
    Returns (track_world (H, W, 3), valid (H, W) bool).
    """
    out = rasterize_frame(gaussians, poses_t, cam_t, target_poses=poses_tprime)
    return out.track_world, out.valid


def project_track_map(track_world: np.ndarray, cam: Camera
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project a rendered track map into a target camera.

    Returns (uv (H, W, 2), depth (H, W), valid (H, W)).  Pixels whose
    target-frame depth is <= Z_NEAR are flagged invalid and get NaN uv.
    """
    tw = np.asarray(track_world, dtype=np.float64)
    x = tw @ cam.E.R.T + cam.E.t
    z = x[..., 2]
    ok = z > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x[..., 0] / z + cam.cx
        v = cam.fy * x[..., 1] / z + cam.cy
    uv = np.stack([u, v], axis=-1)
    uv[~ok] = np.nan
    return uv, z, ok


# ---------------------------------------------------------------------
# PLY export
# ---------------------------------------------------------------------

_PLY_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]


def write_ply(gaussians: GaussianSet, path) -> None:
    """Binary little-endian PLY: float32 position/scale/rotation/opacity,
    uint8 color.  Scales and opacity are written in their activated form
    (actual sigma and o), not the raw optimization parameters."""
    n = gaussians.n
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header += ["property uchar red", "property uchar green", "property uchar blue",
               "end_header"]

    dtype = np.dtype([(p, "<f4") for p in _PLY_PROPS]
                     + [(c, "u1") for c in ("red", "green", "blue")])
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = gaussians.mu0.T.astype(np.float32)
    s = gaussians.scale().astype(np.float32)
    rec["scale_0"], rec["scale_1"], rec["scale_2"] = s.T
    q = gaussians.quat.astype(np.float32)
    rec["rot_0"], rec["rot_1"], rec["rot_2"], rec["rot_3"] = q.T
    rec["opacity"] = gaussians.opacity().astype(np.float32)
    rgb = np.clip(np.round(gaussians.color * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb.T

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> GaussianSet:
    """Read a PLY written by write_ply.  The dynamic flag is not part of the
    format and comes back all-False."""
    with open(path, "rb") as f:
        header_lines = []
        while True:
            line = f.readline().decode("ascii").strip()
            header_lines.append(line)
            if line == "end_header":
                break
        n = 0
        for line in header_lines:
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
        dtype = np.dtype([(p, "<f4") for p in _PLY_PROPS]
                         + [(c, "u1") for c in ("red", "green", "blue")])
        rec = np.frombuffer(f.read(rec_size(dtype, n)), dtype=dtype, count=n)

    mu0 = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    scale = np.stack([rec[f"scale_{i}"] for i in range(3)], axis=-1).astype(np.float64)
    quat = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=-1).astype(np.float64)
    nq = np.linalg.norm(quat, axis=-1, keepdims=True)
    quat = quat / np.where(nq < 1e-12, 1.0, nq)
    o = np.clip(rec["opacity"].astype(np.float64), 1e-6, 1.0 - 1e-6)
    color = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1) / 255.0
    return GaussianSet(
        mu0=mu0,
        quat=quat,
        log_scale=np.log(np.maximum(scale, 1e-12)),
        opacity_logit=np.log(o / (1.0 - o)),
        color=color,
        is_dynamic=np.zeros(n, dtype=bool),
    )


def rec_size(dtype: np.dtype, n: int) -> int:
    return dtype.itemsize * n
