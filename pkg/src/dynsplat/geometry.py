"""Rigid transforms, rotation parameterizations and pinhole cameras.

Conventions used throughout the package:
  - world-to-camera extrinsics: x_cam = R @ x_world + t
  - right-handed coordinates, camera looks down +z, depth = z_cam
  - pixel coordinates are continuous; the sample position of pixel
    (row i, col j) is (u, v) = (j, i), so a point that projects exactly
    onto the principal point lands on pixel (cy, cx)
  - quaternions are (w, x, y, z), unit norm
  - the 6D rotation parameterization stores the first two COLUMNS of the
    rotation matrix, flattened as (a1, a2); Gram-Schmidt recovers the
    full matrix.  Identity is (1, 0, 0, 0, 1, 0).

All math here is float64; inputs are converted on entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRotation, ShapeMismatch

# Points at or closer than this camera-frame depth are unprojectable.
Z_NEAR = 1e-4

# Norms below this cannot be safely normalized.
_EPS_NORM = 1e-12


def _as_f64(x, shape=None, name="array"):
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise ShapeMismatch(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: rotation R (3x3, orthonormal, det +1) and translation t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _as_f64(self.R, (3, 3), "R"))
        object.__setattr__(self, "t", _as_f64(self.t, (3,), "t"))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t)

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def orthonormality_error(self) -> float:
        """Max abs deviation of R^T R from identity (diagnostic)."""
        return float(np.abs(self.R.T @ self.R - np.eye(3)).max())


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a*b: the result applies b first, then a."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


@dataclass(frozen=True)
class Rotation6D:
    """Two unnormalized 3-vectors; Gram-Schmidt maps them to SO(3)."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", _as_f64(self.a1, (3,), "a1"))
        object.__setattr__(self, "a2", _as_f64(self.a2, (3,), "a2"))

    @staticmethod
    def identity() -> "Rotation6D":
        return Rotation6D(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


def rot6d_to_matrix(r: Rotation6D | np.ndarray) -> np.ndarray:
    """Orthonormalize a 6D rotation into a 3x3 matrix with det +1.

    The two stored vectors become the first two columns after
    Gram-Schmidt; the third column is their cross product.

    Raises DegenerateRotation when a1 is (near) zero or a2 is (near)
    collinear with a1.
    """
    if isinstance(r, Rotation6D):
        v = r.as_array()
    else:
        v = _as_f64(r, (6,), "rot6d")
    m = rot6d_to_matrix_batch(v[None])
    return m[0]


def rot6d_to_matrix_batch(v: np.ndarray) -> np.ndarray:
    """Vectorized rot6d_to_matrix for an (..., 6) array; returns (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 6:
        raise ShapeMismatch(f"rot6d batch: last dim must be 6, got {v.shape}")
    a1 = v[..., 0:3]
    a2 = v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS_NORM):
        raise DegenerateRotation("rot6d: first axis has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS_NORM):
        raise DegenerateRotation("rot6d: second axis collinear with the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    """Inverse of rot6d_to_matrix: first two columns, flattened to (6,)."""
    R = _as_f64(R, (3, 3), "R")
    return np.concatenate([R[:, 0], R[:, 1]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit-normalize a (w, x, y, z) quaternion and convert to a matrix."""
    q = _as_f64(q, (4,), "quat")
    return quat_to_matrix_batch(q[None])[0]


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """Vectorized quaternion-to-matrix for (..., 4) wxyz input."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ShapeMismatch(f"quat batch: last dim must be 4, got {q.shape}")
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < _EPS_NORM):
        raise DegenerateRotation("quaternion has (near) zero norm")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) quaternion with w >= 0."""
    R = _as_f64(R, (3, 3), "R")
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera extrinsics E, image size."""

    K: np.ndarray
    E: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "K", _as_f64(self.K, (3, 3), "K"))
        if self.width < 1 or self.height < 1:
            raise ShapeMismatch("camera image size must be at least 1x1")
        K = self.K
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidIntrinsics("focal lengths must be positive")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0 or abs(K[2, 2] - 1.0) > 1e-12:
            raise InvalidIntrinsics("K must be upper-triangular with K[2,2] == 1")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])


class InvalidIntrinsics(ShapeMismatch):
    """Intrinsic matrix violates the pinhole form."""


def make_camera(fx, fy, cx, cy, E: RigidTransform, width: int, height: int) -> Camera:
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return Camera(K=K, E=E, width=width, height=height)


def project_point(cam: Camera, x_world: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a world point; returns ((u, v), depth).

    Raises BehindCamera if the camera-frame z is <= Z_NEAR.
    """
    x = cam.E.apply(_as_f64(x_world, (3,), "point"))
    z = float(x[2])
    if z <= Z_NEAR:
        raise BehindCamera(f"point depth {z:.3g} <= {Z_NEAR}")
    u = cam.fx * x[0] / z + cam.cx
    v = cam.fy * x[1] / z + cam.cy
    return np.array([u, v]), z

def project_points(cam: Camera, x_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch projection of (N, 3) world points.

    Returns (uv (N, 2), depth (N,), in_front (N,) bool).  Points behind the
    near plane get NaN uv instead of raising; callers filter on the mask.
    """
    x = cam.E.apply(np.asarray(x_world, dtype=np.float64))
    z = x[:, 2]
    ok = z > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x[:, 0] / z + cam.cx
        v = cam.fy * x[:, 1] / z + cam.cy
    uv = np.stack([u, v], axis=-1)
    uv[~ok] = np.nan
    return uv, z, ok


def unproject_point(cam: Camera, uv: np.ndarray, depth: float) -> np.ndarray:
    """Inverse of project_point at the given depth; returns a world point."""
    if depth <= Z_NEAR:
        raise BehindCamera(f"cannot unproject at depth {depth:.3g}")
    uv = _as_f64(uv, (2,), "uv")
    x_cam = np.array([(uv[0] - cam.cx) / cam.fx * depth,
                      (uv[1] - cam.cy) / cam.fy * depth,
                      depth])
    return cam.E.inverse().apply(x_cam)


def unproject_points(cam: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Batch unprojection: (N, 2) pixels and (N,) depths to (N, 3) world."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[:, 0] - cam.cx) / cam.fx * depth
    y = (uv[:, 1] - cam.cy) / cam.fy * depth
    return cam.E.inverse().apply(np.stack([x, y, depth], axis=-1))
