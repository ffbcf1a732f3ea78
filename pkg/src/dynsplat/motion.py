"""Shared SE(3) motion bases and per-Gaussian soft assignments.

Scene motion is modeled by a small number B of rigid basis trajectories.
Basis b at timestep t is a rigid transform stored as a 6D rotation (two
unnormalized matrix columns) plus a translation.  Each dynamic Gaussian
carries B logits; its transform at time t is the softmax-weighted sum of
the raw 6D rotation vectors (orthonormalized afterwards) and of the
translations:

    R_i(t) = gram_schmidt( sum_b w_ib * rot6d[b, t] ),
    t_i(t) = sum_b w_ib * transl[b, t],
    mu_i(t) = R_i(t) @ mu_i(0) + t_i(t),   R_world,i(t) = R_i(t) @ R0_i.

The canonical timestep t0 is pinned to the identity for every basis, which
both fixes the gauge and makes blending at t0 the identity for any weights.

Blending and orthonormalization exist twice: a plain numpy path for
initialization/evaluation and a taped path (autodiff Vars) for training.
Tests cross-check the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import DegenerateRotation, ShapeMismatch
from .geometry import RigidTransform, rot6d_to_matrix_batch

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class MotionBases:
    """B basis trajectories over T timesteps, canonical frame t0."""

    rot6d: np.ndarray   # (B, T, 6)
    transl: np.ndarray  # (B, T, 3)
    t0: int

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64)
        self.transl = np.asarray(self.transl, dtype=np.float64)
        if self.rot6d.ndim != 3 or self.rot6d.shape[2] != 6:
            raise ShapeMismatch(f"rot6d must be (B, T, 6), got {self.rot6d.shape}")
        if self.transl.shape != self.rot6d.shape[:2] + (3,):
            raise ShapeMismatch("transl shape inconsistent with rot6d")
        if not (0 <= self.t0 < self.rot6d.shape[1]):
            raise ShapeMismatch(f"t0={self.t0} outside [0, {self.rot6d.shape[1]})")

    @property
    def n_bases(self) -> int:
        return self.rot6d.shape[0]

    @property
    def n_frames(self) -> int:
        return self.rot6d.shape[1]

    @staticmethod
    def identity(n_bases: int, n_frames: int, t0: int = 0) -> "MotionBases":
        rot = np.tile(IDENTITY_6D, (n_bases, n_frames, 1))
        return MotionBases(rot, np.zeros((n_bases, n_frames, 3)), t0)

    def pin_canonical(self) -> None:
        """Reset the t0 slice of every basis to the exact identity (in place)."""
        self.rot6d[:, self.t0, :] = IDENTITY_6D
        self.transl[:, self.t0, :] = 0.0

    def basis_transform(self, b: int, t: int) -> RigidTransform:
        R = rot6d_to_matrix_batch(self.rot6d[b, t][None])[0]
        return RigidTransform(R, self.transl[b, t])


@dataclass
class MotionCoeffs:
    """Per-Gaussian basis logits; softmax turns them into blend weights."""

    logits: np.ndarray  # (N, B)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ShapeMismatch(f"logits must be (N, B), got {self.logits.shape}")

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    def weights(self) -> np.ndarray:
        """Rows are positive and sum to one."""
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def argmax_basis(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def blend_bases(bases: MotionBases, weights: np.ndarray, t: int) -> RigidTransform:
    """Blend all bases at timestep t with one weight vector (B,)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (bases.n_bases,):
        raise ShapeMismatch(f"weights must be ({bases.n_bases},), got {w.shape}")
    six = w @ bases.rot6d[:, t, :]
    R = rot6d_to_matrix_batch(six[None])[0]
    return RigidTransform(R, w @ bases.transl[:, t, :])


def blend_batch(bases: MotionBases, weights: np.ndarray, t: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """Blend for many Gaussians at once: weights (N, B) -> (R (N,3,3), t (N,3))."""
    w = np.asarray(weights, dtype=np.float64)
    six = w @ bases.rot6d[:, t, :]
    return rot6d_to_matrix_batch(six), w @ bases.transl[:, t, :]


def transform_gaussian(mu0: np.ndarray, R0: np.ndarray, T: RigidTransform
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Apply a rigid transform to a canonical Gaussian: positions rotate and
    translate, orientations rotate (scale is untouched)."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    R0 = np.asarray(R0, dtype=np.float64)
    return T.R @ mu0 + T.t, T.R @ R0


def trajectory(mu0: np.ndarray, weights: np.ndarray, bases: MotionBases
               ) -> tuple[np.ndarray, np.ndarray]:
    """Full trajectory of one canonical point: ((T, 3) positions, (T, 3, 3)
    blended rotations)."""
    w = np.asarray(weights, dtype=np.float64)
    six = np.einsum("b,btk->tk", w, bases.rot6d)
    R = rot6d_to_matrix_batch(six)
    t = np.einsum("b,btk->tk", w, bases.transl)
    return np.einsum("tij,j->ti", R, np.asarray(mu0, dtype=np.float64)) + t, R


def trajectories(mu0: np.ndarray, weights: np.ndarray, bases: MotionBases,
                 frames=None) -> np.ndarray:
    """Positions of many canonical points over (a subset of) timesteps.

    mu0 (N, 3), weights (N, B); returns (N, F, 3) where F = len(frames) or T.
    """
    rot6d = bases.rot6d if frames is None else bases.rot6d[:, frames, :]
    transl = bases.transl if frames is None else bases.transl[:, frames, :]
    six = np.einsum("nb,btk->ntk", np.asarray(weights, dtype=np.float64), rot6d)
    R = rot6d_to_matrix_batch(six)  # (N, F, 3, 3)
    t = np.einsum("nb,btk->ntk", weights, transl)
    return np.einsum("ntij,nj->nti", R, np.asarray(mu0, dtype=np.float64)) + t


# ---------------------------------------------------------------------
# taped counterparts (used inside training graphs)
# ---------------------------------------------------------------------


def rot6d_to_matrix_var(v: Var) -> Var:
    """Taped Gram-Schmidt: (N, 6) -> (N, 3, 3) with the two vectors as the
    first two columns.  Degeneracy is checked on values and raises."""
    a1 = v[:, 0:3]
    a2 = v[:, 3:6]
    n1 = a1.norm(axis=-1, keepdims=True)
    if np.any(n1.value < 1e-12):
        raise DegenerateRotation("blended 6D rotation: first axis near zero")
    b1 = a1 / n1
    proj = (b1 * a2).sum(axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = u2.norm(axis=-1, keepdims=True)
    if np.any(n2.value < 1e-12):
        raise DegenerateRotation("blended 6D rotation: axes near collinear")
    b2 = u2 / n2
    b3 = ad.cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def quat_to_matrix_var(q: Var) -> Var:
    """Taped quaternion (N, 4) wxyz -> (N, 3, 3), normalizing first."""
    n = q.norm(axis=-1, keepdims=True)
    if np.any(n.value < 1e-12):
        raise DegenerateRotation("quaternion with near-zero norm")
    qn = q / n
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    one = q.tape.const(np.ones(q.value.shape[0]))
    r00 = one - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = one - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = one - 2.0 * (x * x + y * y)
    row0 = ad.stack([r00, r01, r02], axis=-1)
    row1 = ad.stack([r10, r11, r12], axis=-1)
    row2 = ad.stack([r20, r21, r22], axis=-1)
    return ad.stack([row0, row1, row2], axis=-2)


def blend_vars(weights: Var, rot6d_t: Var, transl_t: Var) -> tuple[Var, Var]:
    """Taped blend at one timestep.

    weights (N, B) softmaxed coefficients, rot6d_t (B, 6) and transl_t (B, 3)
    are that timestep's basis slices.  Returns ((N, 3, 3), (N, 3)).
    """
    six = ad.einsum("nb,bk->nk", weights, rot6d_t)
    R = rot6d_to_matrix_var(six)
    t = ad.einsum("nb,bk->nk", weights, transl_t)
    return R, t


def apply_blend_vars(R_blend: Var, t_blend: Var, mu0: Var, R0: Var) -> tuple[Var, Var]:
    """Taped rigid application: mu_t = R mu0 + t, R_t = R R0."""
    mu_t = ad.einsum("nij,nj->ni", R_blend, mu0) + t_blend
    R_t = ad.einsum("nij,njk->nik", R_blend, R0)
    return mu_t, R_t
