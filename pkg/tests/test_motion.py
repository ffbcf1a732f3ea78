import numpy as np
import pytest

from dynsplat import autodiff as ad, geometry as geo, motion
from dynsplat.autodiff import Parameter, Tape
from dynsplat.errors import DegenerateRotation, ShapeMismatch
from dynsplat.geometry import RigidTransform
from dynsplat.motion import MotionBases, MotionCoeffs

from oracles import orthonormalize_qr


def _random_bases(rng, B=3, T=5, t0=0):
    rot = rng.normal(size=(B, T, 6)) * 0.3 + motion.IDENTITY_6D
    transl = rng.normal(size=(B, T, 3)) * 0.5
    bases = MotionBases(rot, transl, t0)
    bases.pin_canonical()
    return bases


def test_identity_bases_blend_to_identity(rng):
    bases = MotionBases.identity(4, 6)
    w = rng.dirichlet(np.ones(4))
    for t in range(6):
        T = motion.blend_bases(bases, w, t)
        assert np.allclose(T.R, np.eye(3), atol=1e-14)
        assert np.allclose(T.t, 0.0, atol=1e-14)


def test_blend_at_canonical_frame_is_identity_for_any_weights(rng):
    bases = _random_bases(rng, B=5, T=7, t0=3)
    for _ in range(20):
        w = rng.dirichlet(np.ones(5))
        T = motion.blend_bases(bases, w, 3)
        assert np.allclose(T.R, np.eye(3), atol=1e-12)
        assert np.allclose(T.t, 0.0, atol=1e-12)


def test_one_hot_weights_recover_single_basis(rng):
    bases = _random_bases(rng, B=4, T=5)
    for b in range(4):
        w = np.zeros(4)
        w[b] = 1.0
        T = motion.blend_bases(bases, w, 2)
        ref = bases.basis_transform(b, 2)
        assert np.allclose(T.R, ref.R, atol=1e-13)
        assert np.allclose(T.t, ref.t, atol=1e-13)


def test_blend_matches_qr_oracle(rng):
    bases = _random_bases(rng, B=4, T=5)
    for _ in range(50):
        w = rng.dirichlet(np.ones(4))
        t = int(rng.integers(5))
        T = motion.blend_bases(bases, w, t)
        six = w @ bases.rot6d[:, t, :]
        assert np.allclose(T.R, orthonormalize_qr(six), atol=1e-12)
        assert np.allclose(T.t, w @ bases.transl[:, t, :], atol=1e-13)


def test_blend_rotation_is_orthonormal(rng):
    bases = _random_bases(rng, B=6, T=4)
    for _ in range(100):
        w = rng.dirichlet(np.ones(6))
        T = motion.blend_bases(bases, w, int(rng.integers(4)))
        assert T.orthonormality_error() < 1e-12
        assert np.isclose(np.linalg.det(T.R), 1.0, atol=1e-12)


def test_transform_gaussian_applies_rigidly(rng):
    T = RigidTransform(geo.quat_to_matrix(rng.normal(size=4)), rng.normal(size=3))
    mu0 = rng.normal(size=3)
    R0 = geo.quat_to_matrix(rng.normal(size=4))
    mu_t, R_t = motion.transform_gaussian(mu0, R0, T)
    assert np.allclose(mu_t, T.R @ mu0 + T.t, atol=1e-14)
    assert np.allclose(R_t, T.R @ R0, atol=1e-14)
    # rigid: pairwise distances between transformed points are preserved
    pts = rng.normal(size=(10, 3))
    moved = pts @ T.R.T + T.t
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-12


def test_trajectory_matches_per_frame_blend(rng):
    bases = _random_bases(rng, B=3, T=6)
    mu0 = rng.normal(size=3)
    w = rng.dirichlet(np.ones(3))
    pos, rots = motion.trajectory(mu0, w, bases)
    assert pos.shape == (6, 3)
    for t in range(6):
        T = motion.blend_bases(bases, w, t)
        mu_t, R_t = motion.transform_gaussian(mu0, np.eye(3), T)
        assert np.allclose(pos[t], mu_t, atol=1e-12)
        assert np.allclose(rots[t], T.R, atol=1e-12)


def test_trajectories_batch_matches_single(rng):
    bases = _random_bases(rng, B=4, T=5)
    n = 7
    mu0 = rng.normal(size=(n, 3))
    logits = rng.normal(size=(n, 4))
    weights = MotionCoeffs(logits).weights()
    batch = motion.trajectories(mu0, weights, bases)
    assert batch.shape == (n, 5, 3)
    for i in range(n):
        single, _ = motion.trajectory(mu0[i], weights[i], bases)
        assert np.allclose(batch[i], single, atol=1e-12)


def test_trajectories_frame_subset(rng):
    bases = _random_bases(rng, B=3, T=8)
    mu0 = rng.normal(size=(4, 3))
    w = MotionCoeffs(rng.normal(size=(4, 3))).weights()
    frames = [1, 4, 6]
    sub = motion.trajectories(mu0, w, bases, frames=frames)
    full = motion.trajectories(mu0, w, bases)
    assert np.allclose(sub, full[:, frames], atol=1e-14)


def test_blend_batch_matches_blend_bases(rng):
    bases = _random_bases(rng, B=5, T=4)
    w = MotionCoeffs(rng.normal(size=(6, 5))).weights()
    R, t = motion.blend_batch(bases, w, 2)
    for i in range(6):
        T = motion.blend_bases(bases, w[i], 2)
        assert np.allclose(R[i], T.R, atol=1e-13)
        assert np.allclose(t[i], T.t, atol=1e-13)


def test_coeff_weights_softmax_properties(rng):
    c = MotionCoeffs(rng.normal(size=(20, 6)) * 4.0)
    w = c.weights()
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert (w > 0).all()
    assert np.array_equal(c.argmax_basis(), np.argmax(w, axis=1))


def test_pin_canonical_resets_slice(rng):
    bases = MotionBases(rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 3)), t0=2)
    bases.pin_canonical()
    assert np.allclose(bases.rot6d[:, 2], motion.IDENTITY_6D)
    assert np.allclose(bases.transl[:, 2], 0.0)


def test_taped_blend_matches_value_path(rng):
    bases = _random_bases(rng, B=4, T=5)
    n = 6
    logits = rng.normal(size=(n, 4))
    weights = MotionCoeffs(logits).weights()
    R_ref, t_ref = motion.blend_batch(bases, weights, 3)

    tp = Tape()
    wv = ad.softmax(tp.const(logits), axis=-1)
    Rv, tv = motion.blend_vars(wv, tp.const(bases.rot6d[:, 3]), tp.const(bases.transl[:, 3]))
    assert np.allclose(Rv.value, R_ref, atol=1e-13)
    assert np.allclose(tv.value, t_ref, atol=1e-13)


def test_taped_motion_chain_gradcheck(rng):
    bases = _random_bases(rng, B=3, T=4)
    n = 4
    logits = Parameter(rng.normal(size=(n, 3)), "logits")
    rot = Parameter(bases.rot6d[:, 2], "rot")
    tr = Parameter(bases.transl[:, 2], "tr")
    mu0 = Parameter(rng.normal(size=(n, 3)), "mu0")
    quat = Parameter(rng.normal(size=(n, 4)), "quat")
    target = rng.normal(size=(n, 3))

    def build():
        tp = Tape()
        w = ad.softmax(tp.leaf(logits), axis=-1)
        Rb, tb = motion.blend_vars(w, tp.leaf(rot), tp.leaf(tr))
        R0 = motion.quat_to_matrix_var(tp.leaf(quat))
        mu_t, R_t = motion.apply_blend_vars(Rb, tb, tp.leaf(mu0), R0)
        return (mu_t - target).square().sum() + R_t.sum()

    worst, per = ad.check_gradients(build, [logits, rot, tr, mu0, quat])
    assert worst < 1e-5, per


def test_degenerate_blend_raises():
    # two bases whose first axes cancel under equal weights
    rot = np.tile(motion.IDENTITY_6D, (2, 2, 1))
    rot[0, 1, :3] = [1.0, 0, 0]
    rot[1, 1, :3] = [-1.0, 0, 0]
    bases = MotionBases(rot, np.zeros((2, 2, 3)), t0=0)
    with pytest.raises(DegenerateRotation):
        motion.blend_bases(bases, np.array([0.5, 0.5]), 1)


def test_bases_shape_validation():
    with pytest.raises(ShapeMismatch):
        MotionBases(np.zeros((2, 3, 5)), np.zeros((2, 3, 3)), 0)
    with pytest.raises(ShapeMismatch):
        MotionBases(np.zeros((2, 3, 6)), np.zeros((2, 4, 3)), 0)
    with pytest.raises(ShapeMismatch):
        MotionBases(np.zeros((2, 3, 6)), np.zeros((2, 3, 3)), 5)
