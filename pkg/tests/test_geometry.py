import numpy as np
import pytest

from dynsplat import geometry as geo
from dynsplat.errors import BehindCamera, DegenerateRotation, ShapeMismatch

from oracles import compose_homogeneous, orthonormalize_qr


def test_rot6d_identity():
    r = geo.Rotation6D(np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))
    assert np.allclose(geo.rot6d_to_matrix(r), np.eye(3), atol=1e-15)


def test_rot6d_matches_qr_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        six = rng.normal(size=6)
        R = geo.rot6d_to_matrix(six)
        R_ref = orthonormalize_qr(six)
        assert np.allclose(R, R_ref, atol=1e-12)


def test_rot6d_orthonormal_property():
    rng = np.random.default_rng(7)
    six = rng.normal(size=(1000, 6))
    R = geo.rot6d_to_matrix_batch(six)
    eye = np.einsum("nij,nik->njk", R, R)
    assert np.abs(eye - np.eye(3)).max() < 1e-10
    assert np.abs(np.linalg.det(R) - 1.0).max() < 1e-10


def test_rot6d_scale_invariance():
    # normalization makes the map invariant to positive rescaling of a1
    rng = np.random.default_rng(11)
    six = rng.normal(size=6)
    scaled = six.copy()
    scaled[:3] *= 7.5
    assert np.allclose(geo.rot6d_to_matrix(six), geo.rot6d_to_matrix(scaled), atol=1e-12)


def test_rot6d_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        R = geo.quat_to_matrix(rng.normal(size=4))
        six = geo.matrix_to_rot6d(R)
        assert np.allclose(geo.rot6d_to_matrix(six), R, atol=1e-12)


def test_rot6d_degenerate_raises():
    with pytest.raises(DegenerateRotation):
        geo.rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1, 0]))
    with pytest.raises(DegenerateRotation):
        geo.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_quat_roundtrip():
    rng = np.random.default_rng(9)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        R = geo.quat_to_matrix(q)
        assert np.allclose(geo.matrix_to_quat(R), q, atol=1e-10)


def test_quat_normalization_invariance():
    q = np.array([0.3, -0.2, 0.8, 0.1])
    assert np.allclose(geo.quat_to_matrix(q), geo.quat_to_matrix(3.0 * q), atol=1e-14)


def test_compose_matches_homogeneous_oracle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        a = geo.RigidTransform(geo.quat_to_matrix(rng.normal(size=4)), rng.normal(size=3))
        b = geo.RigidTransform(geo.quat_to_matrix(rng.normal(size=4)), rng.normal(size=3))
        c = geo.compose(a, b)
        R_ref, t_ref = compose_homogeneous(a.R, a.t, b.R, b.t)
        assert np.allclose(c.R, R_ref, atol=1e-13)
        assert np.allclose(c.t, t_ref, atol=1e-13)
        # result applies b first, then a
        x = rng.normal(size=3)
        assert np.allclose(c.apply(x), a.apply(b.apply(x)), atol=1e-12)


def test_inverse_composes_to_identity():
    rng = np.random.default_rng(17)
    for _ in range(50):
        T = geo.RigidTransform(geo.quat_to_matrix(rng.normal(size=4)), rng.normal(size=3))
        I = geo.compose(T, T.inverse())
        assert np.allclose(I.R, np.eye(3), atol=1e-12)
        assert np.allclose(I.t, 0.0, atol=1e-12)


def test_project_on_axis_point():
    cam = geo.make_camera(100.0, 100.0, 50.0, 50.0, geo.RigidTransform.identity(), 100, 100)
    uv, depth = geo.project_point(cam, np.array([0.0, 0.0, 1.0]))
    assert np.allclose(uv, [50.0, 50.0], atol=1e-12)
    assert depth == 1.0


def test_project_unproject_roundtrip():
    rng = np.random.default_rng(19)
    cam = geo.make_camera(120.0, 115.0, 31.0, 33.5,
                          geo.RigidTransform(geo.quat_to_matrix([0.9, 0.1, -0.2, 0.05]),
                                             np.array([0.2, -0.1, 3.0])),
                          64, 64)
    for _ in range(100):
        x = rng.normal(size=3)
        x_cam = cam.E.apply(x)
        if x_cam[2] <= geo.Z_NEAR:
            continue
        uv, depth = geo.project_point(cam, x)
        back = geo.unproject_point(cam, uv, depth)
        assert np.allclose(back, x, atol=1e-10)


def test_project_behind_camera_raises():
    cam = geo.make_camera(100.0, 100.0, 32.0, 32.0, geo.RigidTransform.identity(), 64, 64)
    with pytest.raises(BehindCamera):
        geo.project_point(cam, np.array([0.0, 0.0, -1.0]))
    with pytest.raises(BehindCamera):
        geo.project_point(cam, np.array([0.0, 0.0, 0.0]))


def test_project_points_batch_matches_single():
    rng = np.random.default_rng(23)
    cam = geo.make_camera(90.0, 95.0, 16.0, 15.0, geo.RigidTransform.identity(), 32, 32)
    pts = rng.normal(size=(40, 3)) + [0, 0, 3.0]
    uv, z, ok = geo.project_points(cam, pts)
    for i in range(40):
        if ok[i]:
            uv1, z1 = geo.project_point(cam, pts[i])
            assert np.allclose(uv[i], uv1, atol=1e-12)
            assert np.isclose(z[i], z1)


def test_unproject_points_batch():
    cam = geo.make_camera(80.0, 80.0, 20.0, 20.0,
                          geo.RigidTransform(geo.quat_to_matrix([1.0, 0.2, 0, 0]),
                                             np.array([0.0, 0.5, 2.0])), 40, 40)
    rng = np.random.default_rng(29)
    uv = rng.uniform(0, 39, size=(30, 2))
    depth = rng.uniform(0.5, 5.0, size=30)
    world = geo.unproject_points(cam, uv, depth)
    uv2, z2, ok = geo.project_points(cam, world)
    assert ok.all()
    assert np.allclose(uv2, uv, atol=1e-9)
    assert np.allclose(z2, depth, atol=1e-10)


def test_camera_validation():
    E = geo.RigidTransform.identity()
    with pytest.raises(ShapeMismatch):
        geo.make_camera(-1.0, 10.0, 5.0, 5.0, E, 10, 10)
    with pytest.raises(ShapeMismatch):
        geo.Camera(K=np.array([[10.0, 0, 5], [1.0, 10, 5], [0, 0, 1]]), E=E, width=10, height=10)
    with pytest.raises(ShapeMismatch):
        geo.make_camera(10.0, 10.0, 5.0, 5.0, E, 0, 10)


def test_rigid_transform_shape_validation():
    with pytest.raises(ShapeMismatch):
        geo.RigidTransform(np.eye(4), np.zeros(3))
    with pytest.raises(ShapeMismatch):
        geo.RigidTransform(np.eye(3), np.zeros(4))
