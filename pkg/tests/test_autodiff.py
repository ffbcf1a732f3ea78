import zlib

import numpy as np
import pytest

from dynsplat import autodiff as ad
from dynsplat.autodiff import Parameter, Tape, check_gradients
from dynsplat.errors import NonFiniteValue, NonScalarLoss


def test_quadratic_gradient_exact():
    x = Parameter(np.array([1.0, 2.0, 3.0]), "x")

    def build():
        tp = Tape()
        return tp.leaf(x).square().sum()

    loss = build()
    loss.tape.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)
    x.zero_grad()
    worst, _ = check_gradients(build, [x])
    assert worst < 1e-8


UNARY_OPS = [
    ("exp", lambda v: v.exp(), (-1.0, 1.0)),
    ("log", lambda v: v.log(), (0.5, 3.0)),
    ("sqrt", lambda v: v.sqrt(), (0.5, 3.0)),
    ("square", lambda v: v.square(), (-2.0, 2.0)),
    ("abs", lambda v: v.abs(), (0.2, 2.0)),
    ("sigmoid", lambda v: v.sigmoid(), (-3.0, 3.0)),
    ("neg", lambda v: -v, (-2.0, 2.0)),
    ("pow", lambda v: v ** 3, (0.5, 2.0)),
    ("clamp_min", lambda v: v.clamp_min(0.9), (0.5, 3.0)),
    ("clamp_max", lambda v: v.clamp_max(1.2), (0.5, 3.0)),
    ("sum_axis", lambda v: v.sum(axis=0), (-1.0, 1.0)),
    ("mean_axis", lambda v: v.mean(axis=1, keepdims=True), (-1.0, 1.0)),
    ("norm", lambda v: v.norm(axis=-1), (0.3, 2.0)),
    ("reshape", lambda v: v.reshape(-1), (-1.0, 1.0)),
    ("slice", lambda v: v[1:, 0], (-1.0, 1.0)),
]


@pytest.mark.parametrize("name,op,rng_range", UNARY_OPS, ids=[u[0] for u in UNARY_OPS])
def test_unary_primitives_gradcheck(name, op, rng_range):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst_overall = 0.0
    for trial in range(20):
        x = Parameter(rng.uniform(*rng_range, size=(3, 4)), "x")
        w = rng.normal(size=op(Tape().leaf(x)).value.shape)

        def build():
            tp = Tape()
            return (op(tp.leaf(x)) * w).sum()

        worst, _ = check_gradients(build, [x])
        worst_overall = max(worst_overall, worst)
    assert worst_overall < 1e-4


BINARY_OPS = [
    ("add", lambda a, b: a + b),
    ("sub", lambda a, b: a - b),
    ("mul", lambda a, b: a * b),
    ("div", lambda a, b: a / b),
]


@pytest.mark.parametrize("name,op", BINARY_OPS, ids=[b[0] for b in BINARY_OPS])
def test_binary_primitives_gradcheck(name, op):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(20):
        a = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), "a")
        b = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), "b")
        w = rng.normal(size=(3, 4))

        def build():
            tp = Tape()
            return (op(tp.leaf(a), tp.leaf(b)) * w).sum()

        worst, _ = check_gradients(build, [a, b])
        assert worst < 1e-4


def test_broadcasting_gradients():
    rng = np.random.default_rng(31)
    a = Parameter(rng.normal(size=(3, 1)), "a")
    b = Parameter(rng.normal(size=(4,)), "b")

    def build():
        tp = Tape()
        return ((tp.leaf(a) + tp.leaf(b)) * (tp.leaf(a) * tp.leaf(b))).sum()

    worst, _ = check_gradients(build, [a, b])
    assert worst < 1e-6


EINSUM_SPECS = [
    ("ij,nj->ni", (3, 3), (5, 3)),
    ("nij,njk->nik", (4, 3, 3), (4, 3, 3)),
    ("nij,nkj->nik", (4, 2, 3), (4, 2, 3)),
    ("nb,bk->nk", (5, 3), (3, 6)),
    ("nij,nj->ni", (5, 3, 3), (5, 3)),
]


@pytest.mark.parametrize("spec,sa,sb", EINSUM_SPECS, ids=[e[0] for e in EINSUM_SPECS])
def test_einsum_gradcheck(spec, sa, sb):
    rng = np.random.default_rng(zlib.crc32(spec.encode()))
    a = Parameter(rng.normal(size=sa), "a")
    b = Parameter(rng.normal(size=sb), "b")
    w = rng.normal(size=np.einsum(spec, a.value, b.value).shape)

    def build():
        tp = Tape()
        return (ad.einsum(spec, tp.leaf(a), tp.leaf(b)) * w).sum()

    worst, _ = check_gradients(build, [a, b])
    assert worst < 1e-6


def test_structural_ops_gradcheck(rng):
    a = Parameter(rng.normal(size=(4, 3)), "a")
    b = Parameter(rng.normal(size=(2, 3)), "b")
    idx = np.array([0, 2, 2, 3])
    mask = rng.random((6, 3)) > 0.5
    w = rng.normal(size=(6, 3))

    def build():
        tp = Tape()
        va, vb = tp.leaf(a), tp.leaf(b)
        cat = ad.concat([va, vb], axis=0)
        gathered = va.take(idx)
        stacked = ad.stack([vb[0], vb[1]], axis=0)
        sel = ad.where_mask(mask, cat, cat * 2.0)
        return (sel * w).sum() + gathered.norm(axis=-1).sum() + stacked.square().sum()

    worst, _ = check_gradients(build, [a, b])
    assert worst < 1e-6


def test_softmax_gradcheck_and_rows_sum(rng):
    x = Parameter(rng.normal(size=(5, 4)), "x")

    def build():
        tp = Tape()
        s = ad.softmax(tp.leaf(x), axis=-1)
        return (s * np.arange(4)).sum()

    s = ad.softmax(Tape().leaf(x), axis=-1).value
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert (s > 0).all()
    worst, _ = check_gradients(build, [x])
    assert worst < 1e-4


def test_cross_gradcheck(rng):
    a = Parameter(rng.normal(size=(6, 3)), "a")
    b = Parameter(rng.normal(size=(6, 3)), "b")
    w = rng.normal(size=(6, 3))

    def build():
        tp = Tape()
        return (ad.cross(tp.leaf(a), tp.leaf(b)) * w).sum()

    worst, _ = check_gradients(build, [a, b])
    assert worst < 1e-6
    # value sanity against numpy
    tp = Tape()
    assert np.allclose(ad.cross(tp.leaf(a), tp.leaf(b)).value,
                       np.cross(a.value, b.value), atol=1e-14)


def test_bilinear_sample_gradcheck(rng):
    m = Parameter(rng.random((5, 6, 2)), "m")
    uv = rng.uniform(0, 4.9, size=(7, 2))

    def build():
        tp = Tape()
        return ad.bilinear_sample(tp.leaf(m), uv).sum()

    worst, _ = check_gradients(build, [m])
    assert worst < 1e-6
    # at integer pixels the sample equals the map entry
    vals = ad.bilinear_sample(Tape().leaf(m), np.array([[2.0, 3.0]])).value
    assert np.allclose(vals[0], m.value[3, 2], atol=1e-14)


def test_backward_is_linear(rng):
    x = Parameter(rng.normal(size=(4,)), "x")

    def grad_of(fn):
        x.zero_grad()
        tp = Tape()
        loss = fn(tp.leaf(x))
        tp.backward(loss)
        return x.grad.copy()

    f = lambda v: (v.square() * np.array([1.0, 2, 3, 4])).sum()
    g = lambda v: (v.exp()).sum()
    gf, gg = grad_of(f), grad_of(g)
    combined = grad_of(lambda v: 2.5 * f(v) + (-1.25) * g(v))
    assert np.allclose(combined, 2.5 * gf - 1.25 * gg, atol=1e-12)


def test_unreachable_parameter_gets_zero_grad(rng):
    x = Parameter(rng.normal(size=3), "x")
    y = Parameter(rng.normal(size=3), "y")
    tp = Tape()
    vx = tp.leaf(x)
    tp.leaf(y)  # registered but unused by the loss
    loss = vx.square().sum()
    tp.backward(loss)
    assert np.allclose(y.grad, 0.0)
    assert not np.allclose(x.grad, 0.0)


def test_grad_accumulates_across_backwards(rng):
    x = Parameter(np.array([1.0, 2.0]), "x")
    for _ in range(2):
        tp = Tape()
        tp.backward(tp.leaf(x).square().sum())
    assert np.allclose(x.grad, 2 * np.array([2.0, 4.0]))


def test_nonscalar_loss_raises(rng):
    x = Parameter(rng.normal(size=3), "x")
    tp = Tape()
    v = tp.leaf(x).square()
    with pytest.raises(NonScalarLoss):
        tp.backward(v)


def test_nonfinite_forward_raises():
    x = Parameter(np.array([-1.0, 2.0]), "x")
    tp = Tape()
    with np.errstate(invalid="ignore"):
        v = tp.leaf(x).log()  # log of a negative -> NaN
    loss = v.sum()
    with pytest.raises(NonFiniteValue):
        tp.backward(loss)


def test_gradients_deterministic(rng):
    x = Parameter(rng.normal(size=(10, 3)), "x")

    def run():
        x.zero_grad()
        tp = Tape()
        v = tp.leaf(x)
        loss = (v.exp() * v.sigmoid()).norm(axis=-1).sum()
        tp.backward(loss)
        return x.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_mixed_tape_rejected(rng):
    x = Parameter(rng.normal(size=3), "x")
    t1, t2 = Tape(), Tape()
    v1 = t1.leaf(x)
    v2 = t2.leaf(x)
    with pytest.raises(Exception):
        _ = v1 + v2


def test_norm_zero_row_subgradient(rng):
    # coincident points feed zero-length differences into norm; the
    # backward pass must stay finite with a zero subgradient there
    x = Parameter(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]), "x")
    x.zero_grad()
    tp = Tape()
    loss = tp.leaf(x).norm(axis=-1).sum()
    tp.backward(loss)
    assert np.all(x.grad[0] == 0.0)
    assert np.allclose(x.grad[1], [0.6, 0.8, 0.0])
