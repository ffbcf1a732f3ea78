"""Reverse-mode automatic differentiation on a flat tape of array ops.

Values are numpy float64 arrays.  Building an expression records one node
per primitive op on a Tape; each node stores its parents and one
vector-Jacobian closure per parent.  Tape.backward walks the node list in
reverse and accumulates gradients into the participating Parameters.

The engine is deliberately small: only the primitives the rest of the
package needs, all with numpy-level (whole array) granularity so graphs
stay short even for large scenes.  Custom primitives with hand-written
backward passes (the rasterizer) attach through Tape.custom.

Gradients at non-differentiable points follow the usual subgradient
conventions: d|x|/dx = sign(x) with sign(0) = 0, and clamping passes zero
gradient where the clamp is active.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteValue, NonScalarLoss, ShapeMismatch


class Parameter:
    """A named optimizable array with an accumulated gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class _Node:
    __slots__ = ("parents", "vjps", "value")

    def __init__(self, parents, vjps, value):
        self.parents = parents
        self.vjps = vjps
        self.value = value


class Var:
    """Handle to a tape node.  Supports arithmetic, indexing and reductions."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = self.tape.lift(other)
        sa, sb = self.value.shape, other.value.shape
        return self.tape._push(
            (self.idx, other.idx),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
            self.value + other.value,
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self.tape.lift(other)
        sa, sb = self.value.shape, other.value.shape
        return self.tape._push(
            (self.idx, other.idx),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)),
            self.value - other.value,
        )

    def __rsub__(self, other):
        return self.tape.lift(other) - self

    def __mul__(self, other):
        other = self.tape.lift(other)
        av, bv = self.value, other.value
        return self.tape._push(
            (self.idx, other.idx),
            (lambda g: _unbroadcast(g * bv, av.shape),
             lambda g: _unbroadcast(g * av, bv.shape)),
            av * bv,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self.tape.lift(other)
        av, bv = self.value, other.value
        return self.tape._push(
            (self.idx, other.idx),
            (lambda g: _unbroadcast(g / bv, av.shape),
             lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
            av / bv,
        )

    def __rtruediv__(self, other):
        return self.tape.lift(other) / self

    def __neg__(self):
        return self.tape._push((self.idx,), (lambda g: -g,), -self.value)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise ShapeMismatch("only scalar constant exponents are supported")
        av = self.value
        return self.tape._push(
            (self.idx,), (lambda g: g * p * av ** (p - 1),), av ** p)

    # -- elementwise ---------------------------------------------------

    def exp(self):
        out = np.exp(self.value)
        return self.tape._push((self.idx,), (lambda g: g * out,), out)

    def log(self):
        av = self.value
        return self.tape._push((self.idx,), (lambda g: g / av,), np.log(av))

    def sqrt(self):
        out = np.sqrt(self.value)
        return self.tape._push((self.idx,), (lambda g: g * 0.5 / out,), out)

    def square(self):
        av = self.value
        return self.tape._push((self.idx,), (lambda g: g * 2.0 * av,), av * av)

    def abs(self):
        sgn = np.sign(self.value)
        return self.tape._push((self.idx,), (lambda g: g * sgn,), np.abs(self.value))

    def sigmoid(self):
        out = _sigmoid(self.value)
        return self.tape._push((self.idx,), (lambda g: g * out * (1.0 - out),), out)

    def clamp_min(self, lo: float):
        mask = (self.value >= lo).astype(np.float64)
        return self.tape._push(
            (self.idx,), (lambda g: g * mask,), np.maximum(self.value, lo))

    def clamp_max(self, hi: float):
        mask = (self.value <= hi).astype(np.float64)
        return self.tape._push(
            (self.idx,), (lambda g: g * mask,), np.minimum(self.value, hi))

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        av_shape = self.value.shape
        out = np.sum(self.value, axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            if axis is None:
                return np.broadcast_to(g, av_shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, av_shape).copy()

        return self.tape._push((self.idx,), (vjp,), out)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def norm(self, axis=-1, keepdims=False):
        """L2 norm along an axis; subgradient 0 where the norm is 0."""
        av = self.value
        out = np.sqrt(np.sum(av * av, axis=axis, keepdims=keepdims))
        safe = np.where(out == 0.0, 1.0, out)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            oo = safe if keepdims else np.expand_dims(safe, axis)
            return gg * av / oo

        return self.tape._push((self.idx,), (vjp,), np.asarray(out))

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.value.shape
        return self.tape._push(
            (self.idx,), (lambda g: g.reshape(src),), self.value.reshape(shape))

    def __getitem__(self, key):
        src_shape = self.value.shape
        out = self.value[key]

        def vjp(g):
            z = np.zeros(src_shape)
            np.add.at(z, key, g)
            return z

        return self.tape._push((self.idx,), (vjp,), np.array(out))

    def take(self, idx, axis=0):
        """Gather rows along an axis with an integer index array."""
        idx = np.asarray(idx)
        src_shape = self.value.shape
        out = np.take(self.value, idx, axis=axis)

        def vjp(g):
            z = np.zeros(src_shape)
            sl = [slice(None)] * len(src_shape)
            sl[axis] = idx
            np.add.at(z, tuple(sl), g)
            return z

        return self.tape._push((self.idx,), (vjp,), out)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """Append-only record of primitive ops; one Tape per forward build."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._param_nodes: dict[int, tuple[int, Parameter]] = {}

    def _push(self, parents, vjps, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(tuple(parents), tuple(vjps), value))
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, param: Parameter) -> Var:
        """Register a Parameter as a gradient sink; cached per tape."""
        key = id(param)
        hit = self._param_nodes.get(key)
        if hit is not None:
            idx, _ = hit
            return Var(self, idx, self.nodes[idx].value)
        v = self._push((), (), param.value)
        self._param_nodes[key] = (v.idx, param)
        return v

    def const(self, value) -> Var:
        return self._push((), (), np.asarray(value, dtype=np.float64))

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ShapeMismatch("mixing Vars from different tapes")
            return x
        return self.const(x)

    def custom(self, value, parent_vars, vjps) -> Var:
        """Attach a custom primitive: one output, explicit VJP per parent."""
        return self._push(tuple(v.idx for v in parent_vars), tuple(vjps), value)

    def backward(self, loss: Var):
        """Accumulate d(loss)/d(param) into every registered Parameter's .grad.

        Raises NonScalarLoss unless loss is a scalar, and NonFiniteValue if
        any forward value on the tape is NaN or Inf.  Parameters that do not
        influence the loss are left untouched (zero contribution).
        """
        if loss.tape is not self:
            raise ShapeMismatch("loss Var belongs to a different tape")
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.value.shape}")
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteValue(f"non-finite forward value at node {i}")

        grads: list = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(loss.value)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            for pid, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if grads[pid] is None:
                    grads[pid] = np.asarray(contrib, dtype=np.float64)
                else:
                    grads[pid] = grads[pid] + contrib
        for idx, param in self._param_nodes.values():
            if grads[idx] is not None:
                param.grad += grads[idx].reshape(param.value.shape)


# -- multi-operand ops ------------------------------------------------


def stack(vars: list[Var], axis: int = 0) -> Var:
    tape = vars[0].tape
    vals = [v.value for v in vars]
    out = np.stack(vals, axis=axis)
    vjps = tuple(
        (lambda g, k=k: np.take(g, k, axis=axis)) for k in range(len(vars)))
    return tape._push(tuple(v.idx for v in vars), vjps, out)


def concat(vars: list[Var], axis: int = 0) -> Var:
    tape = vars[0].tape
    vals = [v.value for v in vars]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    vjps = tuple(make_vjp(k) for k in range(len(vars)))
    return tape._push(tuple(v.idx for v in vars), vjps, out)


def einsum(spec: str, a: Var, b: Var) -> Var:
    """Two-operand einsum.

    The backward pass swaps the differentiated operand's subscripts with the
    output's, which is valid as long as neither operand repeats an index
    internally (all the contractions used in this package).
    """
    ins, out_sub = spec.replace(" ", "").split("->")
    sub_a, sub_b = ins.split(",")
    if len(set(sub_a)) != len(sub_a) or len(set(sub_b)) != len(sub_b):
        raise ShapeMismatch(f"einsum spec {spec!r}: repeated index within an operand")
    tape = a.tape
    b = tape.lift(b)
    av, bv = a.value, b.value
    out = np.einsum(spec, av, bv)

    def vjp_a(g):
        return np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, bv)

    def vjp_b(g):
        return np.einsum(f"{out_sub},{sub_a}->{sub_b}", g, av)

    return tape._push((a.idx, b.idx), (vjp_a, vjp_b), out)


def where_mask(mask: np.ndarray, a: Var, b: Var) -> Var:
    """Elementwise select with a constant boolean mask."""
    tape = a.tape
    b = tape.lift(b)
    m = np.asarray(mask, dtype=bool)
    mf = m.astype(np.float64)
    out = np.where(m, a.value, b.value)
    return tape._push(
        (a.idx, b.idx),
        (lambda g: _unbroadcast(g * mf, a.value.shape),
         lambda g: _unbroadcast(g * (1.0 - mf), b.value.shape)),
        out,
    )


def softmax(x: Var, axis: int = -1) -> Var:
    # The max shift is treated as a constant; it cancels exactly in the
    # softmax so the gradient is unchanged.
    shift = np.max(x.value, axis=axis, keepdims=True)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def cross(a: Var, b: Var) -> Var:
    """Cross product over the last axis (must have size 3)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def bilinear_sample(map2d: Var, uv: np.ndarray) -> Var:
    """Differentiable bilinear lookup of an (H, W, C) map at constant pixels.

    uv is (P, 2) in (u=col, v=row) order; out-of-range samples clamp to the
    border.  Returns (P, C).
    """
    H, W = map2d.value.shape[0], map2d.value.shape[1]
    u = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.0, W - 1.0)
    v = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    flat = map2d.reshape(H * W, -1)
    s00 = flat.take(v0 * W + u0)
    s01 = flat.take(v0 * W + u1)
    s10 = flat.take(v1 * W + u0)
    s11 = flat.take(v1 * W + u1)
    top = s00 * (1.0 - fu) + s01 * fu
    bot = s10 * (1.0 - fu) + s11 * fu
    return top * (1.0 - fv) + bot * fv


def check_gradients(build_loss, params: list[Parameter], step: float = 1e-5):
    """Compare taped gradients against central finite differences.

    build_loss is a zero-argument callable that constructs a fresh tape from
    the current Parameter values and returns the scalar loss Var.  Returns
    (max_rel_error, per_param dict).  Relative error per element is
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    per_param = {}
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        aflat = analytic[p.name].reshape(-1)
        err = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp = float(build_loss().value)
            flat[k] = orig - step
            lm = float(build_loss().value)
            flat[k] = orig
            central = (lp - lm) / (2.0 * step)
            rel = abs(aflat[k] - central) / max(abs(aflat[k]), abs(central), 1e-8)
            err = max(err, rel)
        per_param[p.name] = err
        worst = max(worst, err)
    return worst, per_param
