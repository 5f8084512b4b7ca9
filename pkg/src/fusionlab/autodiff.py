"""Tape-based reverse-mode differentiation on dense float64 matrices.

Every differentiable function here accepts either plain ndarrays (pure
forward evaluation) or `Var` handles bound to a `Tape` (forward value plus
a recorded node whose vjp closure propagates gradients). Losses are scalar
nodes; `grad` walks the tape once in reverse index order, which is a valid
topological order because nodes are appended as they are created.

log() applies a global 1e-10 floor so that downstream divergences stay
finite on zero-probability entries.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError, TapeError

LOG_FLOOR = 1e-10

_GELU_C = np.sqrt(2.0 / np.pi)


class Tape:
    """Append-only record of primitive operations for one scalar loss."""

    def __init__(self):
        self.nodes = []

    def var(self, value, name="param"):
        """Register a leaf (trainable or constant input)."""
        a = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ShapeError(f"{name}: non-finite leaf value")
        return self._push("leaf", (), a, None)

    def _push(self, op, parents, value, vjp):
        self.nodes.append(_Node(op, tuple(p.index for p in parents), value, vjp))
        return Var(self, len(self.nodes) - 1)


class _Node:
    __slots__ = ("op", "parents", "value", "vjp")

    def __init__(self, op, parents, value, vjp):
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp


class Var:
    """Handle to one tape node; supports numpy-flavored operators."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(op={self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def _is_var(x):
    return isinstance(x, Var)


def _tape_of(*args):
    tapes = {a.tape for a in args if _is_var(a)}
    if len(tapes) > 1:
        raise TapeError("operands live on different tapes")
    return tapes.pop() if tapes else None


def _lift(tape, x):
    if _is_var(x):
        return x
    return tape.var(np.asarray(x, dtype=np.float64), name="const")


def _val(x):
    return x.value if _is_var(x) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op, a, b, fwd, vjp_factory):
    tape = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = fwd(va, vb)
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(op, (a, b), out, vjp_factory(va, vb, out))


def _unary(op, a, fwd, vjp_factory):
    tape = _tape_of(a)
    va = _val(a)
    out = fwd(va)
    if tape is None:
        return out
    return tape._push(op, (a,), out, vjp_factory(va, out))


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b):
    va, vb = _val(a), _val(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {va.shape} x {vb.shape}")
    return _binary("matmul", a, b, lambda x, y: x @ y,
                   lambda x, y, out: lambda g: (g @ y.T, x.T @ g))


def transpose(a):
    return _unary("transpose", a, lambda x: x.T.copy(),
                  lambda x, out: lambda g: (g.T.copy(),))


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda x, y, out: lambda g: (_unbroadcast(g, x.shape),
                                                _unbroadcast(g, y.shape)))


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda x, y, out: lambda g: (_unbroadcast(g, x.shape),
                                                _unbroadcast(-g, y.shape)))


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda x, y, out: lambda g: (_unbroadcast(g * y, np.shape(x)),
                                                _unbroadcast(g * x, np.shape(y))))


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda x, y, out: lambda g: (_unbroadcast(g / y, np.shape(x)),
                                                _unbroadcast(-g * x / (y * y), np.shape(y))))


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda x, out: lambda g: (g * (x > 0.0),))


def square(a):
    return _unary("square", a, lambda x: x * x,
                  lambda x, out: lambda g: (2.0 * x * g,))


def log(a):
    """Natural log with the global 1e-10 floor; flat (zero grad) below it."""
    def fwd(x):
        return np.log(np.maximum(x, LOG_FLOOR))

    def vjp_factory(x, out):
        return lambda g: (np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0),)

    return _unary("log", a, fwd, vjp_factory)


def exp(a):
    return _unary("exp", a, lambda x: np.exp(x),
                  lambda x, out: lambda g: (g * out,))


def tanh(a):
    return _unary("tanh", a, lambda x: np.tanh(x),
                  lambda x, out: lambda g: (g * (1.0 - out * out),))


def gelu(a):
    """GeLU, tanh approximation."""
    def fwd(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))

    def vjp_factory(x, out):
        def vjp(g):
            t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
            du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
        return vjp

    return _unary("gelu", a, fwd, vjp_factory)


def row_sum(a):
    return _unary("row_sum", a, lambda x: x.sum(axis=1, keepdims=True),
                  lambda x, out: lambda g: (np.broadcast_to(g, x.shape).copy(),))


def total_sum(a):
    return _unary("sum", a, lambda x: np.float64(x.sum()),
                  lambda x, out: lambda g: (np.full_like(x, float(g)),))


def mean(a):
    return _unary("mean", a, lambda x: np.float64(x.mean()),
                  lambda x, out: lambda g: (np.full_like(x, float(g) / x.size),))


def row_softmax(a):
    """Row-stochastic softmax with max subtraction for stability."""
    def fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def vjp_factory(x, out):
        def vjp(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            return (out * (g - dot),)
        return vjp

    return _unary("row_softmax", a, fwd, vjp_factory)


def row_l2_normalize(a):
    """Scale each row to unit Euclidean norm; zero rows are an error."""
    va = _val(a)
    norms = np.linalg.norm(va, axis=1)
    bad = np.where(norms < 1e-300)[0]
    if bad.size:
        raise DegenerateInputError(f"zero row at index {int(bad[0])} cannot be normalized")

    def fwd(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def vjp_factory(x, out):
        def vjp(g):
            n = np.linalg.norm(x, axis=1, keepdims=True)
            dot = (g * out).sum(axis=1, keepdims=True)
            return ((g - out * dot) / n,)
        return vjp

    return _unary("row_l2_normalize", a, fwd, vjp_factory)


def row_normalize(a):
    """Divide each row by its sum (caller guarantees positive sums)."""
    def fwd(x):
        return x / x.sum(axis=1, keepdims=True)

    def vjp_factory(x, out):
        def vjp(g):
            s = x.sum(axis=1, keepdims=True)
            dot = (g * out).sum(axis=1, keepdims=True)
            return ((g - dot) / s,)
        return vjp

    return _unary("row_normalize", a, fwd, vjp_factory)


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row standardization over features, then affine (gain, bias)."""
    tape = _tape_of(a, gain, bias)
    x, gn, bs = _val(a), _val(gain), _val(bias)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gn + bs
    if tape is None:
        return out
    a, gain, bias = _lift(tape, a), _lift(tape, gain), _lift(tape, bias)

    def vjp(g):
        m = x.shape[1]
        dgain = _unbroadcast(g * xhat, gn.shape)
        dbias = _unbroadcast(g, bs.shape)
        dxhat = g * gn
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx, dgain, dbias)

    return tape._push("layer_norm", (a, gain, bias), out, vjp)


def hstack(parts):
    """Concatenate matrices along columns."""
    tape = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = np.hstack(vals)
    if tape is None:
        return out
    parts = [_lift(tape, p) for p in parts]
    widths = [v.shape[1] for v in vals]

    def vjp(g):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at:at + w].copy())
            at += w
        return tuple(grads)

    return tape._push("hstack", tuple(parts), out, vjp)


def logsumexp_rows(a):
    """Row-wise log(sum(exp)), exact gradients, max-subtracted internally."""
    def fwd(x):
        m = x.max(axis=1, keepdims=True)
        return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))

    def vjp_factory(x, out):
        def vjp(g):
            m = x.max(axis=1, keepdims=True)
            e = np.exp(x - m)
            return (g * e / e.sum(axis=1, keepdims=True),)
        return vjp

    return _unary("logsumexp_rows", a, fwd, vjp_factory)


# ---------------------------------------------------------------------------
# gradients


def grad(loss, params):
    """Reverse-mode gradients of a scalar loss for each param Var.

    Params that do not influence the loss get zero gradients. Raises
    TapeError for params living on a different tape (or non-Var inputs).
    """
    if not _is_var(loss):
        raise TapeError("loss must be a Var recorded on a tape")
    if np.shape(loss.value) != ():
        raise TapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    tape = loss.tape
    for p in params:
        if not _is_var(p) or p.tape is not tape:
            raise TapeError("param is not registered on the loss tape")

    nodes = tape.nodes
    grads = [None] * (loss.index + 1)
    grads[loss.index] = np.float64(1.0)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    out = []
    for p in params:
        g = grads[p.index] if p.index <= loss.index else None
        out.append(np.zeros_like(np.asarray(p.value)) if g is None else np.asarray(g))
    return out


def finite_diff(loss_fn, at, h=1e-5):
    """Central-difference gradient estimate of loss_fn at `at`, entry by entry."""
    if h <= 0:
        raise ValueError("finite_diff requires h > 0")
    at = np.asarray(at, dtype=np.float64)
    out = np.empty_like(at)
    flat = at.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(loss_fn(at))
        flat[i] = keep - h
        dn = float(loss_fn(at))
        flat[i] = keep
        if not (np.isfinite(up) and np.isfinite(dn)):
            where = tuple(int(v) for v in np.unravel_index(i, at.shape))
            raise DegenerateInputError(
                f"non-finite evaluation while perturbing entry {where}")
        gflat[i] = (up - dn) / (2.0 * h)
    return out


def relative_error(g, ref):
    """Sup-norm relative disagreement between a gradient and its reference."""
    g, ref = np.asarray(g), np.asarray(ref)
    denom = max(np.abs(ref).max(), 1e-12)
    return float(np.abs(g - ref).max() / denom)
