"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records Node objects in creation order. Each op node keeps its parent
references and one vector-Jacobian closure per differentiable parent; backward
walks the tape in reverse creation order, so every node's adjoint is complete
before it is distributed. Constants (plain numpy arrays or scalars) never
become nodes, they are captured by the closures directly.

Everything is float64. Gradients of non-smooth spots follow the conventions
the downstream estimators need: |x| and the Euclidean norm use subgradient 0
at 0, sort permutations are frozen at forward time.
"""

import numpy as np
from scipy import special


class GraphError(ValueError):
    """Raised for structural misuse: shape mismatch, non-scalar backward root,
    foreign-tape operands, unmarked leaves."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared. Carries the op tag that produced it."""

    def __init__(self, op_tag, detail=""):
        self.op_tag = op_tag
        msg = "non-finite value produced by op '%s'" % op_tag
        if detail:
            msg += " (%s)" % detail
        super().__init__(msg)


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if grad.shape != tuple(shape):
        grad = grad.reshape(shape)
    return grad


class Node:
    """One value in the computation graph.

    values     : float64 ndarray (0-d for scalars)
    op         : tag of the producing operation ("input", "constant", "mul", ...)
    parents    : tuple of parent Nodes
    vjps       : per-parent closures mapping the incoming adjoint to the
                 parent's contribution; None for parents without gradient flow
    adjoint    : accumulated during one backward pass, then released for
                 interior nodes
    """

    __slots__ = ("tape", "values", "op", "parents", "vjps", "requires_grad", "adjoint")

    # make numpy defer to our reflected operators instead of broadcasting
    # elementwise over a Node object
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, tape, values, op, parents=(), vjps=(), requires_grad=None):
        self.tape = tape
        self.values = values
        self.op = op
        self.parents = parents
        self.vjps = vjps
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.adjoint = None

    @property
    def shape(self):
        return self.values.shape

    # arithmetic sugar; constants on either side stay plain arrays
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return "Node(op=%s, shape=%s)" % (self.op, self.values.shape)


class Tape:
    """Ordered node store for one evaluation; single-threaded by design.

    check_finite=True makes every op validate its output and raise
    NonFiniteError with the offending op tag; off by default because the
    scan costs a full pass over each intermediate.
    """

    def __init__(self, check_finite=False):
        self.nodes = []
        self.check_finite = check_finite

    def _register(self, node):
        if self.check_finite and not np.all(np.isfinite(node.values)):
            raise NonFiniteError(node.op)
        self.nodes.append(node)
        return node

    def input(self, values):
        """A leaf eligible for gradients."""
        return self._register(Node(self, _as_array(values), "input", requires_grad=True))

    def constant(self, values):
        return self._register(Node(self, _as_array(values), "constant", requires_grad=False))

    def backward(self, seeds):
        """Accumulate adjoints from {node: seed_array} down to the leaves.

        Interior adjoints are freed as soon as they have been distributed,
        which keeps peak memory near the largest single op. Leaf adjoints
        survive until collected (see gradient / leaf_adjoint).
        """
        for node, seed in seeds.items():
            if node.tape is not self:
                raise GraphError("seed node belongs to a different tape")
            seed = _as_array(seed)
            if seed.shape != node.values.shape:
                raise GraphError(
                    "seed shape %s does not match node shape %s" % (seed.shape, node.values.shape)
                )
            node.adjoint = seed if node.adjoint is None else node.adjoint + seed
        for node in reversed(self.nodes):
            grad = node.adjoint
            if grad is None or not node.requires_grad:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                contrib = vjp(grad)
                parent.adjoint = contrib if parent.adjoint is None else parent.adjoint + contrib
            if node.parents:
                node.adjoint = None

    def gradient(self, output, leaves):
        """d(output)/d(leaf) for a scalar output; zeros for unreachable leaves."""
        if output.values.shape != ():
            raise GraphError("gradient root must be scalar, got shape %s" % (output.values.shape,))
        for leaf in leaves:
            if leaf.op != "input":
                raise GraphError("gradient target is not a marked input leaf")
        self.backward({output: np.ones(())})
        grads = []
        for leaf in leaves:
            grads.append(leaf.adjoint if leaf.adjoint is not None else np.zeros(leaf.values.shape))
            leaf.adjoint = None
        return grads


def _make(tape, op, values, parents, vjps):
    return tape._register(Node(tape, values, op, tuple(parents), tuple(vjps)))


def _tape_of(*operands):
    tape = None
    for x in operands:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise GraphError("operands belong to different tapes")
    if tape is None:
        raise GraphError("at least one operand must be a Node")
    return tape


# ---------------------------------------------------------------- binary ops

def add(a, b):
    tape = _tape_of(a, b)
    av = a.values if isinstance(a, Node) else _as_array(a)
    bv = b.values if isinstance(b, Node) else _as_array(b)
    out = av + bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, s=av.shape: _unbroadcast(g, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, s=bv.shape: _unbroadcast(g, s))
    return _make(tape, "add", out, parents, vjps)


def sub(a, b):
    tape = _tape_of(a, b)
    av = a.values if isinstance(a, Node) else _as_array(a)
    bv = b.values if isinstance(b, Node) else _as_array(b)
    out = av - bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, s=av.shape: _unbroadcast(g, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, s=bv.shape: _unbroadcast(-g, s))
    return _make(tape, "sub", out, parents, vjps)


def mul(a, b):
    tape = _tape_of(a, b)
    av = a.values if isinstance(a, Node) else _as_array(a)
    bv = b.values if isinstance(b, Node) else _as_array(b)
    out = av * bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s))
    return _make(tape, "mul", out, parents, vjps)


def div(a, b):
    tape = _tape_of(a, b)
    av = a.values if isinstance(a, Node) else _as_array(a)
    bv = b.values if isinstance(b, Node) else _as_array(b)
    out = av / bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=av.shape: _unbroadcast(g / o, s))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=bv, q=out, s=bv.shape: _unbroadcast(-g * q / o, s))
    return _make(tape, "div", out, parents, vjps)


def neg(a):
    return _make(a.tape, "neg", -a.values, [a], [lambda g: -g])


def power(a, exponent):
    """a**exponent; exponent may be a constant or a Node (then a > 0 required)."""
    if isinstance(exponent, Node):
        tape = _tape_of(a, exponent)
        av = a.values if isinstance(a, Node) else _as_array(a)
        ev = exponent.values
        out = av ** ev
        parents, vjps = [], []
        if isinstance(a, Node):
            parents.append(a)
            vjps.append(lambda g, x=av, e=ev, s=av.shape: _unbroadcast(g * e * x ** (e - 1.0), s))
        parents.append(exponent)
        vjps.append(lambda g, o=out, x=av, s=ev.shape: _unbroadcast(g * o * np.log(x), s))
        return _make(tape, "power", out, parents, vjps)
    e = float(exponent)
    out = a.values ** e
    return _make(a.tape, "power", out, [a], [lambda g, x=a.values: g * e * x ** (e - 1.0)])


# ----------------------------------------------------------------- unary ops

def exp(a):
    out = np.exp(a.values)
    return _make(a.tape, "exp", out, [a], [lambda g, o=out: g * o])


def log(a):
    return _make(a.tape, "log", np.log(a.values), [a], [lambda g, x=a.values: g / x])


def sqrt(a):
    out = np.sqrt(a.values)
    return _make(a.tape, "sqrt", out, [a], [lambda g, o=out: g * 0.5 / o])


def absolute(a):
    # subgradient 0 at 0 keeps the energy kernel flat at coincident points
    return _make(a.tape, "abs", np.abs(a.values), [a], [lambda g, x=a.values: g * np.sign(x)])


def erf(a):
    c = 2.0 / np.sqrt(np.pi)
    out = special.erf(a.values)
    return _make(a.tape, "erf", out, [a], [lambda g, x=a.values: g * c * np.exp(-x * x)])


def norm_ppf(a):
    """Inverse standard-normal CDF; derivative 1/phi(out)."""
    out = special.ndtri(a.values)
    d = np.sqrt(2.0 * np.pi) * np.exp(0.5 * out * out)
    return _make(a.tape, "norm_ppf", out, [a], [lambda g, dd=d: g * dd])


def lgamma(a):
    out = special.gammaln(a.values)
    return _make(a.tape, "lgamma", out, [a], [lambda g, x=a.values: g * special.digamma(x)])


def softplus(a):
    out = np.logaddexp(0.0, a.values)
    return _make(a.tape, "softplus", out, [a], [lambda g, x=a.values: g * special.expit(x)])


def sigmoid(a):
    out = special.expit(a.values)
    return _make(a.tape, "sigmoid", out, [a], [lambda g, o=out: g * o * (1.0 - o)])


def clip(a, lo, hi):
    """Clamp; gradient passes only through the interior (kept entries)."""
    out = np.clip(a.values, lo, hi)
    mask = (a.values > lo) & (a.values < hi)
    return _make(a.tape, "clip", out, [a], [lambda g, m=mask: g * m])


def softmax(a):
    """Softmax over the trailing axis."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, o=out):
        return (g - (g * o).sum(axis=-1, keepdims=True)) * o

    return _make(a.tape, "softmax", out, [a], [vjp])


# ---------------------------------------------------------------- reductions

def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    out = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.values.shape
    return _make(
        a.tape, "sum", out, [a], [lambda g: _expand_like(g, shape, axis, keepdims).copy()]
    )


def reduce_mean(a, axis=None, keepdims=False):
    out = a.values.mean(axis=axis, keepdims=keepdims)
    shape = a.values.shape
    n = a.values.size if axis is None else shape[axis]
    return _make(
        a.tape, "mean", out, [a], [lambda g: _expand_like(g, shape, axis, keepdims) / n]
    )


def variance(a, axis=-1, keepdims=False):
    """Sample variance with divisor n-1 along one axis."""
    n = a.values.shape[axis]
    if n < 2:
        raise GraphError("variance needs at least 2 entries along the axis")
    centered = a.values - a.values.mean(axis=axis, keepdims=True)
    out = (centered * centered).sum(axis=axis, keepdims=keepdims) / (n - 1)
    shape = a.values.shape

    def vjp(g, c=centered):
        return _expand_like(g, shape, axis, keepdims) * (2.0 / (n - 1)) * c

    return _make(a.tape, "variance", out, [a], [vjp])


def norm_last(a):
    """Euclidean norm along the trailing axis; subgradient 0 at the origin."""
    sq = (a.values * a.values).sum(axis=-1)
    out = np.sqrt(sq)

    def vjp(g, x=a.values, o=out):
        safe = np.where(o > 0.0, o, 1.0)
        return (g / safe * np.where(o > 0.0, 1.0, 0.0))[..., None] * x

    return _make(a.tape, "norm_last", out, [a], [vjp])


# ------------------------------------------------------- indexing / shaping

def take(a, indices, axis):
    """Select slices along `axis` by an integer index array (a constant)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.values, idx, axis=axis)
    shape = a.values.shape

    def vjp(g):
        z = np.zeros(shape)
        zm = np.moveaxis(z, axis, 0)
        np.add.at(zm, idx, np.moveaxis(g, axis, 0))
        return z

    return _make(a.tape, "take", out, [a], [vjp])


def take_last(a, indices):
    """out[..., j] = a[..., indices[j]]; duplicate indices accumulate in reverse."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.values[..., idx]
    shape = a.values.shape

    def vjp(g):
        z = np.zeros(shape)
        z2 = z.reshape(-1, shape[-1])
        g2 = g.reshape(-1, idx.size)
        np.add.at(z2, (np.arange(z2.shape[0])[:, None], idx[None, :]), g2)
        return z

    return _make(a.tape, "take_last", out, [a], [vjp])


def sort_last(a):
    """Sort along the trailing axis; the permutation is frozen at forward time
    and gradients flow through the gathered values only."""
    perm = np.argsort(a.values, axis=-1, kind="stable")
    out = np.take_along_axis(a.values, perm, axis=-1)

    def vjp(g, p=perm):
        z = np.zeros(a.values.shape)
        np.put_along_axis(z, p, g, axis=-1)
        return z

    return _make(a.tape, "sort_last", out, [a], [vjp])


def reshape(a, shape):
    out = a.values.reshape(shape)
    old = a.values.shape
    return _make(a.tape, "reshape", out, [a], [lambda g: g.reshape(old)])


def concat(nodes, axis=0):
    nodes = list(nodes)
    tape = _tape_of(*nodes)
    out = np.concatenate([n.values for n in nodes], axis=axis)
    vjps = []
    start = 0
    for n in nodes:
        width = n.values.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + width)
        vjps.append(lambda g, s=tuple(sl): g[s])
        start += width
    return _make(tape, "concat", out, nodes, vjps)


def stack(nodes, axis=-1):
    nodes = list(nodes)
    tape = _tape_of(*nodes)
    out = np.stack([n.values for n in nodes], axis=axis)
    vjps = [lambda g, i=i: np.take(g, i, axis=axis) for i in range(len(nodes))]
    return _make(tape, "stack", out, nodes, vjps)


def design_matmul(coefs, design):
    """Row-wise linear predictor: out[..., r] = sum_k coefs[..., k] * design[r, k].

    `design` is a constant (R, K) matrix. One fused op instead of K
    multiply-adds keeps the tape small for the wide models.
    """
    X = _as_array(design)
    out = np.einsum("...k,rk->...r", coefs.values, X)

    def vjp(g):
        return np.einsum("...r,rk->...k", g, X)

    return _make(coefs.tape, "design_matmul", out, [coefs], [vjp])


# -------------------------------------------------------------- test oracle

def finite_difference(fn, leaves, h=1e-5):
    """Central-difference gradient oracle.

    fn maps a dict of plain float64 arrays (same keys as `leaves`) to a float;
    returns per-key gradient arrays (f(x+h)-f(x-h))/2h, one coordinate at a
    time.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: _as_array(v).copy() for k, v in leaves.items()}
    grads = {}
    for key, arr in base.items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn(base)
            flat[i] = keep - h
            down = fn(base)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads[key] = g
    return grads
