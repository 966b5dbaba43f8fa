"""Dense float64 arrays with reverse-mode differentiation.

Every array-valued quantity in the package flows through :class:`DiffTensor`.
Operations never broadcast, with the single exception of :func:`scalar_mul`;
any other shape coercion has to be spelled out with ``reshape``, ``concat``
or a ``matmul`` against a column of ones.

Node ids come from one process-wide counter, so creation order is a valid
topological order and backward simply walks the reachable nodes by
descending id.
"""

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an op kind."""

    def __init__(self, kind, *shapes, detail=""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{kind}: incompatible extents {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kind = kind
        self.shapes = shapes


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar; all of these route through the checked ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffTensor) and other.size != 1:
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return DiffTensor(data, requires_grad=requires_grad, name=name)


def constant(data):
    return DiffTensor(data, requires_grad=False)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    # never update in place: upstream buffers are shared between parents
    if t.grad is None:
        t.grad = g.reshape(t.shape)
    else:
        t.grad = t.grad + g.reshape(t.shape)


@contextlib.contextmanager
def no_grad():
    """Build no graph records inside the block (per thread)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _result(kind, value, parents, backward_fn):
    out = DiffTensor.__new__(DiffTensor)
    out.data = value
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out.requires_grad = (not getattr(_state, "no_grad", False)
                         and any(p.requires_grad for p in parents))
    out.op = kind
    if out.requires_grad:
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.parents = ()
        out._backward = None
    return out


def _as_tensor(x):
    return x if isinstance(x, DiffTensor) else constant(x)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, a.shape, b.shape)


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul_elementwise", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result("mul_elementwise", a.data * b.data, (a, b), bw)


def scalar_mul(x, s):
    """Multiply every element of ``x`` by ``s``.

    ``s`` is a python number or a single-element tensor; in the latter case
    it is differentiable too. This is the only broadcasting op.
    """
    x = _as_tensor(x)
    if isinstance(s, DiffTensor):
        if s.size != 1:
            raise ShapeError("scalar_mul", x.shape, s.shape, detail="scale must have one element")
        sv = s.data.reshape(-1)[0]

        def bw(g):
            if x.requires_grad:
                _accumulate(x, g * sv)
            if s.requires_grad:
                _accumulate(s, np.array([np.sum(g * x.data)]))

        return _result("scalar_mul", x.data * sv, (x, s), bw)

    sv = float(s)

    def bw_const(g):
        _accumulate(x, g * sv)

    return _result("scalar_mul", x.data * sv, (x,), bw_const)


def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` is ``(..., n, k)``; ``b`` is either ``(k, m)`` (shared weight) or
    ``(..., k, m)`` with exactly the same leading extents as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="leading extents differ")
    k, n = b.shape[-2], b.shape[-1]
    if shared and k == 1:
        # outer product (the bias path): one product per entry, far cheaper than BLAS
        out = a.data * b.data.reshape(n)
    elif shared:
        # fold leading axes into rows: one BLAS call instead of a stacked loop
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        if shared:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accumulate(a, g2 @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, k).T @ g2)
            return
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result("matmul", out, (a, b), bw)


# ---------------------------------------------------------- structural ops

def concat(tensors: Sequence[DiffTensor], axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    nd = tensors[0].data.ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat_last_axis" if ax == nd - 1 else "concat", ref, t.shape,
                             detail=f"non-concat extents must agree (axis {ax})")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    kind = "concat_last_axis" if ax == nd - 1 else "concat"
    return _result(kind, np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def concat_last_axis(tensors):
    return concat(tensors, axis=-1)


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s <= 0 for s in shape):
        raise ShapeError("reshape", x.shape, shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _result("reshape", x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    """Permute axes; ``axes`` is a full permutation as in ``np.transpose``."""
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {axes}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result("transpose", np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw)


def slice_(x, index):
    """Basic (non-fancy) indexing that keeps every axis.

    ``index`` is a tuple of python ``slice`` objects, one per leading axis.
    """
    x = _as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    if any(not isinstance(s, slice) for s in index) or len(index) > x.data.ndim:
        raise ShapeError("slice", x.shape, detail="index must be a tuple of slices")
    out = x.data[index]
    if out.size == 0:
        raise ShapeError("slice", x.shape, detail=f"empty selection {index}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _result("slice", out.copy(), (x,), bw)


# ------------------------------------------------------------- pointwise ops

_TINY = np.nextafter(0.0, 1.0)
_BELOW_ONE = np.nextafter(1.0, 0.0)


def sigmoid(x):
    x = _as_tensor(x)
    # split by sign so large |x| never overflows exp
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the range open: past |x| ~ 37 the float result would round onto 0 or 1
    out = np.clip(out, _TINY, _BELOW_ONE)

    def bw(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result("sigmoid", out, (x,), bw)


def tanh(x):
    x = _as_tensor(x)
    out = np.clip(np.tanh(x.data), -_BELOW_ONE, _BELOW_ONE)

    def bw(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result("tanh", out, (x,), bw)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        _accumulate(x, g * mask)

    return _result("relu", out, (x,), bw)


def log(x):
    x = _as_tensor(x)

    def bw(g):
        _accumulate(x, g / x.data)

    return _result("log", np.log(x.data), (x,), bw)


# ------------------------------------------------------- row-wise (last axis)

def layernorm(x, gamma=None, beta=None, eps=LN_EPS):
    """Normalise over the last axis, then apply optional per-channel affine."""
    x = _as_tensor(x)
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError("layernorm", x.shape, p.shape, detail="affine must be (channels,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta is not None and beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            gx_mean = gx.mean(axis=-1, keepdims=True)
            gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - gx_mean - xhat * gx_xhat))

    return _result("layernorm", out, parents, bw)


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result("softmax_last_axis", out, (x,), bw)


softmax_last_axis = softmax


def log_softmax(x):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _result("log_softmax_last_axis", out, (x,), bw)


# --------------------------------------------------------------- reductions

def sum_(x):
    x = _as_tensor(x)

    def bw(g):
        _accumulate(x, np.full(x.shape, g.reshape(-1)[0]))

    return _result("sum", np.array([x.data.sum()]), (x,), bw)


def mean(x):
    x = _as_tensor(x)
    n = x.size

    def bw(g):
        _accumulate(x, np.full(x.shape, g.reshape(-1)[0] / n))

    return _result("mean", np.array([x.data.mean()]), (x,), bw)


OPS = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "concat_last_axis": concat_last_axis,
    "reshape": reshape,
    "slice": slice_,
    "transpose": transpose,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "layernorm": layernorm,
    "softmax_last_axis": softmax,
    "log_softmax_last_axis": log_softmax,
    "mean": mean,
    "sum": sum_,
    "scalar_mul": scalar_mul,
}


def tensor_op(kind, inputs, **kwargs):
    """Dispatch by op name; mostly useful for table-driven tests."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat_last_axis":
        return fn(list(inputs))
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: int


@dataclass
class ComputationGraph:
    """Reachable records of one loss, in creation (topological) order."""

    records: list = field(default_factory=list)

    @classmethod
    def of(cls, root):
        return cls([OpRecord(t.op, tuple(p.node_id for p in t.parents), t.node_id)
                    for t in _reachable(root) if t.parents])


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Intermediate gradients are discarded afterwards; leaf gradients add up
    across calls until :func:`zero_grad` is used.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss.requires_grad:
        return
    if not loss.parents:
        _accumulate(loss, np.ones_like(loss.data))
        return
    nodes = _reachable(loss)
    interior = [t for t in nodes if t.parents]
    # interior buffers are scratch; leaves keep accumulating
    for t in interior:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(interior):
        if t.grad is not None:
            t._backward(t.grad)
    for t in interior:
        t.grad = None


def zero_grad(params):
    for p in params:
        p.grad = None
