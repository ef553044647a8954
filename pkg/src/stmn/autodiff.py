"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value is a numpy array wrapped in a :class:`Tensor`.  Operations record
their parents and a vector-Jacobian closure; :func:`backward` replays the tape
from a scalar loss.  Gradient flow uses a fresh per-call map, so repeated
backward calls accumulate exactly additively into ``.grad``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used by numeric probes/eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``grad`` has the same shape as ``data`` once populated.  ``_parents`` and
    ``_vjp`` are tape bookkeeping: ``_vjp(g)`` returns one gradient per parent
    (or None for parents that do not require grad).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # numpy must defer to the reflected operators below, not broadcast over us
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def t(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    """Build an op result, recording the tape only when it can matter."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a, b):
    """2-D matrix product with the standard dA = G Bᵀ, dB = Aᵀ G backward."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} by {b.data.shape}"
        )
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities ---------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp values; gradient passes through entries inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a):
    a = as_tensor(a)
    # split by sign for overflow-free evaluation
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

try:  # scipy's vectorized erf when present, math.erf fallback otherwise
    from scipy.special import erf as _erf
except ImportError:  # pragma: no cover
    _erf = np.vectorize(math.erf)


def gelu(a):
    """Exact (erf-based) GeLU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def elementwise(a, kind):
    """Pointwise nonlinearity dispatch: sigmoid, gelu or relu."""
    fns = {"sigmoid": sigmoid, "gelu": gelu, "relu": relu}
    if kind not in fns:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return fns[kind](a)


# -- softmax and normalization ----------------------------------------------

def softmax_axis(a, axis, mask=None):
    """Numerically stable softmax along ``axis``.

    ``mask``, when given, is a plain additive array of 0/-inf applied before
    the softmax (it is constant w.r.t. the tape).  Slices that are entirely
    masked produce all-zero output rather than NaN.
    """
    a = as_tensor(a)
    z = a.data if mask is None else a.data + mask
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply an affine gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = tensor_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tensor_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)


# -- structure ops ------------------------------------------------------------

def gather_rows(a, indices):
    """Select rows; backward scatter-adds into the source positions."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), vjp)


def segment_sum(values, segment_ids, n_segments):
    """Sum rows of ``values`` into ``n_segments`` buckets (empty buckets → 0)."""
    values = as_tensor(values)
    seg = np.asarray(segment_ids, dtype=np.intp)
    out_shape = (n_segments,) + values.data.shape[1:]
    out = np.zeros(out_shape)
    np.add.at(out, seg, values.data)
    return _make(out, (values,), lambda g: (g[seg],))


def segment_softmax(logits, segment_ids, n_segments):
    """Softmax of a 1-D logit vector within each segment.

    Segments are the in-neighborhoods of a graph: the result sums to one per
    nonempty segment and an empty segment simply has no entries.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError("segment_softmax expects a 1-D logit vector")
    seg = np.asarray(segment_ids, dtype=np.intp)
    z = logits.data
    if z.size == 0:
        return _make(np.zeros(0), (logits,), lambda g: (np.zeros(0),))
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg, z)
    e = np.exp(z - seg_max[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def vjp(g):
        inner = np.zeros(n_segments)
        np.add.at(inner, seg, g * out)
        return (out * (g - inner[seg]),)

    return _make(out, (logits,), vjp)


# -- backward ---------------------------------------------------------------

def backward(loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Repeated calls without zeroing accumulate; tensors not on the path from
    ``loss`` are left untouched.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        got = None if not isinstance(loss, Tensor) else loss.data.shape
        raise ValueError(f"backward requires a scalar loss, got shape {got}")
    if not loss.requires_grad:
        return

    # iterative topological order (graphs are deep at L rounds of decoding)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    flow = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + pg
            else:
                flow[key] = pg


def zero_grads(params):
    for p in params:
        p.grad = None


def uniform_init(rng, shape):
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); the projection default."""
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def finite_difference_check(f, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic zero-argument callable producing a scalar
    Tensor from the current values of ``params``.  Returns
    max over entries of |analytic - numeric| / max(1, |numeric|).
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f().data)
                flat[i] = orig - h
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
                if err > worst:
                    worst = err
    zero_grads(params)
    return worst
