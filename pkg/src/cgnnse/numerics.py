"""Dense numeric kernel: special functions and a small reverse-mode tape.

Matrices are plain ``numpy.float64`` arrays.  Differentiable values are
wrapped in :class:`Tensor`; every primitive below records itself on the
active :class:`Tape` when one of its inputs requires a gradient, and
:func:`gradient` replays the tape backwards.

The error function is evaluated with our own series / continued fraction
pair instead of ``math.erf`` so results do not depend on the platform libm.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# erf series is used below this |z|, the erfc continued fraction above it
_ERF_SPLIT = 2.5
_SERIES_MAX_TERMS = 120
_CF_DEPTH = 40
# beyond these |z|, erf is +-1 to double precision and erfc underflows
_ERF_SATURATE = 9.5
_ERFC_UNDERFLOW = 27.0


class ShapeError(ValueError):
    pass


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _erf_series(z):
    # erf(z) = 2/sqrt(pi) exp(-z^2) sum_n 2^n z^(2n+1) / (2n+1)!!
    # every term is positive, so there is no cancellation
    z2 = z * z
    term = z.copy()
    total = z.copy()
    for n in range(1, _SERIES_MAX_TERMS):
        term = term * (2.0 * z2 / (2 * n + 1))
        total = total + term
        if n % 8 == 0 and np.all(term <= 1e-17 * total):
            break
    return 2.0 / SQRT_PI * np.exp(-z2) * total


def _erfc_cf(z):
    # erfc(z) = exp(-z^2)/sqrt(pi) / (z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
    # evaluated bottom-up at fixed depth, valid for z >= _ERF_SPLIT
    tail = z.copy()
    for k in range(_CF_DEPTH, 0, -1):
        tail = z + (0.5 * k) / tail
    return np.exp(-z * z) / SQRT_PI / tail


def _erfc_positive(a):
    """erfc for a >= 0, plus a flag of where the series branch was used."""
    out = np.zeros_like(a)
    small = a < _ERF_SPLIT
    mid = ~small & (a < _ERFC_UNDERFLOW)
    if small.any():
        out[small] = 1.0 - _erf_series(a[small])
    if mid.any():
        out[mid] = _erfc_cf(a[mid])
    return out, small


def erf(z):
    """Gauss error function, elementwise.  Absolute error below 1e-14."""
    z = _as_array(z)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    a = np.abs(z)
    out = np.ones_like(a)
    small = a < _ERF_SPLIT
    mid = ~small & (a < _ERF_SATURATE)
    if small.any():
        out[small] = _erf_series(a[small])
    if mid.any():
        out[mid] = 1.0 - _erfc_cf(a[mid])
    out = np.copysign(out, z)
    return float(out[0]) if scalar else out


def erfc(z):
    """Complementary error function with full relative accuracy for z >= 2.5."""
    z = _as_array(z)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    a = np.abs(z)
    tail, _ = _erfc_positive(a)
    out = np.where(z >= 0, tail, 2.0 - tail)
    return float(out[0]) if scalar else out


def norm_pdf(z):
    z = _as_array(z)
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def norm_cdf(z):
    z = _as_array(z)
    # lower tail through erfc to keep relative accuracy for very negative z
    return 0.5 * erfc(-z / SQRT2)


def norm_sf(z):
    """Upper tail Q(z) of the standard normal."""
    return norm_cdf(-_as_array(z))


def nr(z):
    """E[max(g, 0)] for g ~ N(z, 1):  phi(z) + z * Phi(z).

    Clamped to ``max(z, 0)`` from below, which the exact function never
    crosses; rounding near saturation otherwise leaves it a few ulps short.
    """
    z = _as_array(z)
    out = norm_pdf(z) + z * norm_cdf(z)
    return np.maximum(out, np.maximum(z, 0.0))


def q_inverse(p, tol=1e-12):
    """Solve Q(y) = p for y by bisection, 0 < p < 1."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"tail probability must lie in (0, 1), got {p}")
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if norm_sf(mid) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_relu_mean(m, s, threshold=1e-12):
    """E[ReLU(N(m, s))] for variance ``s``; falls back to ReLU(m) when s < threshold."""
    m = _as_array(m)
    s = _as_array(s)
    small = s < threshold
    sd = np.sqrt(np.where(small, 1.0, s))
    val = sd * nr(m / sd)
    return np.where(small, np.maximum(m, 0.0), val)


def matmul(a, b):
    """Matrix product with a shape check that names both operands."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(x, mask=None):
    """Row softmax over the last axis, restricted to ``mask`` when given."""
    x = _as_array(x)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shift = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - shift)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def elementwise(op, x, y=None, slope=0.2):
    """Dispatch for the pointwise kernels used by the layers."""
    x = _as_array(x)
    if op == "relu":
        return np.maximum(x, 0.0)
    if op == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    if op == "exp":
        return np.exp(x)
    if op == "softmax_row":
        return softmax_rows(x)
    if op in ("mul", "add"):
        y = _as_array(y)
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(f"operands {x.shape} and {y.shape} do not conform") from None
        return x * y if op == "mul" else x + y
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = _as_array(value)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    __array_ufunc__ = None

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

    def __matmul__(self, other):
        return tmatmul(self, other)

    def __rmatmul__(self, other):
        return tmatmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records primitives in execution order for one backward sweep."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))


@contextmanager
def no_tape():
    """Evaluate without recording even if an outer tape is active."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(value, inputs, vjp):
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _emit(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    q = a.value / b.value
    return _emit(q, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * q / b.value, b.shape)))


def tmatmul(a, b):
    a, b = _wrap(a), _wrap(b)
    value = matmul(a.value, b.value)

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(value, (a, b), vjp)


def transpose(a):
    a = _wrap(a)
    return _emit(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx):
    a = _wrap(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.value[idx], (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape):
    a = _wrap(a)
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a):
    a = _wrap(a)
    n = a.value.size
    return _emit(np.mean(a.value), (a,), lambda g: (np.full(a.shape, g / n),))


def square(a):
    a = _wrap(a)
    return _emit(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def relu(a):
    a = _wrap(a)
    return _emit(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def leaky_relu(a, slope=0.2):
    a = _wrap(a)
    return _emit(np.where(a.value > 0, a.value, slope * a.value), (a,),
                 lambda g: (g * np.where(a.value > 0, 1.0, slope),))


def texp(a):
    a = _wrap(a)
    v = np.exp(a.value)
    return _emit(v, (a,), lambda g: (g * v,))


def terf(a):
    a = _wrap(a)
    return _emit(erf(a.value), (a,),
                 lambda g: (g * (2.0 / SQRT_PI) * np.exp(-a.value * a.value),))


def tnr(a):
    a = _wrap(a)
    return _emit(nr(a.value), (a,), lambda g: (g * norm_cdf(a.value),))


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; entries outside ``mask`` get probability 0."""
    a = _wrap(a)
    x = np.moveaxis(a.value, axis, -1)
    m = None if mask is None else np.moveaxis(np.broadcast_to(mask, a.shape), axis, -1)
    p = np.moveaxis(softmax_rows(x, m), -1, axis)

    def vjp(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _emit(p, (a,), vjp)


def expected_relu(m, s, threshold=1e-12):
    """Differentiable E[ReLU(N(m, s))] with the zero-variance limit below ``threshold``."""
    m, s = _wrap(m), _wrap(s)
    mv, sv = m.value, s.value
    small = sv < threshold
    sd = np.sqrt(np.where(small, 1.0, sv))
    z = mv / sd
    pdf = norm_pdf(z)
    cdf = norm_cdf(z)
    nr_z = np.maximum(pdf + z * cdf, np.maximum(z, 0.0))
    value = np.where(small, np.maximum(mv, 0.0), sd * nr_z)

    def vjp(g):
        dm = np.where(small, (mv > 0).astype(float), cdf)
        ds = np.where(small, 0.0, pdf / (2.0 * sd))
        return _unbroadcast(g * dm, m.shape), _unbroadcast(g * ds, s.shape)

    return _emit(value, (m, s), vjp)


def gradient(tape, loss, leaves):
    """Adjoints d(loss)/d(leaf) for each leaf, zeros for leaves the loss never touched."""
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    adj = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    return [np.asarray(adj.get(id(leaf), np.zeros_like(leaf.value)), dtype=np.float64).reshape(leaf.shape)
            for leaf in leaves]
