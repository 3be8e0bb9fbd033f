"""A small tape-free reverse-mode autodiff over numpy arrays.

Every :class:`Tensor` keeps references to its parents and a closure that maps
its output cotangent to parent cotangents. :meth:`Tensor.backward` walks the
graph in reverse topological order. Only the operations the package needs are
implemented; each is checked against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("_parents", "_vjp", "data", "grad", "name", "requires_grad")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a cotangent needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def apply(fn_value, parents, vjp):
    """Wrap a value computed from ``parents`` with a custom vjp."""
    return Tensor(fn_value, parents=tuple(parents), vjp=vjp)


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        vjp=lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        vjp=lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjp=lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(
        out,
        parents=(a, b),
        vjp=lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, p):
    a = as_tensor(a)
    return Tensor(a.data**p, parents=(a,), vjp=lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=(a,), vjp=lambda g: (2.0 * g * a.data,))


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def vjp(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor(x * cdf, parents=(a,), vjp=vjp)


# -- shape ---------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), parents=(a,), vjp=lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), parents=(a,), vjp=lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return Tensor(np.swapaxes(a.data, i, j), parents=(a,), vjp=lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], parents=(a,), vjp=vjp)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors), vjp=vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors), vjp=vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return Tensor(np.broadcast_to(a.data, shape).copy(), parents=(a,), vjp=lambda g: (unbroadcast(g, a.shape),))


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), vjp=vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 1:
                ga = np.multiply.outer(g, B) if A.ndim > 1 else g * B
            else:
                ga = g @ np.swapaxes(B, -1, -2) if A.ndim > 1 else (B @ g[..., None])[..., 0]
            ga = unbroadcast(ga, A.shape)
        if b.requires_grad:
            if A.ndim == 1:
                gb = np.multiply.outer(A, g)
            elif B.ndim == 1:
                gb = (np.swapaxes(A, -1, -2) @ g[..., None])[..., 0]
            else:
                gb = np.swapaxes(A, -1, -2) @ g
            gb = unbroadcast(gb, B.shape)
        return ga, gb

    return Tensor(A @ B, parents=(a, b), vjp=vjp)


def einsum(spec, a, b):
    """Two-operand einsum with explicit output; vjp via re-contraction."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return ga, gb

    return Tensor(np.einsum(spec, a.data, b.data), parents=(a, b), vjp=vjp)


def _phi(X):
    """Lower triangle with the diagonal halved."""
    out = np.tril(X)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a, jitter=0.0):
    """Dense lower Cholesky of ``a + jitter I`` (jitter is a constant)."""
    from .linalg import cholesky as _chol

    a = as_tensor(a)
    L = _chol(a.data, jitter)

    def vjp(g):
        P = _phi(L.T @ np.tril(g))
        X = scipy.linalg.solve_triangular(L, P, lower=True, trans=1)
        X = scipy.linalg.solve_triangular(L, X.T, lower=True, trans=1).T
        return (0.5 * (X + X.T),)

    return Tensor(L, parents=(a,), vjp=vjp)


def tri_solve(L, B, transposed=False):
    """Solve ``L X = B`` (or ``L^T X = B``) for lower-triangular ``L``."""
    L, B = as_tensor(L), as_tensor(B)
    trans = 1 if transposed else 0
    X = scipy.linalg.solve_triangular(L.data, B.data, lower=True, trans=trans)

    def vjp(g):
        gB = scipy.linalg.solve_triangular(L.data, g, lower=True, trans=1 - trans)
        gL = None
        if L.requires_grad:
            G = gB[:, None] * X[None, :] if X.ndim == 1 else gB @ X.T
            if transposed:
                G = G.T
            gL = -np.tril(G)
        return gL, gB

    return Tensor(X, parents=(L, B), vjp=vjp)


def band_cholesky(band):
    """Banded Cholesky in compact lower storage (see :mod:`logos_gpo.linalg`)."""
    from .linalg import band_cholesky as _bc
    from .linalg import band_cholesky_vjp

    band = as_tensor(band)
    L = _bc(band.data)
    return Tensor(L, parents=(band,), vjp=lambda g: (band_cholesky_vjp(L, g),))


def band_matvec(band, x, transpose=False):
    """``L x`` along the last axis of ``x`` for a banded lower ``L``."""
    band, x = as_tensor(band), as_tensor(x)
    Lb, X = band.data, x.data
    n, w = Lb.shape
    out = np.zeros(np.broadcast_shapes(X.shape, (n,)))
    for k in range(min(w - 1, n - 1) + 1):
        if transpose:
            out[..., : n - k] += Lb[k:, k] * X[..., k:]
        else:
            out[..., k:] += Lb[k:, k] * X[..., : n - k]

    def vjp(g):
        gx = np.zeros_like(X) if x.requires_grad else None
        gb = np.zeros_like(Lb) if band.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        for k in range(min(w - 1, n - 1) + 1):
            if transpose:
                if gx is not None:
                    gx[..., k:] += unbroadcast(Lb[k:, k] * g[..., : n - k], gx[..., k:].shape)
                if gb is not None:
                    gb[k:, k] += np.sum(g[..., : n - k] * X[..., k:], axis=lead) if lead else g[: n - k] * X[k:]
            else:
                if gx is not None:
                    gx[..., : n - k] += unbroadcast(Lb[k:, k] * g[..., k:], gx[..., : n - k].shape)
                if gb is not None:
                    gb[k:, k] += np.sum(g[..., k:] * X[..., : n - k], axis=lead) if lead else g[k:] * X[: n - k]
        return gb, gx

    return Tensor(out, parents=(band, x), vjp=vjp)


def logdet_from_cholesky_diag(diag):
    """``2 * sum(log |diag|)``."""
    diag = as_tensor(diag)
    return Tensor(
        2.0 * np.sum(np.log(np.abs(diag.data))),
        parents=(diag,),
        vjp=lambda g: (2.0 * g / diag.data,),
    )


def diagonal(a):
    a = as_tensor(a)
    n = a.shape[-1]

    def vjp(g):
        out = np.zeros_like(a.data)
        idx = np.arange(n)
        out[..., idx, idx] = g
        return (out,)

    return Tensor(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), parents=(a,), vjp=vjp)


def tril(a):
    a = as_tensor(a)
    return Tensor(np.tril(a.data), parents=(a,), vjp=lambda g: (np.tril(g),))
