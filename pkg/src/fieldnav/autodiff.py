"""Vectorized forward-mode differentiation on numpy arrays.

A :class:`Jet` carries a value array of shape ``S`` together with the
directional derivatives of that value along ``T`` tangent directions,
stored as an array of shape ``S + (T,)``.  Code written against the
module-level helpers (``sin``, ``sqrt``, ``where``, ...) runs unchanged
on plain arrays and on jets, so the flatness chain, the renderer, and the
dynamics Jacobian share one implementation for values and derivatives.

The tangent axis is always the trailing axis: elementwise numpy
broadcasting between jets then behaves exactly like broadcasting between
their values.  Only value axes may be indexed or reduced over.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int]


class Jet:
    __slots__ = ("val", "tan")

    # Defer mixed ndarray/Jet arithmetic to the reflected operators
    # instead of letting numpy broadcast Jets into object arrays.
    __array_ufunc__ = None

    def __init__(self, val: np.ndarray, tan: np.ndarray):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def width(self) -> int:
        return self.tan.shape[-1]

    # -- construction -----------------------------------------------------

    @staticmethod
    def seed(val: ArrayLike, tan: np.ndarray) -> "Jet":
        """Jet whose derivative along direction t is ``tan[..., t]``."""
        return Jet(np.asarray(val, dtype=float), tan)

    @staticmethod
    def variable(val: ArrayLike) -> "Jet":
        """Flattened identity seeding: one tangent direction per entry."""
        v = np.asarray(val, dtype=float)
        return Jet(v, np.eye(v.size).reshape(v.shape + (v.size,)))

    @staticmethod
    def constant(val: ArrayLike, width: int) -> "Jet":
        v = np.asarray(val, dtype=float)
        return Jet(v, np.zeros(v.shape + (width,)))

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Jet):
            return other
        return Jet.constant(other, self.width)

    def __add__(self, other):
        o = self._coerce(other)
        return Jet(self.val + o.val, self.tan + o.tan)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        return Jet(self.val - o.val, self.tan - o.tan)

    def __rsub__(self, other):
        o = self._coerce(other)
        return Jet(o.val - self.val, o.tan - self.tan)

    def __mul__(self, other):
        o = self._coerce(other)
        return Jet(self.val * o.val, self.tan * o.val[..., None] + o.tan * self.val[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        inv = 1.0 / o.val
        val = self.val * inv
        return Jet(val, (self.tan - o.tan * val[..., None]) * inv[..., None])

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Jet(-self.val, -self.tan)

    def __pow__(self, power: float):
        return Jet(self.val**power, (power * self.val ** (power - 1.0))[..., None] * self.tan)

    def __getitem__(self, idx):
        """Index value axes only (the tangent axis is preserved).

        An ellipsis is expanded against the value shape so trailing
        indices land on value axes, never on the tangent axis.
        """
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(k is None for k in idx):
            raise IndexError("use expand_dims to add axes to a Jet")
        if Ellipsis in idx:
            pos = idx.index(Ellipsis)
            explicit = len(idx) - 1
            fill = (slice(None),) * (self.val.ndim - explicit)
            idx = idx[:pos] + fill + idx[pos + 1 :]
        return Jet(self.val[idx], self.tan[idx])

    def __repr__(self):
        return f"Jet(shape={self.val.shape}, width={self.width})"


def is_jet(x) -> bool:
    return isinstance(x, Jet)


def value(x):
    return x.val if isinstance(x, Jet) else np.asarray(x, dtype=float)


def _unary(x, fval, fderiv):
    if isinstance(x, Jet):
        return Jet(fval(x.val), fderiv(x.val)[..., None] * x.tan)
    return fval(np.asarray(x, dtype=float))


def sin(x):
    return _unary(x, np.sin, np.cos)


def cos(x):
    return _unary(x, np.cos, lambda v: -np.sin(v))


def exp(x):
    return _unary(x, np.exp, np.exp)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v: 0.5 / np.sqrt(v))


def arccos(x):
    return _unary(x, np.arccos, lambda v: -1.0 / np.sqrt(1.0 - v * v))


def sigmoid(x):
    def val(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    if isinstance(x, Jet):
        s = val(x.val)
        return Jet(s, (s * (1.0 - s))[..., None] * x.tan)
    return val(np.asarray(x, dtype=float))


def where(cond, a, b):
    """Branch on a plain boolean array; each branch's tangent follows it."""
    cond = np.asarray(cond)
    if isinstance(a, Jet) or isinstance(b, Jet):
        width = a.width if isinstance(a, Jet) else b.width
        a = a if isinstance(a, Jet) else Jet.constant(a, width)
        b = b if isinstance(b, Jet) else Jet.constant(b, width)
        return Jet(np.where(cond, a.val, b.val), np.where(cond[..., None], a.tan, b.tan))
    return np.where(cond, a, b)


def _norm_axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def sum(x, axis: int = None):
    """Sum over one value axis, or over all value axes when axis is None."""
    if isinstance(x, Jet):
        if axis is None:
            return Jet(x.val.sum(), x.tan.reshape(-1, x.width).sum(axis=0))
        ax = _norm_axis(axis, x.val.ndim)
        return Jet(x.val.sum(axis=ax), x.tan.sum(axis=ax))
    return np.sum(x, axis=axis)


def reshape(x, shape):
    """Reshape value axes (the tangent axis is preserved)."""
    shape = tuple(shape)
    if isinstance(x, Jet):
        return Jet(x.val.reshape(shape), x.tan.reshape(shape + (x.width,)))
    return np.reshape(x, shape)


def cumsum(x, axis: int):
    if isinstance(x, Jet):
        ax = _norm_axis(axis, x.val.ndim)
        return Jet(np.cumsum(x.val, axis=ax), np.cumsum(x.tan, axis=ax))
    return np.cumsum(x, axis=axis)


def expand_dims(x, axis: int):
    """Insert a value axis (never touches the trailing tangent axis)."""
    if isinstance(x, Jet):
        ax = _norm_axis(axis, x.val.ndim + 1)
        return Jet(np.expand_dims(x.val, ax), np.expand_dims(x.tan, ax))
    return np.expand_dims(x, axis)


def stack(parts: Sequence, axis: int = 0):
    if any(isinstance(p, Jet) for p in parts):
        width = next(p.width for p in parts if isinstance(p, Jet))
        jets = [p if isinstance(p, Jet) else Jet.constant(p, width) for p in parts]
        ax = _norm_axis(axis, jets[0].val.ndim + 1)
        return Jet(
            np.stack([j.val for j in jets], axis=ax),
            np.stack([j.tan for j in jets], axis=ax),
        )
    return np.stack(parts, axis=axis)


def concatenate(parts: Sequence, axis: int = 0):
    if any(isinstance(p, Jet) for p in parts):
        width = next(p.width for p in parts if isinstance(p, Jet))
        jets = [p if isinstance(p, Jet) else Jet.constant(p, width) for p in parts]
        ax = _norm_axis(axis, jets[0].val.ndim)
        return Jet(
            np.concatenate([j.val for j in jets], axis=ax),
            np.concatenate([j.tan for j in jets], axis=ax),
        )
    return np.concatenate(parts, axis=axis)


def norm(x, axis: int = -1):
    """Euclidean norm over one value axis (safe at exactly zero input)."""
    sq = sum(x * x, axis=axis)
    if isinstance(sq, Jet):
        safe = Jet(np.where(sq.val == 0.0, 1.0, sq.val), sq.tan)
        return where(sq.val == 0.0, Jet.constant(np.zeros(sq.val.shape), sq.width), sqrt(safe))
    return np.sqrt(sq)


def cross(a, b):
    """Cross product along the last value axis."""
    if not (isinstance(a, Jet) or isinstance(b, Jet)):
        return np.cross(a, b)
    width = a.width if isinstance(a, Jet) else b.width
    a = a if isinstance(a, Jet) else Jet.constant(a, width)
    b = b if isinstance(b, Jet) else Jet.constant(b, width)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def matmul(a, b):
    """Matrix product over the trailing value axes."""
    if not (isinstance(a, Jet) or isinstance(b, Jet)):
        return a @ b
    width = a.width if isinstance(a, Jet) else b.width
    a = a if isinstance(a, Jet) else Jet.constant(a, width)
    b = b if isinstance(b, Jet) else Jet.constant(b, width)
    val = a.val @ b.val
    tan = np.einsum("...ijt,...jk->...ikt", a.tan, b.val) + np.einsum(
        "...ij,...jkt->...ikt", a.val, b.tan
    )
    return Jet(val, tan)


def transpose_matrix(x):
    """Swap the two trailing value axes."""
    if isinstance(x, Jet):
        return Jet(np.swapaxes(x.val, -1, -2), np.swapaxes(x.tan, -2, -3))
    return np.swapaxes(x, -1, -2)
