"""Forward-mode automatic differentiation with vectorised dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a tangent array
of shape ``S + (P,)`` holding the derivative of every value entry with
respect to ``P`` seed directions.  Arithmetic broadcasts over the leading
shape, so a whole batch of states can be pushed through a model at once
and the Jacobian with respect to the parameters falls out of the tangent.

Only the operations the kinetic and testbed models need are provided:
``+ - * /``, negation, indexing, stacking, a matrix product with a
constant matrix, clamping at zero, and flooring.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")
    __array_priority__ = 100  # make ndarray (op) Dual defer to Dual

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def n_seeds(self):
        return self.tan.shape[-1]

    def __repr__(self):
        return f"Dual(shape={self.val.shape}, seeds={self.tan.shape[-1]})"

    def __getitem__(self, idx):
        return Dual(self.val[idx], self.tan[idx])

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        other = np.asarray(other, dtype=float)
        val = self.val + other
        tan = self.tan
        if val.shape != self.val.shape:
            tan = np.broadcast_to(tan, val.shape + (tan.shape[-1],))
        return Dual(val, tan)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.tan * other.val[..., None] + other.tan * self.val[..., None],
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.tan * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            tan = (self.tan - other.tan * val[..., None]) * inv[..., None]
            return Dual(val, tan)
        inv = 1.0 / np.asarray(other, dtype=float)
        return Dual(self.val * inv, self.tan * inv[..., None])

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, -self.tan * (val * inv)[..., None])


def seed(values) -> list[Dual]:
    """Scalar duals for a parameter vector, one unit seed per entry."""
    values = np.asarray(values, dtype=float)
    eye = np.eye(values.size)
    return [Dual(values[i], eye[i]) for i in range(values.size)]


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def tangent(x, n_seeds, shape=()):
    if isinstance(x, Dual):
        return np.broadcast_to(x.tan, shape + (n_seeds,)) if shape else x.tan
    return np.zeros(np.shape(x) + (n_seeds,))


def stack(items, axis=-1):
    """Stack scalars, arrays and duals along a new value axis."""
    duals = [d for d in items if isinstance(d, Dual)]
    if not duals:
        return np.stack(np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in items]), axis=axis)
    vals = [value(d) for d in items]
    shape = np.broadcast_shapes(*[v.shape for v in vals])
    vals = [np.broadcast_to(v, shape) for v in vals]
    if axis < 0:
        axis = len(shape) + 1 + axis
    val = np.stack(vals, axis=axis)
    p = duals[0].n_seeds
    tans = [
        np.broadcast_to(d.tan, shape + (p,)) if isinstance(d, Dual) else np.zeros(shape + (p,))
        for d in items
    ]
    return Dual(val, np.stack(tans, axis=axis))


def matmul_const(x, matrix):
    """``x @ matrix.T`` for a constant matrix, acting on the last value axis."""
    matrix = np.asarray(matrix, dtype=float)
    if isinstance(x, Dual):
        return Dual(x.val @ matrix.T, np.matmul(matrix, x.tan))
    return np.asarray(x) @ matrix.T


def clamp_nonnegative(x):
    if isinstance(x, Dual):
        neg = x.val < 0.0
        if not neg.any():
            return x
        val = np.where(neg, 0.0, x.val)
        tan = np.where(neg[..., None], 0.0, x.tan)
        return Dual(val, tan)
    return np.maximum(x, 0.0)


def floor(x, eps):
    """``max(x, eps)`` with zero derivative on the floored entries."""
    if isinstance(x, Dual):
        low = x.val < eps
        if not low.any():
            return x
        return Dual(np.where(low, eps, x.val), np.where(low[..., None], 0.0, x.tan))
    return np.maximum(x, eps)


def concatenate(parts, axis=-1):
    duals = [d for d in parts if isinstance(d, Dual)]
    if not duals:
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    p = duals[0].n_seeds
    vals = [value(d) for d in parts]
    tans = [d.tan if isinstance(d, Dual) else np.zeros(np.shape(d) + (p,)) for d in parts]
    if axis < 0:
        axis = vals[0].ndim + axis
    return Dual(np.concatenate(vals, axis=axis), np.concatenate(tans, axis=axis))


def all_finite(x) -> bool:
    if isinstance(x, Dual):
        return bool(np.isfinite(x.val).all() and np.isfinite(x.tan).all())
    return bool(np.isfinite(x).all())
