"""Truncated Taylor jets over batches of points.

A :class:`Jet` carries a tensor-valued quantity sampled at ``P`` points
together with its exact first (and optionally second) partial derivatives
with respect to the ``D`` chart coordinates:

* ``v`` has shape ``(P, *S)``
* ``g`` has shape ``(P, *S, D)``
* ``h`` has shape ``(P, *S, D, D)`` or is ``None`` for first-order jets

All arithmetic propagates derivatives by the chain and product rules, which
is forward-mode differentiation in vectorised form.
"""

from __future__ import annotations

import string

import numpy as np

_LETTERS = string.ascii_letters


class Jet:
    __slots__ = ("v", "g", "h")

    def __init__(self, v, g, h=None):
        self.v = v
        self.g = g
        self.h = h

    # -- construction -----------------------------------------------------
    @classmethod
    def constant(cls, value, npts: int, dim: int, order: int = 2) -> "Jet":
        v = np.broadcast_to(np.asarray(value, dtype=float), (npts,) + np.shape(value)).copy()
        g = np.zeros(v.shape + (dim,))
        h = np.zeros(v.shape + (dim, dim)) if order >= 2 else None
        return cls(v, g, h)

    @classmethod
    def stack(cls, jets, axis: int = 0) -> "Jet":
        """Stack jets along a new tensor axis (``axis`` counts tensor axes only)."""
        ax = axis + 1
        v = np.stack([j.v for j in jets], axis=ax)
        g = np.stack([j.g for j in jets], axis=ax)
        if any(j.h is None for j in jets):
            return cls(v, g)
        return cls(v, g, np.stack([j.h for j in jets], axis=ax))

    @property
    def order(self) -> int:
        return 1 if self.h is None else 2

    @property
    def dim(self) -> int:
        return self.g.shape[-1]

    def first(self) -> "Jet":
        return Jet(self.v, self.g)

    def derivative_jet(self) -> "Jet":
        """First-order jet of the gradient: value ``g`` and derivative ``h``.

        The gradient index becomes the last tensor axis.
        """
        if self.h is None:
            raise ValueError("second derivatives unavailable")
        return Jet(self.g, self.h)

    def __getitem__(self, idx) -> "Jet":
        if not isinstance(idx, tuple):
            idx = (idx,)
        full = (slice(None),) + idx
        return Jet(self.v[full], self.g[full], None if self.h is None else self.h[full])

    # -- elementwise arithmetic ----------------------------------------------
    def _coerce(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        arr = np.asarray(other, dtype=float)
        v = np.broadcast_to(arr, self.v.shape[:1] + arr.shape)
        g = np.zeros(v.shape + (self.dim,))
        h = None if self.h is None else np.zeros(v.shape + (self.dim, self.dim))
        return Jet(v, g, h)

    def __add__(self, other):
        o = self._coerce(other)
        h = None if (self.h is None or o.h is None) else self.h + o.h
        return Jet(self.v + o.v, self.g + o.g, h)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.v, -self.g, None if self.h is None else -self.h)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet):
            c = np.asarray(other, dtype=float)
            if c.ndim == 0:
                return Jet(self.v * c, self.g * c, None if self.h is None else self.h * c)
            other = self._coerce(other)
        a, b = self, other
        v = a.v * b.v
        g = a.g * b.v[..., None] + a.v[..., None] * b.g
        h = None
        if a.h is not None and b.h is not None:
            cross = a.g[..., :, None] * b.g[..., None, :]
            h = (
                a.h * b.v[..., None, None]
                + a.v[..., None, None] * b.h
                + cross
                + np.swapaxes(cross, -1, -2)
            )
        return Jet(v, g, h)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            c = np.asarray(other, dtype=float)
            if c.ndim == 0:
                return self * (1.0 / c)
            other = self._coerce(other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._coerce(other) * self.reciprocal()

    def apply(self, f0, f1, f2=None) -> "Jet":
        """Compose with a scalar function given its value and two derivatives."""
        u = self.v
        d1 = f1(u)
        g = d1[..., None] * self.g
        h = None
        if self.h is not None:
            d2 = f2(u)
            h = d1[..., None, None] * self.h + d2[..., None, None] * (
                self.g[..., :, None] * self.g[..., None, :]
            )
        return Jet(f0(u), g, h)

    def reciprocal(self) -> "Jet":
        return self.apply(lambda u: 1.0 / u, lambda u: -1.0 / u**2, lambda u: 2.0 / u**3)


def jeinsum(spec: str, a: Jet, b: Jet, order: int | None = None) -> Jet:
    """Bilinear contraction of two jets following an einsum spec on tensor axes.

    ``spec`` names only tensor axes, e.g. ``"ij,jk->ik"``; the point axis and the
    derivative axes are handled here.
    """
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    used = set(spec)
    free = [c for c in _LETTERS if c not in used]
    y, z = free[0], free[1]
    if order is None:
        order = min(a.order, b.order)
    e = np.einsum
    v = e(f"...{sa},...{sb}->...{out}", a.v, b.v)
    g = e(f"...{sa}{z},...{sb}->...{out}{z}", a.g, b.v) + e(
        f"...{sa},...{sb}{z}->...{out}{z}", a.v, b.g
    )
    if order < 2:
        return Jet(v, g)
    if a.h is None or b.h is None:
        raise ValueError("second-order contraction needs second-order operands")
    h = (
        e(f"...{sa}{y}{z},...{sb}->...{out}{y}{z}", a.h, b.v)
        + e(f"...{sa},...{sb}{y}{z}->...{out}{y}{z}", a.v, b.h)
        + e(f"...{sa}{y},...{sb}{z}->...{out}{y}{z}", a.g, b.g)
        + e(f"...{sa}{z},...{sb}{y}->...{out}{y}{z}", a.g, b.g)
    )
    return Jet(v, g, h)


def jmatmul(a: Jet, b: Jet, order: int | None = None) -> Jet:
    return jeinsum("ij,jk->ik", a, b, order)


def jtranspose(a: Jet) -> Jet:
    """Swap the two tensor axes of a matrix-valued jet."""
    v = np.swapaxes(a.v, 1, 2)
    g = np.swapaxes(a.g, 1, 2)
    h = None if a.h is None else np.swapaxes(a.h, 1, 2)
    return Jet(v, g, h)
