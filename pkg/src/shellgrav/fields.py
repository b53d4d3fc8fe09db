"""Scalar fields with exact derivatives, fiber quadrature and a 2-D Poisson solver.

Scalar fields are immutable expression graphs over chart coordinates.  They
are evaluated in batches with second-order forward-mode jets, so every
evaluation returns the value, gradient and Hessian at once.  ``diff`` builds
the derivative graph by the chain rule, which keeps derivatives exact to
roundoff.

Coordinates are addressed by zero-based chart index: ``0, 1`` are the base
horizontal pair, ``2, 3`` the base fiber, ``4, 5`` the first shell and so on.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import spsolve

from ._jet import Jet

__all__ = [
    "Coord",
    "ScalarField",
    "const",
    "coord",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "tanh",
    "cosh",
    "sinh",
    "absval",
    "power",
    "diff",
    "QuadratureRule",
    "integrate_fiber",
    "fiber_slice",
    "Grid2D",
    "solve_poisson_2d",
    "PsiSpec",
    "analytic_psi",
    "parse_field",
    "evaluate",
    "jets",
]


@dataclass(frozen=True)
class Coord:
    """A point of a shell chart."""

    values: tuple[float, ...]
    chart_id: str = "default"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite coordinate in {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def as_points(p) -> tuple[np.ndarray, bool]:
    """Normalise a point, a Coord or a batch into a ``(P, D)`` array."""
    if isinstance(p, Coord):
        return p.as_array()[None, :], True
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError("points must be a vector or a (P, D) array")
    return arr, False


# ---------------------------------------------------------------------------
# evaluation context
# ---------------------------------------------------------------------------


class _Context:
    """Memo table for one batched evaluation."""

    def __init__(self, points: np.ndarray, order: int):
        self.points = points
        self.order = order
        self.npts, self.dim = points.shape
        self.memo: dict[int, Jet] = {}

    def get(self, node: "ScalarField") -> Jet:
        key = id(node)
        hit = self.memo.get(key)
        if hit is None:
            hit = node._eval(self)
            self.memo[key] = hit
        return hit


def evaluate(fields: Sequence["ScalarField"], points, order: int = 2) -> list[Jet]:
    """Evaluate several fields on one point batch with shared subexpressions."""
    pts, _ = as_points(points)
    ctx = _Context(pts, order)
    return [ctx.get(f) for f in fields]


jets = evaluate


# ---------------------------------------------------------------------------
# expression nodes
# ---------------------------------------------------------------------------


class ScalarField:
    """Base class of every scalar field node."""

    _deps: frozenset

    def __init__(self):
        self._dcache: dict[int, ScalarField] = {}

    # -- public API ----------------------------------------------------------
    def depends_on(self) -> frozenset:
        return self._deps

    def jet(self, points, order: int = 2) -> Jet:
        return evaluate([self], points, order)[0]

    def __call__(self, p):
        pts, single = as_points(p)
        v = self.jet(pts, order=1).v
        return float(v[0]) if single else v

    def value(self, p):
        return self(p)

    def grad(self, p) -> np.ndarray:
        pts, single = as_points(p)
        g = self.jet(pts, order=1).g
        return g[0] if single else g

    def hessian(self, p) -> np.ndarray:
        pts, single = as_points(p)
        h = self.jet(pts, order=2).h
        return h[0] if single else h

    def diff(self, mu: int) -> "ScalarField":
        if mu < 0:
            raise IndexError(f"coordinate index {mu} out of range")
        hit = self._dcache.get(mu)
        if hit is None:
            hit = ZERO if mu not in self._deps else self._diff(mu)
            self._dcache[mu] = hit
        return hit

    def is_zero(self) -> bool:
        return isinstance(self, Const) and self.c == 0.0

    # -- hooks -----------------------------------------------------------------
    def _eval(self, ctx: _Context) -> Jet:  # pragma: no cover - abstract
        raise NotImplementedError

    def _diff(self, mu: int) -> "ScalarField":  # pragma: no cover - abstract
        raise NotImplementedError

    def _check_dim(self, ctx: _Context):
        if self._deps and max(self._deps) >= ctx.dim:
            raise IndexError(
                f"field uses coordinate {max(self._deps)} but points have dimension {ctx.dim}"
            )

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, lift(other))

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, lift(other))

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __truediv__(self, other):
        return div(self, lift(other))

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


def lift(x) -> ScalarField:
    if isinstance(x, ScalarField):
        return x
    return Const(float(x))


class Const(ScalarField):
    def __init__(self, c: float):
        super().__init__()
        self.c = float(c)
        self._deps = frozenset()

    def _eval(self, ctx):
        return Jet.constant(self.c, ctx.npts, ctx.dim, ctx.order)

    def __repr__(self):
        return f"Const({self.c!r})"


ZERO = Const(0.0)
ONE = Const(1.0)


class CoordField(ScalarField):
    def __init__(self, index: int):
        super().__init__()
        if index < 0:
            raise IndexError("coordinate index must be non-negative")
        self.index = int(index)
        self._deps = frozenset({self.index})

    def _eval(self, ctx):
        self._check_dim(ctx)
        j = Jet.constant(0.0, ctx.npts, ctx.dim, ctx.order)
        j.v[:] = ctx.points[:, self.index]
        j.g[:, self.index] = 1.0
        return j

    def _diff(self, mu):
        return ONE

    def __repr__(self):
        return f"u{self.index}"


class _Binary(ScalarField):
    def __init__(self, a: ScalarField, b: ScalarField):
        super().__init__()
        self.a, self.b = a, b
        self._deps = a._deps | b._deps


class Add(_Binary):
    def _eval(self, ctx):
        return ctx.get(self.a) + ctx.get(self.b)

    def _diff(self, mu):
        return add(self.a.diff(mu), self.b.diff(mu))


class Mul(_Binary):
    def _eval(self, ctx):
        return ctx.get(self.a) * ctx.get(self.b)

    def _diff(self, mu):
        return add(mul(self.a.diff(mu), self.b), mul(self.a, self.b.diff(mu)))


class Div(_Binary):
    def _eval(self, ctx):
        return ctx.get(self.a) / ctx.get(self.b)

    def _diff(self, mu):
        da, db = self.a.diff(mu), self.b.diff(mu)
        return sub(div(da, self.b), div(mul(self.a, db), mul(self.b, self.b)))


class Neg(ScalarField):
    def __init__(self, a):
        super().__init__()
        self.a = a
        self._deps = a._deps

    def _eval(self, ctx):
        return -ctx.get(self.a)

    def _diff(self, mu):
        return neg(self.a.diff(mu))


class PowConst(ScalarField):
    def __init__(self, a, p: float):
        super().__init__()
        self.a, self.p = a, float(p)
        self._deps = a._deps

    def _eval(self, ctx):
        p = self.p
        return ctx.get(self.a).apply(
            lambda u: u**p,
            lambda u: p * u ** (p - 1.0),
            lambda u: p * (p - 1.0) * u ** (p - 2.0),
        )

    def _diff(self, mu):
        return mul(mul(Const(self.p), power(self.a, self.p - 1.0)), self.a.diff(mu))


_UNARY = {
    "exp": (np.exp, np.exp, np.exp),
    "log": (np.log, lambda u: 1.0 / u, lambda u: -1.0 / u**2),
    "sin": (np.sin, np.cos, lambda u: -np.sin(u)),
    "cos": (np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u)),
    "sqrt": (np.sqrt, lambda u: 0.5 / np.sqrt(u), lambda u: -0.25 * u**-1.5),
    "tanh": (
        np.tanh,
        lambda u: 1.0 - np.tanh(u) ** 2,
        lambda u: -2.0 * np.tanh(u) * (1.0 - np.tanh(u) ** 2),
    ),
    "sinh": (np.sinh, np.cosh, np.sinh),
    "cosh": (np.cosh, np.sinh, np.cosh),
    "abs": (np.abs, np.sign, np.zeros_like),
    "sign": (np.sign, np.zeros_like, np.zeros_like),
}


class Unary(ScalarField):
    def __init__(self, name: str, a: ScalarField):
        super().__init__()
        if name not in _UNARY:
            raise ValueError(f"unknown function {name!r}")
        self.name, self.a = name, a
        self._deps = a._deps

    def _eval(self, ctx):
        f0, f1, f2 = _UNARY[self.name]
        return ctx.get(self.a).apply(f0, f1, f2)

    def _diff(self, mu):
        a, da, n = self.a, self.a.diff(mu), self.name
        if n == "exp":
            outer = self
        elif n == "log":
            return div(da, a)
        elif n == "sin":
            outer = cos(a)
        elif n == "cos":
            outer = neg(sin(a))
        elif n == "sqrt":
            return div(da, mul(Const(2.0), self))
        elif n == "tanh":
            outer = sub(ONE, mul(self, self))
        elif n == "sinh":
            outer = cosh(a)
        elif n == "cosh":
            outer = sinh(a)
        elif n == "abs":
            outer = Unary("sign", a)
        else:
            return ZERO
        return mul(outer, da)


# -- smart constructors with light constant folding ---------------------------


def add(a: ScalarField, b: ScalarField) -> ScalarField:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.c + b.c)
    if a.is_zero():
        return b
    if b.is_zero():
        return a
    return Add(a, b)


def sub(a, b):
    return add(a, neg(b))


def neg(a: ScalarField) -> ScalarField:
    if isinstance(a, Const):
        return Const(-a.c)
    if isinstance(a, Neg):
        return a.a
    return Neg(a)


def mul(a: ScalarField, b: ScalarField) -> ScalarField:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.c * b.c)
    if a.is_zero() or b.is_zero():
        return ZERO
    if isinstance(a, Const) and a.c == 1.0:
        return b
    if isinstance(b, Const) and b.c == 1.0:
        return a
    return Mul(a, b)


def div(a: ScalarField, b: ScalarField) -> ScalarField:
    if isinstance(b, Const):
        if b.c == 0.0:
            raise ZeroDivisionError("division by the zero field")
        if b.c == 1.0:
            return a
        if isinstance(a, Const):
            return Const(a.c / b.c)
        return mul(Const(1.0 / b.c), a)
    if a.is_zero():
        return ZERO
    return Div(a, b)


def power(a, p) -> ScalarField:
    a = lift(a)
    if isinstance(p, ScalarField):
        if isinstance(p, Const):
            p = p.c
        else:
            return exp(mul(p, log(a)))
    p = float(p)
    if p == 0.0:
        return ONE
    if p == 1.0:
        return a
    if isinstance(a, Const):
        return Const(a.c**p)
    return PowConst(a, p)


def _unary(name):
    def make(a) -> ScalarField:
        a = lift(a)
        if isinstance(a, Const):
            return Const(float(_UNARY[name][0](np.float64(a.c))))
        return Unary(name, a)

    make.__name__ = name
    return make


exp = _unary("exp")
log = _unary("log")
sin = _unary("sin")
cos = _unary("cos")
sqrt = _unary("sqrt")
tanh = _unary("tanh")
sinh = _unary("sinh")
cosh = _unary("cosh")
absval = _unary("abs")


def const(c: float) -> ScalarField:
    return Const(c)


def coord(index: int) -> ScalarField:
    return CoordField(index)


def diff(f: ScalarField, mu: int, dim: int | None = None) -> ScalarField:
    """Exact partial derivative of ``f`` along chart coordinate ``mu``."""
    if dim is not None and not 0 <= mu < dim:
        raise IndexError(f"coordinate index {mu} outside chart of dimension {dim}")
    return f.diff(mu)


# ---------------------------------------------------------------------------
# quadrature along a fiber coordinate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    kind: str = "composite-simpson"
    panels: int = 8
    refinement_tolerance: float = 1e-10
    max_panels: int = 2**14

    def __post_init__(self):
        if self.kind not in ("composite-simpson", "gauss-legendre"):
            raise ValueError(f"unknown quadrature kind {self.kind!r}")
        if self.panels < 1:
            raise ValueError("panels must be at least 1")
        if self.kind == "composite-simpson" and self.panels % 2:
            raise ValueError("composite Simpson needs an even panel count")
        if self.refinement_tolerance <= 0:
            raise ValueError("refinement tolerance must be positive")


DEFAULT_RULE = QuadratureRule()

_MAX_ROWS = 1 << 16


def _jet_norm(j: Jet) -> np.ndarray:
    m = np.abs(j.v)
    m = np.maximum(m, np.abs(j.g).max(axis=-1))
    if j.h is not None:
        m = np.maximum(m, np.abs(j.h).reshape(j.h.shape[0], -1).max(axis=-1))
    return m


class FiberIntegral(ScalarField):
    """``F(u) = integral of f`` along one coordinate from ``lower`` to ``u[fiber]``."""

    def __init__(self, integrand: ScalarField, fiber: int, lower: float, rule: QuadratureRule):
        super().__init__()
        self.f = integrand
        self.fiber = int(fiber)
        self.lower = float(lower)
        self.rule = rule
        self._deps = integrand._deps | {self.fiber}

    def _diff(self, mu):
        if mu == self.fiber:
            return self.f
        return integrate_fiber(self.f.diff(mu), self.fiber, self.lower, rule=self.rule)

    def _sample(self, pts: np.ndarray, t: np.ndarray, order: int) -> Jet:
        """Jets of the integrand at nodes ``t`` (shape (P, K)) for each point."""
        npts, k = t.shape
        nodes = np.repeat(pts, k, axis=0)
        nodes[:, self.fiber] = t.reshape(-1)
        out_v, out_g, out_h = [], [], []
        for start in range(0, nodes.shape[0], _MAX_ROWS):
            blk = nodes[start : start + _MAX_ROWS]
            j = self.f.jet(blk, order)
            bad = ~np.isfinite(j.v)
            if bad.any():
                raise ValueError(
                    f"non-finite integrand sample at point {blk[np.argmax(bad)].tolist()}"
                )
            out_v.append(j.v)
            out_g.append(j.g)
            if order >= 2:
                out_h.append(j.h)
        d = pts.shape[1]
        v = np.concatenate(out_v).reshape(npts, k)
        g = np.concatenate(out_g).reshape(npts, k, d)
        h = np.concatenate(out_h).reshape(npts, k, d, d) if order >= 2 else None
        return Jet(v, g, h)

    @staticmethod
    def _weighted(samples: Jet, w: np.ndarray) -> Jet:
        v = np.einsum("pk,pk->p", samples.v, w)
        g = np.einsum("pkd,pk->pd", samples.g, w)
        h = None if samples.h is None else np.einsum("pkde,pk->pde", samples.h, w)
        return Jet(v, g, h)

    def _quad_simpson(self, pts, order) -> Jet:
        a = self.lower
        b = pts[:, self.fiber]
        length = b - a
        n = max(2, self.rule.panels)
        # trapezoid sum at n intervals
        t = a + length[:, None] * np.linspace(0.0, 1.0, n + 1)[None, :]
        w = np.full(n + 1, 1.0)
        w[0] = w[-1] = 0.5
        trap = self._weighted(self._sample(pts, t, order), w[None, :] * (length / n)[:, None])
        simpson = None
        while True:
            mids = a + length[:, None] * ((np.arange(n) + 0.5) / n)[None, :]
            msum = self._weighted(self._sample(pts, mids, order), np.broadcast_to((length / n)[:, None], mids.shape))
            trap2 = Jet(
                0.5 * (trap.v + msum.v),
                0.5 * (trap.g + msum.g),
                None if order < 2 else 0.5 * (trap.h + msum.h),
            )
            simp = Jet(
                (4.0 * trap2.v - trap.v) / 3.0,
                (4.0 * trap2.g - trap.g) / 3.0,
                None if order < 2 else (4.0 * trap2.h - trap.h) / 3.0,
            )
            n *= 2
            trap = trap2
            if simpson is not None:
                delta = _jet_norm(simp - simpson)
                scale = _jet_norm(simp)
                if np.all(delta <= self.rule.refinement_tolerance * np.maximum(scale, 1e-300)):
                    return simp
                if n >= self.rule.max_panels:
                    return simp
            simpson = simp

    def _quad_gauss(self, pts, order) -> Jet:
        a = self.lower
        b = pts[:, self.fiber]
        half = 0.5 * (b - a)
        k = max(2, self.rule.panels)
        prev = None
        while True:
            x, w = np.polynomial.legendre.leggauss(k)
            t = a + half[:, None] * (x[None, :] + 1.0)
            est = self._weighted(self._sample(pts, t, order), half[:, None] * w[None, :])
            if prev is not None:
                delta = _jet_norm(est - prev)
                if np.all(delta <= self.rule.refinement_tolerance * np.maximum(_jet_norm(est), 1e-300)):
                    return est
                if k >= min(self.rule.max_panels, 512):
                    return est
            prev = est
            k *= 2

    def _eval(self, ctx):
        self._check_dim(ctx)
        pts = ctx.points
        if self.rule.kind == "gauss-legendre":
            q = self._quad_gauss(pts, ctx.order)
        else:
            q = self._quad_simpson(pts, ctx.order)
        here = ctx.get(self.f)
        fb = self.fiber
        g = q.g.copy()
        g[:, fb] = here.v
        h = None
        if ctx.order >= 2:
            h = q.h.copy()
            h[:, fb, :] = here.g
            h[:, :, fb] = here.g
        return Jet(q.v, g, h)


def integrate_fiber(
    f: ScalarField,
    fiber_index: int,
    lower: float,
    upper_as_coordinate: bool = True,
    rule: QuadratureRule = DEFAULT_RULE,
) -> ScalarField:
    """Integrate ``f`` along ``fiber_index`` from ``lower`` up to the point's own coordinate."""
    if not upper_as_coordinate:
        raise ValueError("only the running upper limit is supported")
    if f.is_zero():
        return ZERO
    return FiberIntegral(f, fiber_index, lower, rule)


class FiberSlice(ScalarField):
    """``f`` with one coordinate frozen at a constant value."""

    def __init__(self, f: ScalarField, fiber: int, value: float):
        super().__init__()
        self.f = f
        self.fiber = int(fiber)
        self.value = float(value)
        self._deps = f._deps - {self.fiber}

    def _eval(self, ctx):
        self._check_dim(ctx)
        pts = ctx.points.copy()
        pts[:, self.fiber] = self.value
        j = self.f.jet(pts, ctx.order)
        g = j.g.copy()
        g[:, self.fiber] = 0.0
        h = None
        if ctx.order >= 2:
            h = j.h.copy()
            h[:, self.fiber, :] = 0.0
            h[:, :, self.fiber] = 0.0
        return Jet(j.v, g, h)

    def _diff(self, mu):
        if mu == self.fiber:
            return ZERO
        return fiber_slice(self.f.diff(mu), self.fiber, self.value)


def fiber_slice(f: ScalarField, fiber_index: int, value: float) -> ScalarField:
    """Restriction of ``f`` to the hypersurface ``u[fiber_index] = value``."""
    f = lift(f)
    if fiber_index not in f.depends_on():
        return f
    return FiberSlice(f, fiber_index, value)


# ---------------------------------------------------------------------------
# grid-backed fields and the Poisson solver
# ---------------------------------------------------------------------------


class GridField(ScalarField):
    """Bicubic spline interpolant of nodal values over two chart coordinates."""

    def __init__(self, spline: RectBivariateSpline, axes=(0, 1), orders=(0, 0), residual=None):
        super().__init__()
        self.spline = spline
        self.axes = tuple(axes)
        self.orders = tuple(orders)
        self.residual = residual
        self._deps = frozenset(self.axes)

    def _ev(self, x, y, dx, dy):
        if dx > 2 or dy > 2:
            raise ValueError("bicubic interpolant supports derivatives up to order 2 per axis")
        return self.spline.ev(x, y, dx=dx, dy=dy)

    def _eval(self, ctx):
        self._check_dim(ctx)
        i, k = self.axes
        ox, oy = self.orders
        x, y = ctx.points[:, i], ctx.points[:, k]
        j = Jet.constant(0.0, ctx.npts, ctx.dim, ctx.order)
        j.v[:] = self._ev(x, y, ox, oy)
        j.g[:, i] = self._ev(x, y, ox + 1, oy)
        j.g[:, k] = self._ev(x, y, ox, oy + 1)
        if ctx.order >= 2:
            j.h[:, i, i] = self._ev(x, y, ox + 2, oy)
            j.h[:, k, k] = self._ev(x, y, ox, oy + 2)
            j.h[:, i, k] = j.h[:, k, i] = self._ev(x, y, ox + 1, oy + 1)
        return j

    def _diff(self, mu):
        ox, oy = self.orders
        if mu == self.axes[0]:
            return GridField(self.spline, self.axes, (ox + 1, oy))
        return GridField(self.spline, self.axes, (ox, oy + 1))


@dataclass(frozen=True)
class Grid2D:
    x1_range: tuple[float, float]
    x2_range: tuple[float, float]
    n1: int
    n2: int
    boundary_values: ScalarField = field(default_factory=lambda: ZERO)

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        for lo, hi in (self.x1_range, self.x2_range):
            if not hi > lo:
                raise ValueError("grid ranges must be strictly increasing")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.linspace(*self.x1_range, self.n1),
            np.linspace(*self.x2_range, self.n2),
        )


def _field_on_plane(f: ScalarField, x1: np.ndarray, x2: np.ndarray, axes=(0, 1)) -> np.ndarray:
    dim = max([*axes, *f.depends_on()]) + 1 if f.depends_on() else max(axes) + 1
    pts = np.zeros((x1.size, dim))
    pts[:, axes[0]] = x1.ravel()
    pts[:, axes[1]] = x2.ravel()
    return np.asarray(f(pts), dtype=float).reshape(x1.shape)


def _stencil_residual(psi, rhs, h1, h2, eps1, eps2):
    lap = eps1 * (psi[2:, 1:-1] - 2 * psi[1:-1, 1:-1] + psi[:-2, 1:-1]) / h1**2 + eps2 * (
        psi[1:-1, 2:] - 2 * psi[1:-1, 1:-1] + psi[1:-1, :-2]
    ) / h2**2
    return lap - rhs[1:-1, 1:-1]


def solve_poisson_2d(
    source: ScalarField,
    eps1: int,
    eps2: int,
    grid: Grid2D,
    axes: tuple[int, int] = (0, 1),
    tol: float = 1e-8,
) -> GridField:
    """Solve ``eps1*psi_11 + eps2*psi_22 = 2*source`` with Dirichlet data.

    Uses the 5-point stencil and a sparse direct solve; the returned field is
    the bicubic interpolant of the nodal solution and carries the measured
    stencil residual in ``.residual``.
    """
    if eps1 not in (1, -1) or eps2 not in (1, -1):
        raise ValueError("signature entries must be +1 or -1")
    if eps1 != eps2:
        raise ValueError("unsupported signature: mixed (hyperbolic) case needs analytic_psi")
    x1, x2 = grid.axes()
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    rhs = 2.0 * _field_on_plane(source, X1, X2, axes)
    if not np.all(np.isfinite(rhs)):
        raise ValueError("source is not bounded on the grid")
    psi = np.zeros_like(X1)
    bnd = _field_on_plane(grid.boundary_values, X1, X2, axes)
    psi[0, :], psi[-1, :], psi[:, 0], psi[:, -1] = bnd[0, :], bnd[-1, :], bnd[:, 0], bnd[:, -1]
    h1, h2 = x1[1] - x1[0], x2[1] - x2[0]
    m1, m2 = grid.n1 - 2, grid.n2 - 2
    c1, c2 = eps1 / h1**2, eps2 / h2**2
    d1 = sparse.diags([c1, -2 * c1, c1], [-1, 0, 1], shape=(m1, m1))
    d2 = sparse.diags([c2, -2 * c2, c2], [-1, 0, 1], shape=(m2, m2))
    A = (sparse.kron(d1, sparse.identity(m2)) + sparse.kron(sparse.identity(m1), d2)).tocsc()

    def interior_rhs():
        b = rhs[1:-1, 1:-1].copy()
        b[0, :] -= c1 * psi[0, 1:-1]
        b[-1, :] -= c1 * psi[-1, 1:-1]
        b[:, 0] -= c2 * psi[1:-1, 0]
        b[:, -1] -= c2 * psi[1:-1, -1]
        return b.ravel()

    b = interior_rhs()
    sol = spsolve(A, b)
    for _ in range(3):
        r = b - A @ sol
        if np.max(np.abs(r)) <= 0.1 * tol:
            break
        sol = sol + spsolve(A, r)
    psi[1:-1, 1:-1] = sol.reshape(m1, m2)
    res = float(np.max(np.abs(_stencil_residual(psi, rhs, h1, h2, eps1, eps2))))
    if res > tol:
        raise RuntimeError(f"Poisson residual {res:.3e} exceeds {tol:.1e}")
    spline = RectBivariateSpline(x1, x2, psi, kx=3, ky=3, s=0)
    out = GridField(spline, axes, (0, 0), residual=res)
    out.nodes = (x1, x2, psi)
    return out


# ---------------------------------------------------------------------------
# closed-form psi families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsiSpec:
    """A base conformal exponent ``psi`` with its Laplace source.

    ``Lambda`` satisfies ``eps1*psi_11 + eps2*psi_22 = 2*Lambda`` exactly.
    ``h_source`` is the value ``-R^1_1`` actually produced by the metric
    ``eps_i exp(psi) (dx^i)^2``; it carries the conformal factor
    ``exp(-psi)``.
    """

    psi: ScalarField
    Lambda: ScalarField
    eps: tuple[int, int] = (1, 1)
    axes: tuple[int, int] = (0, 1)

    @property
    def h_source(self) -> ScalarField:
        return exp(neg(self.psi)) * self.Lambda


def laplace_source(psi: ScalarField, eps=(1, 1), axes=(0, 1)) -> ScalarField:
    i, k = axes
    return Const(0.5) * (
        Const(eps[0]) * psi.diff(i).diff(i) + Const(eps[1]) * psi.diff(k).diff(k)
    )


def analytic_psi(family: str, params: Mapping | None = None, eps=(1, 1), axes=(0, 1)) -> PsiSpec:
    """Closed-form ``psi`` families together with their exact Laplace source.

    Families
    --------
    quadratic
        ``psi = c0 + c1*x1 + c2*x2 + Lambda0*(eps1*x1**2 + eps2*x2**2)/2``.
    separable-sin
        ``psi = c0 + amplitude*sin(k1*x1)*sin(k2*x2)``.
    custom-closure
        ``params["closure"](x1, x2)`` returns any ScalarField.
    """
    params = dict(params or {})
    x1, x2 = coord(axes[0]), coord(axes[1])
    e1, e2 = eps
    if family == "quadratic":
        lam0 = float(params.get("Lambda0", 0.0))
        psi = (
            Const(params.get("c0", 0.0))
            + Const(params.get("c1", 0.0)) * x1
            + Const(params.get("c2", 0.0)) * x2
            + Const(0.5 * lam0) * (Const(e1) * x1 * x1 + Const(e2) * x2 * x2)
        )
        return PsiSpec(psi, Const(lam0), (e1, e2), axes)
    if family == "separable-sin":
        amp = float(params.get("amplitude", 1.0))
        k1 = float(params.get("k1", 1.0))
        k2 = float(params.get("k2", 1.0))
        psi = Const(params.get("c0", 0.0)) + Const(amp) * sin(Const(k1) * x1) * sin(Const(k2) * x2)
    elif family == "custom-closure":
        psi = lift(params["closure"](x1, x2))
    else:
        raise ValueError(f"unknown psi family {family!r}")
    return PsiSpec(psi, laplace_source(psi, eps, axes), (e1, e2), axes)


# ---------------------------------------------------------------------------
# tiny expression grammar
# ---------------------------------------------------------------------------

_FUNCS: dict[str, Callable[..., ScalarField]] = {
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "sqrt": sqrt,
    "pow": power,
}


class ExpressionError(ValueError):
    def __init__(self, msg: str, line: int = 1, col: int = 0):
        super().__init__(f"{msg} (line {line}, column {col + 1})")
        self.line, self.col = line, col


def parse_field(
    text: str,
    names: Mapping[str, int],
    params: Mapping[str, float] | None = None,
    fields: Mapping[str, ScalarField] | None = None,
) -> ScalarField:
    """Parse an arithmetic expression into a ScalarField.

    Allowed: numbers, coordinate names from ``names``, constants from
    ``params``, named fields from ``fields``, ``+ - * / ^ **``, unary minus
    and the functions exp, log, sin, cos, sqrt, pow.
    """
    params = dict(params or {})
    params.setdefault("pi", math.pi)
    fields = dict(fields or {})
    src = str(text).replace("^", "**")
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}", exc.lineno or 1, (exc.offset or 1) - 1)

    def walk(node) -> ScalarField:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Const(float(node.value))
        if isinstance(node, ast.Name):
            if node.id in names:
                return coord(names[node.id])
            if node.id in fields:
                return fields[node.id]
            if node.id in params:
                return Const(float(params[node.id]))
            raise ExpressionError(f"unknown name {node.id!r}", node.lineno, node.col_offset)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = walk(node.operand)
            return neg(inner) if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.BinOp):
            a, b = walk(node.left), walk(node.right)
            op = node.op
            if isinstance(op, ast.Add):
                return a + b
            if isinstance(op, ast.Sub):
                return a - b
            if isinstance(op, ast.Mult):
                return a * b
            if isinstance(op, ast.Div):
                return a / b
            if isinstance(op, ast.Pow):
                return power(a, b)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            fn = _FUNCS.get(node.func.id)
            if fn is None:
                raise ExpressionError(f"unknown function {node.func.id!r}", node.lineno, node.col_offset)
            args = [walk(a) for a in node.args]
            want = 2 if node.func.id == "pow" else 1
            if len(args) != want or node.keywords:
                raise ExpressionError(
                    f"{node.func.id} takes {want} argument(s)", node.lineno, node.col_offset
                )
            return fn(*args)
        raise ExpressionError(
            f"unsupported syntax {type(node).__name__}",
            getattr(node, "lineno", 1),
            getattr(node, "col_offset", 0),
        )

    return walk(tree)


def fiber_independent(f: ScalarField, fibers: Iterable[int]) -> bool:
    """Structural check that ``f`` does not depend on any of ``fibers``."""
    return not (f.depends_on() & set(fibers))
