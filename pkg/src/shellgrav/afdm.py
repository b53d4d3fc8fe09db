"""Exact-solution generators on shell charts.

Every builder returns a :class:`~shellgrav.geometry.DMetric` together with the
sources it was built for.  Verification is left to :mod:`shellgrav.connection`.

Shell ``k`` occupies block ``k + 1`` with coordinates ``(2k+2, 2k+3)``; the
second of these is the shell's fiber direction, the first its Killing
direction.  Integration along the fiber starts at a fixed lower limit, the
minimum of the fiber range of the working domain.

Generating functions are handled through their squares ``S = Phi~**2``, so
that the sign of ``S`` may be chosen freely together with ``Lambda0``:

* ``h_a = S / (4 Lambda0)``
* ``h_b = (d S)**2 / (4 S Xi)`` with ``Xi' = Lambda_v * S'``
* ``w`` (frame relative) ``= e_tau Xi / d Xi``
* ``n`` (frame relative) ``= n1 + n2 * integral( d S / (2 S**2 sqrt|Xi|) )``

where ``d`` is the fiber derivative and ``e_tau`` the adapted derivative of
the lower blocks.  Frame-relative coefficients are converted to coordinate
N-coefficients with the lower coframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fields as F
from .fields import PsiSpec, QuadratureRule, ScalarField, as_points
from .geometry import DMetric, NConnection, ShellChart

CHECK_TOL = 1e-8


class GeneratorError(ValueError):
    """A generator precondition failed; the message names shell and point."""


# ---------------------------------------------------------------------------
# domains and sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned coordinate box used for sampling and integration limits."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("box needs matching bounds with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @classmethod
    def uniform(cls, dim: int, lo: float, hi: float) -> "Box":
        return cls((lo,) * dim, (hi,) * dim)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def grid(self, shape: Sequence[int]) -> np.ndarray:
        """Tensor grid; axes beyond ``len(shape)`` are fixed at the box centre."""
        axes = []
        for i in range(self.dim):
            if i < len(shape):
                axes.append(np.linspace(self.lower[i], self.upper[i], int(shape[i])))
            else:
                axes.append(np.array([0.5 * (self.lower[i] + self.upper[i])]))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)

    def extended(self, dim: int, lo: float, hi: float) -> "Box":
        extra = dim - self.dim
        if extra < 0:
            return Box(self.lower[:dim], self.upper[:dim])
        return Box(self.lower + (lo,) * extra, self.upper + (hi,) * extra)


@dataclass(frozen=True)
class SourceSpec:
    """Block-wise polarized sources.

    ``Lambda_h`` is the value of ``-R^1_1`` demanded on the base, and
    ``Lambda_v[k]`` the value of ``-R^a_a`` on the fiber of shell ``k``
    (``k = 0`` is the base fiber).
    """

    Lambda_h: ScalarField
    Lambda_v: tuple[ScalarField, ...]

    def __post_init__(self):
        object.__setattr__(self, "Lambda_h", F.lift(self.Lambda_h))
        object.__setattr__(self, "Lambda_v", tuple(F.lift(v) for v in self.Lambda_v))

    @classmethod
    def from_psi(cls, psi: PsiSpec, Lambda_v: Sequence) -> "SourceSpec":
        """Base source realized by the conformal base metric of ``psi``."""
        return cls(psi.h_source, tuple(Lambda_v))

    @classmethod
    def vacuum(cls, nshells: int) -> "SourceSpec":
        return cls(F.ZERO, (F.ZERO,) * (nshells + 1))

    def block_sources(self, nblocks: int) -> list[ScalarField]:
        if len(self.Lambda_v) < nblocks - 1:
            raise ValueError(f"sources cover {len(self.Lambda_v)} fibers, metric has {nblocks - 1}")
        return [self.Lambda_h] + list(self.Lambda_v[: nblocks - 1])

    def upsilon(self, nblocks: int) -> list[ScalarField]:
        """Einstein-form values: each block carries the sum of all other blocks' sources."""
        src = self.block_sources(nblocks)
        out = []
        for j in range(nblocks):
            total = F.ZERO
            for i, s in enumerate(src):
                if i != j:
                    total = total + s
            out.append(total)
        return out


# ---------------------------------------------------------------------------
# generating data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShellGenerator:
    """Generating data for one shell of the general (torsionful) family.

    Give one of ``tilde_phi``, ``tilde_phi_sq`` or ``phi``.  With ``phi`` the
    rescaled function is obtained from the shell's ``Lambda_v``.  ``n1`` and
    ``n2`` hold one integration function per lower frame index; missing
    entries are zero.
    """

    tilde_lambda0: float
    tilde_phi: ScalarField | None = None
    tilde_phi_sq: ScalarField | None = None
    phi: ScalarField | None = None
    n1: Sequence = ()
    n2: Sequence = ()
    xi0: ScalarField = F.ZERO

    def __post_init__(self):
        given = [x is not None for x in (self.tilde_phi, self.tilde_phi_sq, self.phi)]
        if sum(given) != 1:
            raise ValueError("give exactly one of tilde_phi, tilde_phi_sq, phi")
        if self.tilde_lambda0 == 0:
            raise ValueError("the effective constant must be nonzero")


@dataclass(frozen=True)
class LCShell:
    """Generating data for one shell of the torsion-free family.

    ``check_phi`` must be a function of ``fiber + check_A`` so that the
    fiber ratio of its gradient is the gradient of ``check_A``; the shell
    source must be constant.
    """

    check_phi: ScalarField
    check_A: ScalarField = F.ZERO
    n_potential: ScalarField = F.ZERO


@dataclass(frozen=True)
class GeneratingData:
    psi: PsiSpec
    shells: tuple
    domain: Box | None = None
    rule: QuadratureRule = F.DEFAULT_RULE

    def fiber_lower(self, k: int) -> float:
        fib = 2 * k + 3
        if self.domain is None or self.domain.dim <= fib:
            return 0.0
        return self.domain.lower[fib]


@dataclass(frozen=True)
class LCData:
    psi: PsiSpec
    check_phi: tuple
    check_A: tuple = ()
    n_potential: tuple = ()
    domain: Box | None = None

    def shells(self) -> tuple[LCShell, ...]:
        out = []
        for k, phi in enumerate(self.check_phi):
            A = self.check_A[k] if k < len(self.check_A) else F.ZERO
            n = self.n_potential[k] if k < len(self.n_potential) else F.ZERO
            out.append(LCShell(F.lift(phi), F.lift(A), F.lift(n)))
        return tuple(out)


# ---------------------------------------------------------------------------
# symbolic lower frames
# ---------------------------------------------------------------------------


def _matmul(A, B):
    n, m, q = len(A), len(B), len(B[0])
    out = [[F.ZERO] * q for _ in range(n)]
    for i in range(n):
        for j in range(q):
            acc = F.ZERO
            for k in range(m):
                if A[i][k].is_zero() or B[k][j].is_zero():
                    continue
                acc = acc + A[i][k] * B[k][j]
            out[i][j] = acc
    return out


def lower_frame(nconn: NConnection, size: int):
    """Coframe ``C`` and frame ``E`` of the first ``size`` coordinates as fields.

    ``e^alpha = C[alpha][mu] du^mu`` and ``e_alpha = E[alpha][mu] d_mu``.
    """
    M = [[nconn.get(a, i) if a != i else F.ZERO for i in range(size)] for a in range(size)]
    eye = [[F.ONE if a == i else F.ZERO for i in range(size)] for a in range(size)]
    C = [[eye[a][i] + M[a][i] if not M[a][i].is_zero() else eye[a][i] for i in range(size)] for a in range(size)]
    inv = [row[:] for row in eye]
    term = [row[:] for row in eye]
    for _ in range(size // 2):
        term = _matmul(term, M)
        term = [[F.neg(x) for x in row] for row in term]
        inv = [[inv[a][i] + term[a][i] if not term[a][i].is_zero() else inv[a][i] for i in range(size)] for a in range(size)]
    E = [[inv[i][a] for i in range(size)] for a in range(size)]
    return C, E


def frame_derivative_field(E, f: ScalarField, alpha: int) -> ScalarField:
    out = F.ZERO
    for mu, c in enumerate(E[alpha]):
        if c.is_zero():
            continue
        df = f.diff(mu)
        if df.is_zero():
            continue
        out = out + c * df
    return out


def to_coordinate(effective: Sequence[ScalarField], C) -> list[ScalarField]:
    """``N_mu = sum_alpha Ntilde_alpha C[alpha][mu]`` over the lower coordinates."""
    size = len(effective)
    out = []
    for mu in range(size):
        acc = F.ZERO
        for alpha in range(size):
            if effective[alpha].is_zero() or C[alpha][mu].is_zero():
                continue
            acc = acc + effective[alpha] * C[alpha][mu]
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def rescale_generating(
    Phi: ScalarField,
    Lambda_v: ScalarField,
    tilde_lambda0: float,
    fiber: int = 3,
    lower: float = 0.0,
    inverse: bool = False,
    rule: QuadratureRule = F.DEFAULT_RULE,
) -> ScalarField:
    """Square of the rescaled generating function.

    Forward: ``S~`` with ``d S~ = Lambda0 d(Phi**2) / Lambda_v``.
    Inverse (``Phi`` is then ``Phi~``): ``S`` with ``d S = Lambda_v d(Phi~**2) / Lambda0``.
    Both are normalized by integrating by parts from ``lower`` so that a
    constant ``Lambda_v = Lambda0`` returns ``Phi**2`` exactly.
    """
    if tilde_lambda0 == 0:
        raise GeneratorError("the effective constant must be nonzero")
    Lambda_v = F.lift(Lambda_v)
    sq = Phi * Phi
    L0 = F.const(tilde_lambda0)
    if inverse:
        tail = F.integrate_fiber(Lambda_v.diff(fiber) * sq, fiber, lower, rule=rule)
        return (Lambda_v * sq - tail) / L0
    tail = F.integrate_fiber(sq * Lambda_v.diff(fiber) / (Lambda_v * Lambda_v), fiber, lower, rule=rule)
    return L0 * (sq / Lambda_v + tail)


def xi_functional(
    S: ScalarField, Lambda_v: ScalarField, fiber: int, lower: float,
    xi0: ScalarField = F.ZERO, rule: QuadratureRule = F.DEFAULT_RULE,
) -> ScalarField:
    """``Xi`` with fiber derivative ``Lambda_v * dS``, normalized by parts."""
    Lambda_v = F.lift(Lambda_v)
    tail = F.integrate_fiber(Lambda_v.diff(fiber) * S, fiber, lower, rule=rule)
    return Lambda_v * S + F.lift(xi0) - tail


def _shell_square(k: int, gd: GeneratingData, src: SourceSpec) -> ScalarField:
    sh = gd.shells[k]
    if sh.tilde_phi_sq is not None:
        return F.lift(sh.tilde_phi_sq)
    if sh.tilde_phi is not None:
        t = F.lift(sh.tilde_phi)
        return t * t
    return rescale_generating(
        F.lift(sh.phi), src.Lambda_v[k], sh.tilde_lambda0, 2 * k + 3, gd.fiber_lower(k), rule=gd.rule
    )


@dataclass(frozen=True)
class ShellPair:
    h3: ScalarField
    h4: ScalarField
    S: ScalarField
    Xi: ScalarField


def _guard_points(box: Box, fib: int, nbase: int = 6, nfib: int = 9) -> np.ndarray:
    """Fiber lines through seeded base points, for sign checks along the fiber."""
    base = box.sample(nbase, seed=17)
    ys = np.linspace(box.lower[fib], box.upper[fib], nfib)
    pts = np.repeat(base, nfib, axis=0)
    pts[:, fib] = np.tile(ys, nbase)
    return pts


def _guard_single_signed(k: int, name: str, f: ScalarField, pts: np.ndarray):
    v = f.jet(pts, 0).v
    bad = ~np.isfinite(v) | (np.abs(v) < 1e-300)
    if not bad.any():
        signs = np.sign(v)
        bad = signs != signs[0]
    if bad.any():
        j = int(np.argmax(bad))
        raise GeneratorError(f"shell {k}: {name} vanishes or changes sign on the domain near {pts[j].tolist()}")


def _h_pair(k: int, gd: GeneratingData, src: SourceSpec) -> ShellPair:
    sh = gd.shells[k]
    fib = 2 * k + 3
    S = _shell_square(k, gd, src)
    Xi = xi_functional(S, src.Lambda_v[k], fib, gd.fiber_lower(k), sh.xi0, gd.rule)
    dS = S.diff(fib)
    if dS.is_zero():
        raise GeneratorError(f"shell {k}: generating function does not depend on its fiber coordinate")
    if gd.domain is not None and gd.domain.dim > fib:
        pts = _guard_points(gd.domain, fib)
        _guard_single_signed(k, "the squared generating function", S, pts)
        _guard_single_signed(k, "its fiber derivative", dS, pts)
        _guard_single_signed(k, "Xi", Xi, pts)
    h3 = S / F.const(4.0 * sh.tilde_lambda0)
    h4 = dS * dS / (F.const(4.0) * S * Xi)
    return ShellPair(h3, h4, S, Xi)


def gen_h_pair(k: int, gd: GeneratingData, src: SourceSpec) -> tuple[ScalarField, ScalarField]:
    """Fiber metric coefficients of shell ``k``."""
    pair = _h_pair(k, gd, src)
    return pair.h3, pair.h4


def gen_w(k: int, gd: GeneratingData, src: SourceSpec, lower_nconn: NConnection | None = None,
          pair: ShellPair | None = None) -> list[ScalarField]:
    """Coordinate ``w`` coefficients of shell ``k`` over all lower coordinates."""
    pair = pair or _h_pair(k, gd, src)
    size = 2 * k + 2
    C, E = lower_frame(lower_nconn, size) if k else _identity(size)
    dXi = pair.Xi.diff(2 * k + 3)
    eff = [frame_derivative_field(E, pair.Xi, a) / dXi for a in range(size)]
    return to_coordinate(eff, C)


def _identity(size):
    eye = [[F.ONE if a == i else F.ZERO for i in range(size)] for a in range(size)]
    return eye, eye


def n_integrand(pair: ShellPair, fiber: int, uncorrected: bool = False) -> ScalarField:
    """Fiber integrand of the ``n`` solution.

    The default solves ``n'' + (3/2 (ln|h3|)' - 1/2 (ln|h4|)') n' = 0``.  The
    uncorrected variant is ``(d Phi~)**2 / (Phi~**3 Xi)``, valid for ``S > 0``.
    """
    S, Xi = pair.S, pair.Xi
    dS = S.diff(fiber)
    if uncorrected:
        return dS * dS / (F.const(4.0) * S * S * F.sqrt(S) * Xi)
    return dS / (F.const(2.0) * S * S * F.sqrt(F.absval(Xi)))


def gen_n(k: int, gd: GeneratingData, src: SourceSpec, lower_nconn: NConnection | None = None,
          pair: ShellPair | None = None, uncorrected: bool = False) -> list[ScalarField]:
    """Coordinate ``n`` coefficients of shell ``k`` over all lower coordinates."""
    sh = gd.shells[k]
    pair = pair or _h_pair(k, gd, src)
    size = 2 * k + 2
    fib = 2 * k + 3
    n1 = [F.lift(sh.n1[a]) if a < len(sh.n1) else F.ZERO for a in range(size)]
    n2 = [F.lift(sh.n2[a]) if a < len(sh.n2) else F.ZERO for a in range(size)]
    if any(not x.is_zero() for x in n2):
        I = F.integrate_fiber(n_integrand(pair, fib, uncorrected), fib, gd.fiber_lower(k), rule=gd.rule)
        eff = [a + b * I if not b.is_zero() else a for a, b in zip(n1, n2)]
    else:
        eff = n1
    for a, f in enumerate(eff):
        if fib in f.depends_on() and a < len(sh.n1) and fib in F.lift(sh.n1[a]).depends_on():
            raise GeneratorError(f"shell {k}: integration function n1[{a}] depends on the fiber coordinate")
    if k == 0:
        return eff
    C, _ = lower_frame(lower_nconn, size)
    return to_coordinate(eff, C)


def _base_metric(psi: PsiSpec):
    e1, e2 = psi.eps
    ep = F.exp(psi.psi)
    return (F.const(e1) * ep, F.const(e2) * ep)


def lc_shell_fields(k: int, sh: LCShell, Lambda_v: ScalarField):
    """Fiber pair and gradient N-coefficients ``(h_a, h_b, n, w)`` of a torsion-free shell."""
    fib = 2 * k + 3
    Lv = F.lift(Lambda_v)
    if Lv.depends_on():
        raise GeneratorError(f"shell {k}: the torsion-free family needs a constant fiber source")
    phi = sh.check_phi
    dphi = phi.diff(fib)
    if dphi.is_zero():
        raise GeneratorError(f"shell {k}: generating function does not depend on its fiber coordinate")
    h3 = phi * phi / (F.const(4.0) * Lv)
    h4 = dphi * dphi / (Lv * phi * phi)
    size = 2 * k + 2
    n = [sh.n_potential.diff(mu) for mu in range(size)]
    w = [sh.check_A.diff(mu) for mu in range(size)]
    return h3, h4, n, w


def build_solution(
    s: int, gd: GeneratingData, src: SourceSpec, uncorrected: bool = False
) -> DMetric:
    """Assemble the shell-by-shell solution for ``s`` shells above the base fiber."""
    if len(gd.shells) < s + 1:
        raise GeneratorError(f"generating data covers {len(gd.shells)} fibers, need {s + 1}")
    chart = ShellChart(s)
    g = _base_metric(gd.psi)
    hs = []
    coeffs: dict[tuple[int, int], ScalarField] = {}
    for k in range(s + 1):
        sh = gd.shells[k]
        lower = NConnection(chart, {key: v for key, v in coeffs.items()})
        try:
            if isinstance(sh, LCShell):
                h3, h4, n, w = lc_shell_fields(k, sh, src.Lambda_v[k])
            else:
                pair = _h_pair(k, gd, src)
                h3, h4 = pair.h3, pair.h4
                w = gen_w(k, gd, src, lower, pair)
                n = gen_n(k, gd, src, lower, pair, uncorrected)
        except GeneratorError:
            raise
        except (ValueError, ZeroDivisionError) as exc:
            raise GeneratorError(f"shell {k}: {exc}") from exc
        hs.append((h3, h4))
        a3 = 2 * k + 2
        for mu in range(a3):
            if not n[mu].is_zero():
                coeffs[(a3, mu)] = n[mu]
            if not w[mu].is_zero():
                coeffs[(a3 + 1, mu)] = w[mu]
    return DMetric(chart, g, tuple(hs), NConnection(chart, coeffs))


def lc_extract(s: int, lc: LCData, src: SourceSpec, check_points: np.ndarray | None = None) -> DMetric:
    """Torsion-free member of the solution family.

    Checks that the fiber ratio of each generating function's gradient equals
    the gradient of the supplied potential.
    """
    shells = lc.shells()
    if len(shells) < s + 1:
        raise GeneratorError(f"torsion-free data covers {len(shells)} fibers, need {s + 1}")
    pts = check_points
    if pts is None:
        box = lc.domain or Box.uniform(4 + 2 * s, 0.2, 0.8)
        pts = box.sample(16, seed=7)
    pts = np.asarray(pts, float)
    for k in range(s + 1):
        sh = shells[k]
        fib = 2 * k + 3
        dphi = sh.check_phi.diff(fib)
        for mu in range(2 * k + 2):
            ratio = sh.check_phi.diff(mu) / dphi
            dev = np.abs(ratio.jet(pts, 1).v - sh.check_A.diff(mu).jet(pts, 1).v)
            if dev.max() > CHECK_TOL:
                j = int(np.argmax(dev))
                raise GeneratorError(
                    f"shell {k}: fiber ratio of the generating gradient along coordinate {mu} "
                    f"differs from the potential gradient by {dev[j]:.3e} at {pts[j].tolist()}"
                )
    gd = GeneratingData(lc.psi, shells[: s + 1], lc.domain)
    return build_solution(s, gd, src)


# ---------------------------------------------------------------------------
# decoupled-system residuals
# ---------------------------------------------------------------------------


def decoupled_residuals(
    m: DMetric, src: SourceSpec, p, uncorrected_gamma: bool = False
) -> dict[str, np.ndarray]:
    """Residuals of the decoupled equations for every fiber of ``m``.

    ``e2`` is ``(d phi)(d h3) - 2 h3 h4 Lambda_v`` with
    ``phi = ln|d h3 / sqrt|h3 h4||``; ``e3[t]`` is ``n'' + gamma n'`` for the
    frame-relative ``n``; ``e4[t]`` is ``beta w - alpha_t``.  The default
    ``gamma`` is ``d ln(|h3|^(3/2) / |h4|^(1/2))``; ``uncorrected_gamma`` uses
    ``d ln(|h3|^(3/2) / |h4|)``.
    """
    from .geometry import frame_data

    pts, single = as_points(p)
    fd = frame_data(m, pts, order=2)
    gd = fd.gd
    srcs = F.evaluate(src.block_sources(m.chart.nblocks), pts, order=1)
    out = {}
    for b in range(1, m.chart.nblocks):
        a3, a4 = 2 * b, 2 * b + 1
        h3, h4 = gd.v[:, a3], gd.v[:, a4]
        d4h3, d4h4 = gd.g[:, a3, a4], gd.g[:, a4, a4]
        d44h3 = gd.h[:, a3, a4, a4]
        d4phi = d44h3 / d4h3 - 0.5 * (d4h3 / h3 + d4h4 / h4)
        out[f"e2[{b - 1}]"] = d4phi * d4h3 - 2 * h3 * h4 * srcs[b].v
        coef = 1.0 if uncorrected_gamma else 0.5
        gamma = 1.5 * d4h3 / h3 - coef * d4h4 / h4
        beta = d4phi * d4h3 / (2 * h3)
        lower = np.arange(a3)
        for t in range(a3):
            n_4 = -fd.F.g[:, t, a3, a4]
            n_44 = -fd.F.h[:, t, a3, a4, a4]
            out[f"e3[{b - 1}][{t + 1}]"] = n_44 + gamma * n_4
            ft = fd.F.v[:, t, lower]
            grad_phi = (
                gd.h[:, a3, a4, lower] / d4h3[:, None]
                - 0.5 * (gd.g[:, a3, lower] / h3[:, None] + gd.g[:, a4, lower] / h4[:, None])
            )
            e_phi = np.einsum("pm,pm->p", ft, grad_phi)
            alpha = e_phi * d4h3 / (2 * h3)
            w = -fd.F.v[:, t, a4]
            out[f"e4[{b - 1}][{t + 1}]"] = beta * w - alpha
    if single:
        return {k: v[0] for k, v in out.items()}
    return out


# ---------------------------------------------------------------------------
# vacuum branches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VacuumData:
    """Inputs of the vacuum branches.

    * ``v1``: ``h3`` is a base function, ``h4`` arbitrary.
    * ``v2``: ``h3`` depends on the fiber; ``h4_0`` is a constant.
    * ``v3``: ``c1`` and ``c2`` are base functions with ``c2 / sqrt|h4_0|``
      constant; ``h4_0`` is a base function.
    * ``jet-v2s``: ``v2`` on the base fiber plus a ``v2``-type shell from
      ``shell_h`` and ``shell_h0``.
    """

    psi: PsiSpec
    h3: ScalarField | None = None
    h4: ScalarField | None = None
    h4_0: ScalarField | float | None = None
    c1: ScalarField | None = None
    c2: ScalarField | None = None
    n1: Sequence = ()
    n2: Sequence = ()
    w: Sequence = ()
    shell_h: ScalarField | None = None
    shell_h0: float | None = None
    shell_n1: Sequence = ()
    shell_n2: Sequence = ()
    shell_w: Sequence = ()
    domain: Box | None = None
    rule: QuadratureRule = F.DEFAULT_RULE


def _pad(seq, size):
    return [F.lift(seq[i]) if i < len(seq) else F.ZERO for i in range(size)]


def _check_harmonic(psi: PsiSpec, pts: np.ndarray):
    lam = np.abs(F.lift(psi.Lambda).jet(pts, 1).v)
    if lam.max() > CHECK_TOL:
        j = int(np.argmax(lam))
        raise GeneratorError(f"vacuum base needs a harmonic exponent; source {lam[j]:.3e} at {pts[j].tolist()}")


def _fiber_branch(branch: str, h3, h4_or_0, c1, c2, n1, n2, fib: int, lower: float, rule, pts):
    """Fiber pair and frame-relative ``n`` of one vacuum block."""
    size = fib - 1
    n1 = _pad(n1, size)
    n2 = _pad(n2, size)
    if branch == "v1":
        h3 = F.lift(h3)
        if fib in h3.depends_on() or (fib - 1) in h3.depends_on():
            raise GeneratorError("v1: h3 must not depend on the fiber coordinates")
        h4 = F.lift(h4_or_0)
        integrand = F.sqrt(F.absval(h4))
    elif branch == "v2":
        h3 = F.lift(h3)
        if fib not in h3.depends_on():
            raise GeneratorError("v2: h3 must depend on the fiber coordinate")
        h0 = F.lift(h4_or_0)
        if h0.depends_on():
            raise GeneratorError("v2: the factor of h4 must be constant for a constant phi")
        root = F.sqrt(F.absval(h3))
        droot = root.diff(fib)
        h4 = h0 * droot * droot
        integrand = None
        closed = F.ONE / F.absval(h3)
    elif branch == "v3":
        c1, c2, h0 = F.lift(c1), F.lift(c2), F.lift(h4_or_0)
        for name, f in (("c1", c1), ("c2", c2), ("h4_0", h0)):
            if f.depends_on() & {fib, fib - 1}:
                raise GeneratorError(f"v3: {name} must not depend on the fiber coordinates")
        ratio = (c2 / F.sqrt(F.absval(h0))).jet(pts, 1).v
        if np.ptp(ratio) > CHECK_TOL * max(1.0, np.abs(ratio).max()):
            raise GeneratorError(
                f"v3: c2/sqrt|h4_0| must be constant for a constant phi; spread {np.ptp(ratio):.3e}"
            )
        u = c1 + c2 * F.coord(fib)
        h3 = u * u
        h4 = h0
        integrand = None
        closed = F.ONE / (u * u)
    else:
        raise GeneratorError(f"unknown vacuum branch {branch!r}")
    if branch == "v1":
        if any(not x.is_zero() for x in n2):
            I = F.integrate_fiber(integrand, fib, lower, rule=rule)
            n = [a + b * I for a, b in zip(n1, n2)]
        else:
            n = n1
    else:
        n = [a + b * closed if not b.is_zero() else a for a, b in zip(n1, n2)]
    return h3, h4, n


def build_vacuum(branch: str, data: VacuumData) -> DMetric:
    """Vacuum metric of the named branch: ``v1``, ``v2``, ``v3`` or ``jet-v2s``."""
    s = 1 if branch == "jet-v2s" else 0
    chart = ShellChart(s)
    box = data.domain or Box.uniform(chart.dim, 0.2, 0.8)
    box = box.extended(chart.dim, 0.2, 0.8)
    pts = box.sample(12, seed=11)
    _check_harmonic(data.psi, pts)
    base_branch = "v2" if branch == "jet-v2s" else branch
    h4_arg = data.h4 if branch == "v1" else data.h4_0
    h3, h4, n = _fiber_branch(
        base_branch, data.h3, h4_arg, data.c1, data.c2, data.n1, data.n2, 3, box.lower[3], data.rule, pts
    )
    w = _pad(data.w, 2)
    coeffs = {}
    for mu in range(2):
        coeffs[(2, mu)] = n[mu]
        coeffs[(3, mu)] = w[mu]
    hs = [(h3, h4)]
    if branch == "jet-v2s":
        if data.shell_h is None or data.shell_h0 is None:
            raise GeneratorError("jet-v2s needs shell_h and shell_h0")
        h5, h6, n_eff = _fiber_branch(
            "v2", data.shell_h, data.shell_h0, None, None, data.shell_n1, data.shell_n2, 5, box.lower[5], data.rule, pts
        )
        lower = NConnection(chart, coeffs)
        C, _ = lower_frame(lower, 4)
        n_c = to_coordinate(n_eff, C)
        w_c = to_coordinate(_pad(data.shell_w, 4), C)
        for mu in range(4):
            coeffs[(4, mu)] = n_c[mu]
            coeffs[(5, mu)] = w_c[mu]
        hs.append((h5, h6))
    return DMetric(chart, _base_metric(data.psi), tuple(hs), NConnection(chart, coeffs))


# ---------------------------------------------------------------------------
# six-dimensional embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingData:
    """Inputs of the constant-``h3``, constant-``h5`` six-dimensional vacuum.

    Generic mode uses ``h4``, ``h6``, ``w`` (two entries) and ``shell_w``
    (entries for ``x1, x2, y4``).  Torsion-free mode uses ``check_phi`` with
    potential ``check_A`` and ``shell_check_phi`` with potential
    ``shell_check_A``; each generating function must depend on the fiber only
    through ``fiber + potential``.
    """

    psi: PsiSpec
    eps3: int = 1
    eps5: int = 1
    eps4: int = 1
    eps6: int = 1
    h4: ScalarField | None = None
    h6: ScalarField | None = None
    w: Sequence = ()
    shell_w: Sequence = ()
    check_phi: ScalarField | None = None
    check_A: ScalarField = F.ZERO
    shell_check_phi: ScalarField | None = None
    shell_check_A: ScalarField = F.ZERO


@dataclass(frozen=True)
class Embedding:
    metric: DMetric
    relabel: dict[str, str] = field(default_factory=dict)
    torsion_free: bool = False


def embed_6to4(data: EmbeddingData, check_points: np.ndarray | None = None) -> Embedding:
    """Six-dimensional vacuum with constant ``h3``, ``h5`` and no ``n`` terms.

    Relabeling the shell fiber ``z6`` as ``y3`` gives a four-dimensional
    metric without the Killing symmetry of the base fiber; the map is
    returned in ``relabel``.
    """
    chart = ShellChart(1)
    pts = check_points
    if pts is None:
        pts = Box.uniform(6, 0.2, 0.8).sample(12, seed=5)
    _check_harmonic(data.psi, pts)
    lc = data.check_phi is not None
    if lc:
        if data.shell_check_phi is None:
            raise GeneratorError("torsion-free embedding needs both generating functions")
        phi, phi1 = F.lift(data.check_phi), F.lift(data.shell_check_phi)
        A, A1 = F.lift(data.check_A), F.lift(data.shell_check_A)
        if A.depends_on() - {0, 1, 3} or A1.depends_on() - {0, 1, 3, 5}:
            raise GeneratorError("potentials may depend only on x1, x2, y4 (and z6 for the shell)")
        for f, fib, pot, idx in ((phi, 3, A, (0, 1)), (phi1, 5, A1, (0, 1, 3))):
            d = f.diff(fib)
            for mu in idx:
                dev = np.abs((f.diff(mu) / d).jet(pts, 1).v - pot.diff(mu).jet(pts, 1).v)
                if dev.max() > CHECK_TOL:
                    raise GeneratorError(
                        f"fiber ratio along coordinate {mu} differs from the potential gradient by {dev.max():.3e}"
                    )
        h4 = F.const(data.eps4) * phi.diff(3) * phi.diff(3)
        h6 = F.const(data.eps6) * phi1.diff(5) * phi1.diff(5)
        w = [A.diff(0), A.diff(1)]
        w1 = [A1.diff(0), A1.diff(1), F.ZERO, A1.diff(3)]
    else:
        if data.h4 is None or data.h6 is None:
            raise GeneratorError("generic embedding needs h4 and h6")
        h4, h6 = F.lift(data.h4), F.lift(data.h6)
        if h4.depends_on() - {0, 1, 3}:
            raise GeneratorError("h4 may depend only on x1, x2, y4")
        if h6.depends_on() - {0, 1, 3, 5}:
            raise GeneratorError("h6 may depend only on x1, x2, y4, z6")
        w = _pad(data.w, 2)
        sw = _pad(data.shell_w, 3)
        w1 = [sw[0], sw[1], F.ZERO, sw[2]]
    coeffs = {(3, 0): w[0], (3, 1): w[1]}
    for mu in range(4):
        coeffs[(5, mu)] = w1[mu]
    m = DMetric(
        chart,
        _base_metric(data.psi),
        ((F.const(data.eps3), h4), (F.const(data.eps5), h6)),
        NConnection(chart, coeffs),
    )
    return Embedding(m, {"z6": "y3"}, lc)


# ---------------------------------------------------------------------------
# vertical conformal factors
# ---------------------------------------------------------------------------


def omega_constraint(m: DMetric, k: int, omega: ScalarField, p, uncorrected_sign: bool = False) -> np.ndarray:
    """Adapted derivatives ``e_tau omega`` of shell ``k``'s factor along every lower index.

    ``uncorrected_sign`` uses ``d_tau + n_tau d_a + w_tau d_b`` instead of the
    adapted frame ``d_tau - n_tau d_a - w_tau d_b``.
    """
    from .geometry import frame_data

    pts, _ = as_points(p)
    a3 = 2 * k + 2
    fd = frame_data(m, pts, order=1)
    grad = F.lift(omega).jet(pts, 1).g
    out = []
    for t in range(a3):
        if uncorrected_sign:
            row = grad[:, t] + fd.C.v[:, a3, t] * grad[:, a3] + fd.C.v[:, a3 + 1, t] * grad[:, a3 + 1]
        else:
            row = np.einsum("pm,pm->p", fd.F.v[:, t, :], grad)
        out.append(row)
    return np.stack(out, axis=1)


def apply_omega(
    m: DMetric, omegas: Sequence, check_points: np.ndarray | None = None,
    tol: float = CHECK_TOL, uncorrected_sign: bool = False,
) -> DMetric:
    """Scale each fiber pair of shell ``k`` by ``omegas[k]**2`` after checking the constraint."""
    pts = check_points
    if pts is None:
        pts = Box.uniform(m.dim, 0.2, 0.8).sample(16, seed=3)
    hs = list(m.h)
    for k, om in enumerate(omegas):
        if om is None:
            continue
        om = F.lift(om)
        dev = np.abs(omega_constraint(m, k, om, pts, uncorrected_sign))
        if dev.max() > tol:
            p, t = np.unravel_index(np.argmax(dev), dev.shape)
            raise GeneratorError(
                f"shell {k}: factor violates its constraint along index {t} by {dev[p, t]:.3e} "
                f"at {pts[p].tolist()}"
            )
        sq = om * om
        hs[k] = (sq * hs[k][0], sq * hs[k][1])
    return m.with_fields(h=tuple(hs))
