"""The Kerr metric in adapted form and its deformations.

Two charts are used.

* Boyer-Lindquist chart ``(r, theta, y3, phi)`` with ``y3 = t + phi*B/A``.
  The prime metric there is exactly Kerr, so its Levi-Civita Ricci tensor
  vanishes.
* Isothermal chart ``(x1', theta, y3, phi, zeta5, ...)`` with
  ``dx1' = dr / sqrt(Delta)``.  The Kerr base block becomes
  ``XiK * ((dx1')**2 + dtheta**2)``.  Deformation targets live here; their
  base block is ``exp(psi) * ((dx1')**2 + dtheta**2)``.

Writing ``Delta = r**2 - 2*beta*r + gamma``, the isothermal coordinate has
the closed form ``r = beta + kappa*cosh(x1')`` with ``kappa**2 = beta**2 - gamma``
(``sinh`` when ``kappa**2 < 0``, ``exp`` when it vanishes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import integrate

from . import afdm
from . import fields as F
from .afdm import Box, GeneratingData, GeneratorError, LCShell, ShellGenerator, SourceSpec
from .fields import PsiSpec, ScalarField
from .geometry import DMetric, NConnection, ShellChart

HORIZON_MARGIN = 0.05
AXIS_MARGIN = 0.1
PHI = 3

MODES = ("ricci-soliton-LC", "torsionful", "epsilon", "jet-6d", "jet-8d", "jet-vacuum", "rotoid")


class KerrDomainError(ValueError):
    """A point is too close to the horizon or the rotation axis."""


@dataclass(frozen=True)
class KerrParams:
    """Mass ``m0`` and spin ``a`` with ``|a| < m0``."""

    m0: float
    a: float = 0.0

    def __post_init__(self):
        if self.m0 <= 0:
            raise ValueError("mass must be positive")
        if self.m0**2 - self.a**2 <= 0:
            raise ValueError("extremal or over-spinning parameters are not supported")

    @property
    def M(self) -> float:
        return math.sqrt(self.m0**2 - self.a**2)

    @property
    def p(self) -> float:
        return self.M / self.m0

    @property
    def q(self) -> float:
        return self.a / self.m0

    @classmethod
    def from_mpq(cls, M: float, p: float, q: float) -> "KerrParams":
        if abs(p * p + q * q - 1.0) > 1e-12:
            raise ValueError("p**2 + q**2 must equal 1")
        return cls(M / p, M * q / p)


def delta_form(kp: KerrParams, uncorrected: bool = False) -> tuple[float, float]:
    """``(beta, gamma)`` with ``Delta = r**2 - 2*beta*r + gamma``.

    The uncorrected variant drops the factor ``r`` in the mass term.
    """
    if uncorrected:
        return 0.0, kp.a**2 - 2.0 * kp.m0
    return kp.m0, kp.a**2


@dataclass(frozen=True)
class KerrCoeffs:
    Abar: ScalarField
    Bbar: ScalarField
    Cbar: ScalarField
    Delta: ScalarField
    XiK: ScalarField

    @property
    def h4(self) -> ScalarField:
        return self.Cbar - self.Bbar * self.Bbar / self.Abar

    @property
    def ratio(self) -> ScalarField:
        return self.Bbar / self.Abar

    @classmethod
    def from_fields(cls, kp: KerrParams, r: ScalarField, theta: ScalarField,
                    uncorrected: bool = False) -> "KerrCoeffs":
        beta, gamma = delta_form(kp, uncorrected)
        a2 = kp.a**2
        r2 = r * r
        s2 = F.sin(theta) * F.sin(theta)
        delta = r2 - F.const(2.0 * beta) * r + F.const(gamma)
        xi = r2 + F.const(a2) * F.cos(theta) * F.cos(theta)
        sum2 = r2 + F.const(a2)
        A = F.neg(delta - F.const(a2) * s2) / xi
        B = F.const(kp.a) * s2 * (delta - sum2) / xi
        C = s2 * (sum2 * sum2 - delta * F.const(a2) * s2) / xi
        return cls(A, B, C, delta, xi)


@dataclass(frozen=True)
class IsothermalMap:
    """``r(x1')`` solving ``dx1' = dr / sqrt(Delta)``."""

    beta: float
    kappa2: float

    @property
    def kappa(self) -> float:
        return math.sqrt(abs(self.kappa2))

    def r_field(self, index: int = 0) -> ScalarField:
        x = F.coord(index)
        if self.kappa2 > 0:
            return F.const(self.beta) + F.const(self.kappa) * F.cosh(x)
        if self.kappa2 < 0:
            return F.const(self.beta) + F.const(self.kappa) * F.sinh(x)
        return F.const(self.beta) + F.exp(x)

    def to_r(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, float)
        if self.kappa2 > 0:
            return self.beta + self.kappa * np.cosh(x1)
        if self.kappa2 < 0:
            return self.beta + self.kappa * np.sinh(x1)
        return self.beta + np.exp(x1)

    def to_x1(self, r) -> np.ndarray:
        u = np.asarray(r, float) - self.beta
        if self.kappa2 > 0:
            if np.any(u < self.kappa):
                raise KerrDomainError("radius inside the outer root of Delta")
            return np.arccosh(u / self.kappa)
        if self.kappa2 < 0:
            return np.arcsinh(u / self.kappa)
        return np.log(u)


def isothermal_map(kp: KerrParams, uncorrected_delta: bool = False) -> IsothermalMap:
    beta, gamma = delta_form(kp, uncorrected_delta)
    return IsothermalMap(beta, beta * beta - gamma)


def isothermal_quadrature(kp: KerrParams, r_values, r_ref: float, uncorrected_delta: bool = False) -> np.ndarray:
    """``x1'(r) - x1'(r_ref)`` by direct integration of ``1/sqrt(Delta)``."""
    beta, gamma = delta_form(kp, uncorrected_delta)

    def rate(r):
        return 1.0 / math.sqrt(r * r - 2.0 * beta * r + gamma)

    return np.array([integrate.quad(rate, r_ref, float(r), epsabs=1e-13, epsrel=1e-13)[0] for r in np.ravel(r_values)])


# ---------------------------------------------------------------------------
# prime metric
# ---------------------------------------------------------------------------


def check_domain(kp: KerrParams, r, theta, uncorrected_delta: bool = False,
                 horizon_margin: float = HORIZON_MARGIN, axis_margin: float = AXIS_MARGIN):
    beta, gamma = delta_form(kp, uncorrected_delta)
    r = np.atleast_1d(np.asarray(r, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    delta = r * r - 2.0 * beta * r + gamma
    bad = delta < horizon_margin * kp.m0**2
    if bad.any():
        j = int(np.argmax(bad))
        raise KerrDomainError(f"Delta = {delta[j]:.4g} below the horizon margin at r = {r[j]:.6g}")
    s = np.abs(np.sin(theta))
    bad = s < axis_margin
    if bad.any():
        j = int(np.argmax(bad))
        raise KerrDomainError(f"sin(theta) = {s[j]:.4g} below the axis margin at theta = {theta[j]:.6g}")


@dataclass(frozen=True)
class KerrPrime:
    """Prime Kerr data in the Boyer-Lindquist chart ``(r, theta, y3, phi)``.

    ``conformal_factor`` is ``XiK``: the base block equals
    ``XiK * ((dx1')**2 + dtheta**2)`` in the isothermal chart.
    """

    params: KerrParams
    metric: DMetric
    coeffs: KerrCoeffs
    iso: IsothermalMap
    uncorrected_delta: bool = False

    @property
    def conformal_factor(self) -> ScalarField:
        return self.coeffs.XiK

    def chart_points(self, r, theta, phi, t) -> np.ndarray:
        """Chart points for Boyer-Lindquist ``(r, theta, phi, t)``."""
        r, theta, phi, t = np.broadcast_arrays(*(np.asarray(v, float) for v in (r, theta, phi, t)))
        check_domain(self.params, r, theta, self.uncorrected_delta)
        base = np.stack([r.ravel(), theta.ravel(), np.zeros(r.size), phi.ravel()], axis=1)
        ratio = self.coeffs.ratio.jet(base, 0).v
        base[:, 2] = t.ravel() + phi.ravel() * ratio
        return base

    def point_data(self, r, theta, phi, t) -> dict[str, np.ndarray]:
        pts = self.chart_points(r, theta, phi, t)
        c = self.coeffs
        vals = F.evaluate([c.Abar, c.Bbar, c.Cbar, c.Delta, c.XiK, c.h4,
                           self.metric.nconn.get(2, 0), self.metric.nconn.get(2, 1)], pts, order=1)
        names = ["Abar", "Bbar", "Cbar", "Delta", "XiK", "h4", "n1", "n2"]
        out = {k: j.v for k, j in zip(names, vals)}
        out["points"] = pts
        out["x1_iso"] = self.iso.to_x1(pts[:, 0])
        return out


def kerr_prime(kp: KerrParams, at=None, uncorrected_delta: bool = False) -> KerrPrime:
    """Prime Kerr metric; ``at`` is an optional ``(r, theta, phi, t)`` tuple checked against the margins."""
    r, theta = F.coord(0), F.coord(1)
    c = KerrCoeffs.from_fields(kp, r, theta, uncorrected_delta)
    chart = ShellChart(0)
    phi = F.coord(PHI)
    ratio = c.ratio
    nconn = NConnection(chart, {(2, 0): F.neg(phi * ratio.diff(0)), (2, 1): F.neg(phi * ratio.diff(1))})
    m = DMetric(chart, (c.XiK / c.Delta, c.XiK), ((c.Abar, c.h4),), nconn, signature=(1, 1, -1, 1))
    prime = KerrPrime(kp, m, c, isothermal_map(kp, uncorrected_delta), uncorrected_delta)
    if at is not None:
        check_domain(kp, at[0], at[1], uncorrected_delta)
    return prime


def kerr_grid(kp: KerrParams, nr: int = 32, ntheta: int = 16, r_over_m=(3.0, 10.0),
              theta_range=(math.pi / 6, 5 * math.pi / 6), phi: float = 0.4, y3: float = 0.0) -> np.ndarray:
    """Boyer-Lindquist chart points on an ``nr x ntheta`` grid."""
    r = np.linspace(r_over_m[0] * kp.m0, r_over_m[1] * kp.m0, nr)
    th = np.linspace(theta_range[0], theta_range[1], ntheta)
    R, T = np.meshgrid(r, th, indexing="ij")
    n = R.size
    return np.stack([R.ravel(), T.ravel(), np.full(n, y3), np.full(n, phi)], axis=1)


def iso_coeffs(kp: KerrParams, uncorrected_delta: bool = False) -> KerrCoeffs:
    """Kerr coefficients as fields of the isothermal chart."""
    iso = isothermal_map(kp, uncorrected_delta)
    return KerrCoeffs.from_fields(kp, iso.r_field(0), F.coord(1), uncorrected_delta)


def iso_box(kp: KerrParams, s: int = 0, r_over_m=(3.0, 10.0), theta_range=(math.pi / 6, 5 * math.pi / 6),
            phi_range=(-1.2, 1.2), jet_range=(0.2, 0.8), uncorrected_delta: bool = False) -> Box:
    """Isothermal-chart box covering the given Boyer-Lindquist ranges."""
    iso = isothermal_map(kp, uncorrected_delta)
    x_lo, x_hi = iso.to_x1([r_over_m[0] * kp.m0, r_over_m[1] * kp.m0])
    lo = [float(x_lo), theta_range[0], 0.0, phi_range[0]] + [jet_range[0]] * (2 * s)
    hi = [float(x_hi), theta_range[1], 1.0, phi_range[1]] + [jet_range[1]] * (2 * s)
    return Box(tuple(lo), tuple(hi))


# ---------------------------------------------------------------------------
# deformation recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeformationRecipe:
    """Inputs of the deformation pipelines.

    Fields are ScalarFields over the isothermal chart
    ``(x1', theta, y3, phi, zeta5, ...)``.  ``eta3`` is the polarization of
    ``h3``; ``eta_n`` the potential whose gradient gives the ``n``
    coefficients.  Epsilon modes use ``ratio`` for the first-order generating
    ratio, or the rotoid constants.  Jet modes append ``shells``.
    """

    mode: str
    eta3: ScalarField | None = None
    v_lambda: ScalarField | float = 0.5
    tilde_lambda0: float = 0.5
    psi: PsiSpec = field(default_factory=lambda: PsiSpec(F.ZERO, F.ZERO))
    eta_n: ScalarField = F.ZERO
    xi0: ScalarField = F.ZERO
    n1: Sequence = ()
    n2: Sequence = ()
    epsilon: float | None = None
    mu_lambda: float = 0.5
    lambda_tilde: float = 0.0
    chi: PsiSpec = field(default_factory=lambda: PsiSpec(F.ZERO, F.ZERO))
    ratio: ScalarField | None = None
    zeta: float = 0.0
    omega0: float = 1.0
    phi0: float = 0.0
    cosmological: float = 0.5
    shells: tuple = ()
    domain: Box | None = None
    uncorrected_delta: bool = False
    uncorrected_chi: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown deformation mode {self.mode!r}; expected one of {MODES}")


@dataclass
class KerrDeformation:
    metric: DMetric
    sources: SourceSpec
    recipe: DeformationRecipe
    polarizations: dict[str, ScalarField]
    extras: dict = field(default_factory=dict)


def polarizations(kp: KerrParams, m: DMetric, uncorrected_delta: bool = False) -> dict[str, ScalarField]:
    """Ratios of target coefficients to the isothermal-chart prime Kerr values."""
    c = iso_coeffs(kp, uncorrected_delta)
    (h3, h4) = m.h[0]
    return {
        "eta1": m.g[0] / c.XiK,
        "eta2": m.g[1] / c.XiK,
        "eta3": h3 / c.Abar,
        "eta4": h4 / c.h4,
    }


def theorem_eta4(kp: KerrParams, eta3: ScalarField, v_lambda, lower: float,
                 uncorrected_delta: bool = False, rule=F.DEFAULT_RULE) -> ScalarField:
    """``eta4`` from ``eta3`` directly, without the generating function.

    ``eta4 = A (d sqrt|eta3|)**2 / ((A C - B**2) I)`` with
    ``I = (v_lambda*eta3)(lower) + integral(v_lambda d eta3)``; the boundary
    term matches the normalization of the generator.
    """
    c = iso_coeffs(kp, uncorrected_delta)
    vl = F.lift(v_lambda)
    eta3 = F.lift(eta3)
    d = eta3.diff(PHI)
    integral = F.fiber_slice(vl * eta3, PHI, lower) + F.integrate_fiber(vl * d, PHI, lower, rule=rule)
    root_d2 = d * d / (F.const(4.0) * F.absval(eta3))
    return c.Abar * root_d2 / ((c.Abar * c.Cbar - c.Bbar * c.Bbar) * integral)


def _domain(kp: KerrParams, recipe: DeformationRecipe, s: int) -> Box:
    box = recipe.domain or iso_box(kp, s, uncorrected_delta=recipe.uncorrected_delta)
    return box.extended(4 + 2 * s, 0.2, 0.8)


def _need(recipe, *names):
    for n in names:
        if getattr(recipe, n) is None:
            raise GeneratorError(f"mode {recipe.mode} needs {n}")


def _grad_n(recipe) -> list[ScalarField]:
    pot = F.lift(recipe.eta_n)
    if pot.depends_on() - {0, 1}:
        raise GeneratorError("the n potential may depend only on the base coordinates")
    return [pot.diff(0), pot.diff(1)]


def _base_generator(kp: KerrParams, recipe: DeformationRecipe, torsionful: bool, lam0: float) -> ShellGenerator:
    c = iso_coeffs(kp, recipe.uncorrected_delta)
    eta3 = F.lift(recipe.eta3)
    if PHI not in eta3.depends_on():
        raise GeneratorError("eta3 must depend on phi; a phi-independent polarization gives a degenerate h4")
    S = F.const(4.0 * lam0) * c.Abar * eta3
    n1 = _grad_n(recipe)
    n2: list = []
    if torsionful:
        n1 = [a + F.lift(b) for a, b in zip(n1, list(recipe.n1) + [F.ZERO] * (2 - len(recipe.n1)))]
        n2 = [F.lift(b) for b in recipe.n2]
        if all(f.is_zero() for f in n2):
            raise GeneratorError("torsionful mode needs a nonzero n2 integration function")
    return ShellGenerator(tilde_lambda0=lam0, tilde_phi_sq=S, n1=n1, n2=n2, xi0=recipe.xi0)


def _assemble(kp, recipe, s, generators, src) -> DMetric:
    gd = GeneratingData(recipe.psi, tuple(generators), _domain(kp, recipe, s))
    m = afdm.build_solution(s, gd, src)
    return m.with_fields(signature=(1, 1, -1, 1) + (1,) * (2 * s))


def deform_ricci_soliton(kp: KerrParams, recipe: DeformationRecipe) -> KerrDeformation:
    """Torsion-free deformation driven by ``eta3`` with a constant fiber source.

    ``h3 = eta3 * A``; ``h4`` and ``w`` follow from the generator with
    ``Phi~**2 = 4 Lambda0 A eta3``; ``n`` is the gradient of ``eta_n``.
    """
    _need(recipe, "eta3")
    vl = F.lift(recipe.v_lambda)
    if vl.depends_on():
        raise GeneratorError("the torsion-free mode needs a constant fiber source")
    src = SourceSpec.from_psi(recipe.psi, (vl,))
    gen = _base_generator(kp, recipe, False, recipe.tilde_lambda0)
    m = _assemble(kp, recipe, 0, [gen], src)
    lower = _domain(kp, recipe, 0).lower[PHI]
    extras = {"theorem_eta4": theorem_eta4(kp, recipe.eta3, vl, lower, recipe.uncorrected_delta)}
    return KerrDeformation(m, src, recipe, polarizations(kp, m, recipe.uncorrected_delta), extras)


def deform_torsionful(kp: KerrParams, recipe: DeformationRecipe) -> KerrDeformation:
    """Deformation with a nonzero ``n2`` integration function and a base-only fiber source."""
    _need(recipe, "eta3")
    vl = F.lift(recipe.v_lambda)
    if vl.depends_on() - {0, 1}:
        raise GeneratorError("the torsionful mode needs a fiber source depending on the base only")
    src = SourceSpec.from_psi(recipe.psi, (vl,))
    gen = _base_generator(kp, recipe, True, recipe.tilde_lambda0)
    m = _assemble(kp, recipe, 0, [gen], src)
    pair = afdm._h_pair(0, GeneratingData(recipe.psi, (gen,), _domain(kp, recipe, 0)), src)
    integrand = afdm.n_integrand(pair, PHI)
    extras = {"n_fiber_derivative": [F.lift(b) * integrand for b in gen.n2]}
    return KerrDeformation(m, src, recipe, polarizations(kp, m, recipe.uncorrected_delta), extras)


# ---------------------------------------------------------------------------
# epsilon deformations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonCoefficients:
    chi: ScalarField
    chi3: ScalarField
    chi4: ScalarField
    w_bar: tuple[ScalarField, ScalarField]


def _ratio(recipe: DeformationRecipe, lam_eff: float) -> ScalarField:
    if recipe.ratio is not None:
        return F.lift(recipe.ratio)
    phase = F.const(recipe.omega0) * F.coord(PHI) + F.const(recipe.phi0)
    return F.const(lam_eff / (2.0 * recipe.mu_lambda)) + F.const(recipe.zeta) * F.sin(phase)


def epsilon_coefficients(S: ScalarField, ratio: ScalarField, chi: ScalarField, lam_eff: float,
                         mu_lambda: float, uncorrected: bool = False) -> EpsilonCoefficients:
    """First-order coefficients for ``Phi~ -> Phi~ (1 + eps * ratio)``.

    With ``S = Phi~**2``:
    ``chi3 = 2 ratio - lam_eff/mu``,
    ``chi4 = 2 d(ratio Phi~)/d Phi~ - 2 ratio - lam_eff/mu = 4 S d ratio / d S - lam_eff/mu``,
    ``w_bar_i = 2 S (d_i ratio - w_i d ratio) / d S``.
    The uncorrected variant divides ``d(ratio Phi~)`` by ``Phi~`` instead of its fiber derivative.
    """
    dS = S.diff(PHI)
    dq = ratio.diff(PHI)
    shift = F.const(lam_eff / mu_lambda)
    chi3 = F.const(2.0) * ratio - shift
    if uncorrected:
        chi4 = F.const(2.0) * (dq + ratio * dS / (F.const(2.0) * S)) - F.const(2.0) * ratio - shift
    else:
        chi4 = F.const(4.0) * S * dq / dS - shift
    w0 = [S.diff(i) / dS for i in (0, 1)]
    w_bar = tuple(F.const(2.0) * S * (ratio.diff(i) - w0[i] * dq) / dS for i in (0, 1))
    return EpsilonCoefficients(F.lift(chi), chi3, chi4, w_bar)


def _epsilon_base(kp, recipe, eps: float, lam_eff: float):
    """Linearized base fields and their exact first-order sources."""
    _need(recipe, "eta3")
    if not 0.0 <= eps <= 0.1:
        raise GeneratorError(f"epsilon {eps} outside [0, 0.1]")
    mu = recipe.mu_lambda
    c = iso_coeffs(kp, recipe.uncorrected_delta)
    eta3 = F.lift(recipe.eta3)
    S = F.const(4.0 * mu) * c.Abar * eta3
    dS = S.diff(PHI)
    if dS.is_zero():
        raise GeneratorError("eta3 must depend on phi")
    q = _ratio(recipe, lam_eff)
    co = epsilon_coefficients(S, q, recipe.chi.psi, lam_eff, mu, recipe.uncorrected_chi)
    e = F.const(eps)
    one = F.ONE
    h3 = S / F.const(4.0 * mu) * (one + e * co.chi3)
    h4 = dS * dS / (F.const(4.0 * mu) * S * S) * (one + e * co.chi4)
    w = [S.diff(i) / dS + e * co.w_bar[i] for i in (0, 1)]
    n = _grad_n(recipe)
    ep = F.exp(recipe.psi.psi) * (one + e * co.chi)
    e1, e2 = recipe.psi.eps
    g = (F.const(e1) * ep, F.const(e2) * ep)
    target_psi = PsiSpec(recipe.psi.psi + e * co.chi, F.lift(recipe.psi.Lambda) + e * F.lift(recipe.chi.Lambda),
                         recipe.psi.eps, recipe.psi.axes)
    return g, (h3, h4), n, w, target_psi, F.const(mu + eps * lam_eff), co


def _epsilon_metric(kp, recipe, eps, lam_eff, shells=(), shell_source=None):
    g, pair, n, w, tpsi, v_src, co = _epsilon_base(kp, recipe, eps, lam_eff)
    s = len(shells)
    chart = ShellChart(s)
    coeffs = {(2, 0): n[0], (2, 1): n[1], (3, 0): w[0], (3, 1): w[1]}
    hs = [pair]
    for k, sh in enumerate(shells, start=1):
        h_a, h_b, sn, sw = afdm.lc_shell_fields(k, sh, shell_source)
        hs.append((h_a, h_b))
        for mu in range(2 * k + 2):
            coeffs[(2 * k + 2, mu)] = sn[mu]
            coeffs[(2 * k + 3, mu)] = sw[mu]
    m = DMetric(chart, g, tuple(hs), NConnection(chart, coeffs), signature=(1, 1, -1, 1) + (1,) * (2 * s))
    shell_src = (F.lift(shell_source),) * s if s else ()
    src = SourceSpec(tpsi.h_source, (v_src,) + shell_src)
    return m, src, co


def deform_epsilon(kp: KerrParams, recipe: DeformationRecipe, epsilon: float | None = None) -> KerrDeformation:
    """First-order deformation ``Phi~ -> Phi~ (1 + eps * ratio)`` of the torsion-free target.

    The returned sources are the exact ones of the deformed data
    (``mu_lambda + eps * lambda_tilde`` on the fiber, the conformal source of
    ``psi + eps * chi`` on the base), so residuals are second order in ``eps``.
    """
    eps = recipe.epsilon if epsilon is None else epsilon
    if eps is None:
        raise GeneratorError("epsilon mode needs a value of epsilon")
    m, src, co = _epsilon_metric(kp, recipe, eps, recipe.lambda_tilde)
    return KerrDeformation(m, src, replace(recipe, epsilon=eps), polarizations(kp, m, recipe.uncorrected_delta),
                           {"coefficients": co, "epsilon": eps})


def epsilon_residuals(build, epsilons: Sequence[float], points) -> np.ndarray:
    """Maximum field residual of ``build(eps)`` for each epsilon."""
    from .connection import field_residual

    out = []
    for eps in epsilons:
        d = build(eps)
        res = field_residual(d.metric, d.sources, points)
        out.append(max(float(np.abs(v).max()) for v in res.values()))
    return np.array(out)


# ---------------------------------------------------------------------------
# jet prolongations
# ---------------------------------------------------------------------------


def _check_jet_pattern(shells, s):
    for k, sh in enumerate(shells, start=1):
        allowed = set(range(2 * k + 4)) - {2 * k + 2}
        for name, f in (("generating function", sh.check_phi), ("potential", sh.check_A), ("n potential", sh.n_potential)):
            extra = F.lift(f).depends_on() - allowed
            if extra:
                raise GeneratorError(f"shell {k} {name} depends on forbidden coordinates {sorted(extra)}")


def vacuum_balance_epsilon(mu_lambda: float, lambda_tilde: float, cosmological: float) -> float:
    """``eps = -mu / (lambda_tilde + Lambda)``; must lie in ``(0, 0.1]``."""
    total = lambda_tilde + cosmological
    if total == 0:
        raise GeneratorError("vacuum balance needs lambda_tilde + Lambda != 0")
    eps = -mu_lambda / total
    if not 0.0 < eps <= 0.1:
        raise GeneratorError(f"vacuum-balance epsilon {eps:.4g} outside (0, 0.1]")
    return eps


def prolong_jet(kp: KerrParams, recipe: DeformationRecipe, epsilon: float | None = None) -> KerrDeformation:
    """Jet prolongations: ``jet-6d``, ``jet-8d``, ``jet-vacuum`` and ``rotoid``.

    ``jet-6d`` puts torsion-free shells on the torsion-free base, ``jet-8d``
    on the torsionful base, all with the fiber source ``cosmological``.
    ``jet-vacuum`` and ``rotoid`` use the first-order base with shells
    sourced by ``lambda_tilde + cosmological``; ``jet-vacuum`` fixes
    ``epsilon`` by the vacuum balance.
    """
    shells = tuple(recipe.shells)
    if recipe.mode not in ("jet-6d", "jet-8d", "jet-vacuum", "rotoid"):
        raise GeneratorError(f"prolong_jet does not handle mode {recipe.mode}")
    if not shells:
        raise GeneratorError("jet modes need at least one shell")
    if len(shells) > 2:
        raise GeneratorError("jet modes support at most two shells")
    _check_jet_pattern(shells, len(shells))
    s = len(shells)
    lam = recipe.cosmological
    if recipe.mode in ("jet-6d", "jet-8d"):
        torsionful = recipe.mode == "jet-8d"
        base = replace(recipe, v_lambda=lam, tilde_lambda0=lam)
        gen = _base_generator(kp, base, torsionful, lam)
        src = SourceSpec.from_psi(recipe.psi, (F.const(lam),) * (s + 1))
        m = _assemble(kp, base, s, [gen, *shells], src)
        return KerrDeformation(m, src, recipe, polarizations(kp, m, recipe.uncorrected_delta), {})
    lam_eff = recipe.lambda_tilde + lam
    if recipe.mode == "jet-vacuum":
        eps = vacuum_balance_epsilon(recipe.mu_lambda, recipe.lambda_tilde, lam)
    else:
        eps = recipe.epsilon if epsilon is None else epsilon
        if eps is None:
            raise GeneratorError("rotoid mode needs a value of epsilon")
    m, src, co = _epsilon_metric(kp, recipe, eps, lam_eff, shells, F.const(lam_eff))
    return KerrDeformation(m, src, replace(recipe, epsilon=eps), polarizations(kp, m, recipe.uncorrected_delta),
                           {"coefficients": co, "epsilon": eps})


def deform(kp: KerrParams, recipe: DeformationRecipe) -> KerrDeformation:
    """Dispatch on ``recipe.mode``."""
    if recipe.mode == "ricci-soliton-LC":
        return deform_ricci_soliton(kp, recipe)
    if recipe.mode == "torsionful":
        return deform_torsionful(kp, recipe)
    if recipe.mode == "epsilon":
        return deform_epsilon(kp, recipe)
    return prolong_jet(kp, recipe)
