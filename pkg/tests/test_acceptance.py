"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py``; the verdicts are printed in the
terminal summary.
"""

import itertools
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import _gate
from _factories import (
    PSI,
    compatibility_oracle,
    constant_sources,
    generating_data,
    max_abs,
    phi_family,
    product_metric,
    random_ansatz,
    random_dmetric,
    sample,
    shell_generator,
    tensor_grid,
    x,
)
from shellgrav import fields as F
from shellgrav.afdm import (
    Box,
    GeneratingData,
    LCData,
    ShellGenerator,
    SourceSpec,
    VacuumData,
    _h_pair,
    apply_omega,
    build_solution,
    build_vacuum,
    decoupled_residuals,
    lc_extract,
)
from shellgrav.connection import canonical_stack, field_residual, lc_ricci, ricci, ricci_components_ansatz, torsion
from shellgrav.geometry import jet_group_dim
from shellgrav.kerr import DeformationRecipe, KerrParams, deform, epsilon_residuals, iso_box, kerr_grid, kerr_prime

GAUSS = F.QuadratureRule("gauss-legendre", 4)
HARMONIC = F.analytic_psi("quadratic", {"c0": 0.1, "c1": 0.2, "c2": -0.1, "Lambda0": 0.0})


def verdict(number, title, ok, detail):
    _gate.record(number, title, bool(ok), detail)
    assert ok, detail


def test_criterion_01_canonical_connection():
    t0 = time.perf_counter()
    worst_compat, worst_pure = 0.0, 0.0
    for seed in range(50):
        m = random_dmetric(seed % 3, seed=1000 + seed)
        pts = sample(m, 4, seed=seed)
        worst_compat = max(worst_compat, np.abs(compatibility_oracle(m, pts)).max(),
                           np.abs(canonical_stack(m, pts).compatibility).max())
        T = torsion(m, pts)
        blocks = m.chart.blocks()
        for b in range(m.chart.nblocks):
            idx = np.flatnonzero(blocks == b)
            worst_pure = max(worst_pure, np.abs(T[:, idx][:, :, idx][:, :, :, idx]).max())
    dt = time.perf_counter() - t0
    ok = worst_compat <= 1e-10 and worst_pure == 0.0 and dt < 30
    verdict(1, "canonical connection", ok,
            f"compatibility {worst_compat:.2e} <= 1e-10, pure-block torsion {worst_pure:.1e} == 0, {dt:.1f}s < 30s")


def test_criterion_02_product_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        m = product_metric(seed)
        pts = sample(m, 10, seed=seed)
        worst = max(worst, np.abs(ricci(m, pts) - lc_ricci(m, pts)).max())
    dt = time.perf_counter() - t0
    verdict(2, "product metrics, canonical = Levi-Civita", worst <= 1e-9 and dt < 10,
            f"max Ricci difference {worst:.2e} <= 1e-9 at 100 points, {dt:.1f}s < 10s")


def test_criterion_03_ansatz_formulas():
    t0 = time.perf_counter()
    worst, worst_pair = 0.0, 0.0
    for seed in range(25):
        s = seed % 3
        m = random_ansatz(s, seed=2000 + seed)
        pts = sample(m, 4, seed=seed)
        st = canonical_stack(m, pts)
        generic = field_residual(m, SourceSpec(F.ZERO, (F.ZERO,) * (s + 1)), pts, stack=st)
        for label, val in ricci_components_ansatz(m, pts).items():
            worst = max(worst, np.abs(val - generic[label]).max())
        Rm = np.einsum("paa->pa", st.ricci_mixed)
        for b in range(m.chart.nblocks):
            worst_pair = max(worst_pair, np.abs(Rm[:, 2 * b] - Rm[:, 2 * b + 1]).max())
    dt = time.perf_counter() - t0
    verdict(3, "closed-form Ricci rows", worst <= 1e-8 and worst_pair <= 1e-8 and dt < 60,
            f"closed form vs contraction {worst:.2e}, pairings {worst_pair:.2e} <= 1e-8, {dt:.1f}s < 60s")


def test_criterion_04_kerr_vacuum():
    t0 = time.perf_counter()
    worst = {}
    for a in (0.0, 0.3, 0.5, 0.7, 0.9):
        kp = KerrParams(1.0, a)
        worst[a] = float(np.abs(lc_ricci(kerr_prime(kp).metric, kerr_grid(kp, 32, 16))).max())
    dt = time.perf_counter() - t0
    top = max(worst.values())
    verdict(4, "Kerr vacuum", top <= 1e-6 and dt < 60,
            f"max |R| {top:.2e} <= 1e-6 over 32x16 grids for 5 spins, {dt:.1f}s < 60s")


def _family_data(index, s, rule):
    return GeneratingData(PSI, tuple(shell_generator(index + k, k) for k in range(s + 1)),
                          Box.uniform(4 + 2 * s, 0.2, 0.8), rule)


def test_criterion_05_end_to_end():
    """Gauss-Legendre fiber quadrature on every family, composite Simpson cross-check on one."""
    t0 = time.perf_counter()
    worst = {0: 0.0, 1: 0.0, 2: 0.0}
    for index in range(10):
        for s, n in ((0, 16), (1, 8), (2, 8)):
            src = constant_sources(s)
            m = build_solution(s, _family_data(index, s, GAUSS), src)
            worst[s] = max(worst[s], max_abs(field_residual(m, src, tensor_grid(m.dim, n))))
    src = constant_sources(0)
    m = build_solution(0, _family_data(0, 0, F.DEFAULT_RULE), src)
    simpson = max_abs(field_residual(m, src, tensor_grid(4, 16)))
    dt = time.perf_counter() - t0
    top = max(*worst.values(), simpson)
    verdict(5, "generating-function builds", top <= 1e-6 and dt < 300,
            f"4-d on 16^3 {worst[0]:.2e}, 6-d {worst[1]:.2e}, 8-d {worst[2]:.2e} on 8^3, "
            f"Simpson 16^3 {simpson:.2e} <= 1e-6 for 10 families, {dt:.0f}s < 300s")


def _lc_data():
    A0 = 0.5 * x[0] + 0.3 * x[1] * x[1]
    A1 = 0.2 * x[0] * x[1] + 0.4 * x[3]
    return LCData(PSI, (F.exp(0.5 * (x[3] + A0)) + 1.0, F.cosh(0.7 * (x[5] + A1)) + 0.5), (A0, A1),
                  (0.3 * x[0] * x[1], F.sin(x[0] + x[3])))


def test_criterion_06_torsion_free_extraction():
    src = SourceSpec.from_psi(PSI, (-0.6, -0.9))
    tors, res = 0.0, 0.0
    for s in (0, 1):
        m = lc_extract(s, _lc_data(), src)
        pts = sample(m, 50, seed=s)
        tors = max(tors, np.abs(torsion(m, pts)).max())
        res = max(res, max_abs(field_residual(m, src, pts)))
    L = -0.6
    phi = F.exp(0.5 * x[3] + 0.2 * x[0])
    n2 = [F.const(0.3), 0.1 * x[0]]
    gd = GeneratingData(PSI, (ShellGenerator(-0.6, tilde_phi=phi, n1=[0.1, 0.2], n2=n2),), Box.uniform(4, 0.2, 0.8))
    m = build_solution(0, gd, SourceSpec.from_psi(PSI, (L,)))
    pts = sample(4, 50, seed=3)
    T = torsion(m, pts)
    S = phi(pts) ** 2
    dS = 2 * phi(pts) * phi.jet(pts, 1).g[:, 3]
    rate = dS / (2 * S * S * np.sqrt(abs(L) * S))
    control = max(np.abs(T[:, 2, k, 3] - 0.5 * n2[k](pts) * rate).max() for k in (0, 1))
    ok = tors <= 1e-8 and res <= 1e-6 and control <= 1e-9
    verdict(6, "torsion-free extraction", ok,
            f"torsion {tors:.2e} <= 1e-8, residual {res:.2e} <= 1e-6, negative control {control:.2e} <= 1e-9")


def _vacuum_choice(branch, rng):
    def u(lo=-0.5, hi=0.5):
        return float(rng.uniform(lo, hi))

    common = dict(n1=[u(), u() * x[1]], n2=[u(), u() * x[0]], w=[u() * x[3] * x[0], u() * F.sin(x[3])])
    sign = float(rng.choice([-1.0, 1.0]))
    if branch == "v1":
        return VacuumData(HARMONIC, h3=1 + u(0, 0.3) * x[0] * x[1], h4=sign * F.exp(u(0.5, 1) * x[3] + u() * x[0]), **common)
    v2 = dict(h3=F.exp(u(1, 2) * x[3]) * (1 + u(0, 0.5) * x[0] * x[0]), h4_0=sign * u(0.5, 1.5))
    if branch == "v2":
        return VacuumData(HARMONIC, **v2, **common)
    if branch == "v3":
        k, rho, b = u(0.3, 0.8), u(0.5, 1.5), u()
        return VacuumData(HARMONIC, c1=1 + u(0, 0.5) * x[0], c2=k * F.exp(b * x[1]),
                          h4_0=sign * (F.exp(b * x[1]) / rho) ** 2, **common)
    return VacuumData(HARMONIC, **v2, **common, shell_h=F.exp(u(0.5, 1) * x[5] + u() * x[2] + u() * x[0]),
                      shell_h0=sign * u(0.5, 1.5), shell_n1=[u(), 0.0, u() * x[3], u()],
                      shell_n2=[u(), u(), u(), u() * x[0]], shell_w=[u() * x[5], u() * x[3], u(), u() * x[0] * x[5]])


def test_criterion_07_vacuum_branches():
    rng = np.random.default_rng(7)
    worst = {}
    for branch in ("v1", "v2", "v3", "jet-v2s"):
        worst[branch] = 0.0
        for trial in range(5):
            m = build_vacuum(branch, _vacuum_choice(branch, rng))
            pts = sample(m, 20, seed=trial)
            zero = SourceSpec.vacuum(m.chart.nblocks - 1)
            worst[branch] = max(worst[branch], max_abs(field_residual(m, zero, pts)),
                                max_abs(ricci_components_ansatz(m, pts)))
    top = max(worst.values())
    verdict(7, "vacuum branches", top <= 1e-6,
            ", ".join(f"{b} {v:.2e}" for b, v in worst.items()) + " <= 1e-6, 5 choices each")


def _lower_rows(res):
    keep = {}
    for key, val in res.items():
        if key.startswith(("e2[0]", "e3[0]", "e4[0]")):
            keep[key] = val
        elif key.startswith("R") and max(int(c) for c in key if c.isdigit()) <= 4:
            keep[key] = val
    return keep


def test_criterion_08_decoupling():
    src = constant_sources(1)
    pts = sample(6, 30, seed=8)
    base = generating_data(4, 1, GAUSS)
    ref = build_solution(1, base, src)
    ref_rows = _lower_rows({**field_residual(ref, src, pts), **decoupled_residuals(ref, src, pts)})
    ref_h5 = ref.h[1][0](pts)
    worst, moved = 0.0, np.inf
    for index in range(10):
        shell = replace(shell_generator(index, 1), tilde_lambda0=-0.5 - 0.05 * index,
                        n1=[0.2 * x[1], 0.1 * x[3], F.const(0.05 * index), x[0]])
        alt = build_solution(1, GeneratingData(PSI, (base.shells[0], shell), base.domain, GAUSS), src)
        rows = _lower_rows({**field_residual(alt, src, pts), **decoupled_residuals(alt, src, pts)})
        assert rows.keys() == ref_rows.keys()
        worst = max(worst, max(np.abs(rows[k] - ref_rows[k]).max() for k in rows))
        moved = min(moved, np.abs(alt.h[1][0](pts) - ref_h5).max())
    verdict(8, "decoupling witness", worst <= 1e-10 and moved > 1e-3,
            f"shell-0 rows move by {worst:.2e} <= 1e-10 while shell-1 coefficients move by at least {moved:.2e}")


def test_criterion_09_epsilon_order():
    kp = KerrParams(1.0, 0.6)
    rec = DeformationRecipe("epsilon", eta3=F.exp(0.5 * x[3]), mu_lambda=0.5, lambda_tilde=0.3,
                            chi=F.analytic_psi("quadratic", {"Lambda0": 0.3}),
                            psi=F.analytic_psi("quadratic", {"c0": 0.1, "c1": 0.05, "c2": -0.1, "Lambda0": 0.2}),
                            ratio=0.1 * F.sin(x[3] + x[0]) + 0.05 * x[1], eta_n=0.1 * x[0])
    pts = iso_box(kp).sample(30, seed=9)
    r = epsilon_residuals(lambda e: deform(kp, replace(rec, epsilon=e)), [0.04, 0.02, 0.01, 0.005], pts)
    ratios = r[:-1] / r[1:]
    ok = bool(np.all((ratios >= 3) & (ratios <= 5)))
    verdict(9, "epsilon order", ok,
            "residual ratios " + ", ".join(f"{q:.3f}" for q in ratios) + " in [3, 5] for eps 0.04, 0.02, 0.01")


@pytest.mark.xfail(strict=True, reason="a nonconstant admissible fiber factor breaks the Killing symmetry "
                                      "or rescales h3, h4 unevenly along the fiber, so the canonical Ricci "
                                      "components change at order one")
def test_criterion_10_omega_invariance():
    rng = np.random.default_rng(10)
    worst = 0.0
    for case in range(20):
        gd = GeneratingData(PSI, (ShellGenerator(-0.7, tilde_phi=phi_family(case, 3, 3)),), Box.uniform(4, 0.2, 0.8))
        src = constant_sources(0)
        m = build_solution(0, gd, src)
        a, b, c = rng.uniform(0.05, 0.3), rng.uniform(0.5, 2.0), rng.uniform(0, np.pi)
        if case % 2:
            omega = 1 + a * F.sin(b * x[2] + c)
        else:
            xi = _h_pair(0, gd, src).Xi
            omega = 1 + a * F.sin(b * x[2] + c) + a * F.tanh(xi)
        pts = sample(4, 10, seed=case)
        m2 = apply_omega(m, [omega], check_points=pts)
        worst = max(worst, np.abs(ricci(m, pts) - ricci(m2, pts)).max())
    verdict(10, "conformal-factor invariance", worst <= 1e-8,
            f"Ricci change {worst:.2e} vs 1e-8 over 20 admissible factors (expected failure)")


def test_criterion_11_jet_group_dimension():
    gl = all(jet_group_dim(m, m, 1) == m * m for m in range(1, 7))
    enum = True
    for n, m, r in itertools.product(range(1, 5), range(1, 5), (2, 3)):
        count = m * sum(len(list(itertools.combinations_with_replacement(range(n), k))) for k in range(1, r + 1))
        enum &= jet_group_dim(n, m, r) == count
    verdict(11, "jet group dimension", gl and enum,
            f"GL(m) at first order for m in 1..6: {gl}; enumeration for r in 2, 3 and n, m in 1..4: {enum}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
