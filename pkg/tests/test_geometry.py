"""Shell charts, d-metrics, adapted frames and the jet-group dimension."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shellgrav import fields as F
from shellgrav.geometry import (
    DMetric,
    NConnection,
    ShellChart,
    apply_frame,
    dmetric_matrix,
    frame_at,
    jet_group_dim,
    nonholonomy,
)

x = [F.coord(i) for i in range(8)]


def random_metric(s: int, seed: int) -> DMetric:
    """Polynomial and exponential coefficients with a full N-connection."""
    rng = np.random.default_rng(seed)
    chart = ShellChart(s)
    d = chart.dim

    def poly(upto):
        c = rng.uniform(-0.5, 0.5, size=3)
        i, j = rng.integers(0, upto, size=2)
        return F.const(c[0]) + F.const(c[1]) * x[i] + F.const(c[2]) * x[i] * x[j]

    def positive(upto):
        i = rng.integers(0, upto)
        return F.const(rng.uniform(0.8, 1.5)) * F.exp(F.const(rng.uniform(-0.3, 0.3)) * x[i])

    g = (positive(2), positive(2))
    h = tuple((positive(2 * k + 4), positive(2 * k + 4)) for k in range(s + 1))
    coeffs = {}
    for a in range(2, d):
        top = 2 * (a // 2) + 2
        for i in range(2 * (a // 2)):
            coeffs[(a, i)] = poly(top)
    return DMetric(chart, g, h, NConnection(chart, coeffs))


def pts_for(m, n=6, seed=0):
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(n, m.dim))


class TestShellChart:
    def test_labels_and_blocks(self):
        c = ShellChart(2)
        assert c.dim == 8 and c.nblocks == 4
        assert c.labels == ("x1", "x2", "y3", "y4", "z5", "z6", "z7", "z8")
        assert [c.tag(i) for i in (0, 3, 4, 7)] == ["base-h", "base-v", "shell-1", "shell-2"]
        assert c.name_map()["u6"] == 5

    def test_shell_cap(self):
        with pytest.raises(ValueError):
            ShellChart(4)
        assert ShellChart(4, max_shells=4).dim == 12

    def test_nconnection_rejects_upward_coupling(self):
        c = ShellChart(1)
        with pytest.raises(ValueError):
            NConnection(c, {(2, 4): x[0]})
        with pytest.raises(ValueError):
            NConnection(c, {(0, 1): x[0]})


class TestFrames:
    def test_identity_frame_without_n(self):
        m = DMetric(ShellChart(0), (1, 1), ((-1, 1),))
        fb = frame_at(m, [0.3, 0.4, 0.5, 0.6])
        assert np.array_equal(fb.frame, np.eye(4))

    def test_constant_n_row(self):
        c, d = 0.7, -0.2
        m = DMetric(ShellChart(0), (1, 1), ((1, 1),), NConnection(ShellChart(0), {(2, 0): c, (3, 0): d}))
        fb = frame_at(m, [0.3, 0.4, 0.5, 0.6])
        assert np.allclose(fb.frame[0], [1, 0, -c, -d])

    @pytest.mark.parametrize("s", [0, 1, 2])
    def test_duality(self, s):
        m = random_metric(s, seed=10 + s)
        for fb in frame_at(m, pts_for(m)):
            assert fb.duality_error() <= 1e-12

    def test_metric_matrix_simple_entries(self):
        chart = ShellChart(0)
        m = DMetric(chart, (1, 1), ((1, 1),), NConnection(chart, {(3, 0): 0.5}))
        G = dmetric_matrix(m, [0.3, 0.4, 0.5, 0.6])
        assert G[0, 3] == pytest.approx(0.5)
        assert G[0, 0] == pytest.approx(1.25)
        flat = DMetric(chart, (1, 1), ((-1, 1),))
        assert np.allclose(dmetric_matrix(flat, [0.1, 0.2, 0.3, 0.4]), np.diag([1, 1, -1, 1]))

    @pytest.mark.parametrize("s", [0, 1, 2])
    def test_congruence_to_block_diagonal(self, s):
        m = random_metric(s, seed=20 + s)
        pts = pts_for(m)
        G = dmetric_matrix(m, pts)
        diag = np.stack([f.jet(pts, 0).v for f in m.diagonal()], axis=1)
        for k, fb in enumerate(frame_at(m, pts)):
            assert np.allclose(fb.frame @ G[k] @ fb.frame.T, np.diag(diag[k]), atol=1e-12)

    def test_apply_frame_substitution(self):
        chart = ShellChart(1)
        q = 0.3 + x[0] * x[1]
        m = DMetric(chart, (1, 1), ((1, 1), (1, 1)), NConnection(chart, {(4, 0): q}))
        p = np.array([0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
        assert apply_frame(m, x[4], 0, p) == pytest.approx(-(0.3 + 0.12))

    def test_apply_frame_chain_expansion(self):
        m = random_metric(1, seed=3)
        f = F.sin(x[0] + x[5]) * x[3] + x[4] * x[2]
        pts = pts_for(m)
        grad = f.jet(pts, 1).g
        for alpha in range(6):
            frames = np.stack([fb.frame[alpha] for fb in frame_at(m, pts)])
            assert np.allclose(apply_frame(m, f, alpha, pts), (frames * grad).sum(axis=1), atol=1e-12)


def _hand_frame(m: DMetric):
    """Frame of a six-dimensional shell metric, from the inverse of the unit lower-triangular coframe."""
    N = m.nconn.get
    E = [[F.ONE if a == b else F.ZERO for b in range(6)] for a in range(6)]
    for i in range(2):
        for a in (2, 3):
            E[i][a] = F.neg(N(a, i))
        for a1 in (4, 5):
            E[i][a1] = F.neg(N(a1, i)) + N(a1, 2) * N(2, i) + N(a1, 3) * N(3, i)
    for a in (2, 3):
        for a1 in (4, 5):
            E[a][a1] = F.neg(N(a1, a))
    return E


def _apply(E, f, alpha):
    out = F.ZERO
    for mu in range(6):
        if not E[alpha][mu].is_zero():
            out = out + E[alpha][mu] * f.diff(mu)
    return out


class TestNonholonomy:
    def test_holonomic_without_n(self):
        m = DMetric(ShellChart(0), (1, 1), ((1, 1),))
        assert np.all(nonholonomy(m, 0, 1, [0.2, 0.3, 0.4, 0.5]) == 0)

    def test_four_dimensional_w_commutator(self):
        chart = ShellChart(0)
        w1 = x[0] * x[3] + F.sin(x[1] * x[3])
        w2 = x[1] * x[1] * x[3]
        m = DMetric(chart, (1, 1), ((1, 1),), NConnection(chart, {(3, 0): w1, (3, 1): w2}))
        pts = pts_for(m)
        expected = (F.neg(w2.diff(0)) + w1.diff(1) - w2 * w1.diff(3) + w1 * w2.diff(3)).jet(pts, 0).v
        assert np.allclose(nonholonomy(m, 0, 1, pts)[:, 3], expected, atol=1e-13)

    def test_commutator_on_test_functions(self):
        m = random_metric(1, seed=7)
        E = _hand_frame(m)
        pts = pts_for(m, 4)
        tests = [x[0] * x[5], F.sin(x[1] + x[4]), F.exp(0.3 * x[3]) * x[2], x[0] * x[0] * x[4],
                 F.cos(x[5] * x[3]), x[1] * x[2] * x[5], x[4] * x[4] + x[3]]
        for alpha, beta in [(0, 1), (0, 3), (1, 4), (2, 5), (3, 4)]:
            lhs = np.stack([(_apply(E, _apply(E, f, beta), alpha) - _apply(E, _apply(E, f, alpha), beta)).jet(pts, 0).v
                            for f in tests], axis=1)
            basis = np.stack([np.stack([_apply(E, f, g).jet(pts, 0).v for g in range(6)], axis=1) for f in tests], axis=1)
            W = nonholonomy(m, alpha, beta, pts)
            for k in range(len(pts)):
                sol, *_ = np.linalg.lstsq(basis[k], lhs[k], rcond=None)
                assert np.allclose(W[k], sol, atol=1e-9)

    def test_antisymmetry(self):
        m = random_metric(2, seed=4)
        pts = pts_for(m, 3)
        for a, b in itertools.combinations(range(8), 2):
            assert np.array_equal(nonholonomy(m, a, b, pts), -nonholonomy(m, b, a, pts))


class TestKillingPattern:
    def test_violation_detected(self):
        chart = ShellChart(1)
        m = DMetric(chart, (1, 1), ((1 + x[2] * 0.1, 1), (1, 1 + 0.1 * x[4])))
        bad = m.killing_violations()
        assert (2, 2) in bad and (5, 4) in bad

    def test_random_ansatz_clean(self):
        m = random_metric(1, seed=9)
        ok = DMetric(m.chart, m.g, m.h)
        pts = pts_for(ok)
        for f in ok.diagonal()[2:4]:
            assert np.all(np.abs(f.jet(pts, 1).g[:, 2]) <= 1e-12)


def _multi_indices(n, order):
    return len(list(itertools.combinations_with_replacement(range(n), order)))


class TestJetGroupDim:
    @pytest.mark.parametrize("m", range(1, 7))
    def test_first_jets_are_general_linear(self, m):
        assert jet_group_dim(m, m, 1) == m * m

    def test_worked_value(self):
        assert jet_group_dim(2, 2, 2) == 10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 3]))
    def test_enumeration(self, n, m, r):
        count = m * sum(_multi_indices(n, k) for k in range(1, r + 1))
        assert jet_group_dim(n, m, r) == count

    def test_invalid_and_overflow(self):
        with pytest.raises(ValueError):
            jet_group_dim(0, 1, 1)
        with pytest.raises(OverflowError):
            jet_group_dim(200, 10**6, 60)
        assert jet_group_dim(3, 2, 1) == 2 * math.comb(4, 3) - 2
