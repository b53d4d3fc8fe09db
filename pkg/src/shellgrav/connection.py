"""Canonical d-connection, its curvature stack and the Levi-Civita oracle.

Conventions (all indices zero-based, all frame components N-adapted):

* ``Gamma[a, b, c]`` is defined by ``D_{e_c} e_b = Gamma[a, b, c] e_a``.
* ``W[a, b, c]`` are the structure functions, ``[e_b, e_c] = W[a, b, c] e_a``.
* ``torsion[a, b, c] = Gamma[a, b, c] - Gamma[a, c, b] + W[a, b, c]``, the
  components of ``T(e_c, e_b)``.
* ``riemann[a, b, c, d]`` is the ``e_a`` component of ``R(e_c, e_d) e_b``.
* ``ricci[b, d] = sum_c riemann[c, b, c, d]``.  For a d-connection this is the
  block-wise contraction in which the mixed horizontal-vertical entries carry
  the minus sign of the reversed curvature slot order.

The canonical d-connection is built block by block.  For ``a, b`` in the same
block and direction ``c``:

* same block: Christoffel form of the block metric with frame derivatives
* ``c`` in a higher block: ``1/2 g^{aa} e_c g_{ab}``
* ``c`` in a lower block: the N-connection form, written with structure
  functions so that it holds verbatim on every shell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import fields as F
from ._jet import Jet, jeinsum
from .fields import ScalarField, as_points
from .geometry import DMetric, FrameData, anholonomy, frame_data

CHUNK = 256


def _mask(j: Jet, mask: np.ndarray) -> Jet:
    m = mask.astype(float)
    return Jet(j.v * m, j.g * m[..., None])


def _check_blocks(fd: FrameData):
    bad = np.abs(fd.gd.v) < 1e-300
    if bad.any():
        p, a = np.argwhere(bad)[0]
        raise ZeroDivisionError(
            f"singular metric block {fd.blocks[a]} (coefficient {a}) at point {fd.points[p].tolist()}"
        )


def _frame_metric_derivative(fd: FrameData) -> Jet:
    """``A[c, b] = e_c g_b`` as a first-order jet."""
    Fr, gd = fd.F, fd.gd
    v = np.einsum("pcm,pbm->pcb", Fr.v, gd.g)
    g = np.einsum("pcmz,pbm->pcbz", Fr.g, gd.g) + np.einsum("pcm,pbmz->pcbz", Fr.v, gd.h)
    return Jet(v, g)


def _canonical_gamma(fd: FrameData, W: Jet) -> Jet:
    d = fd.gd.v.shape[1]
    blk = fd.blocks
    A = _frame_metric_derivative(fd)
    ginv = fd.gd.first().reciprocal()
    g1 = fd.gd.first()
    eye = np.eye(d)

    def view(j: Jet, perm, expand):
        v = np.transpose(j.v, (0,) + tuple(1 + p for p in perm))
        g = np.transpose(j.g, (0,) + tuple(1 + p for p in perm) + (len(perm) + 1,))
        for ax in expand:
            v = np.expand_dims(v, 1 + ax)
            g = np.expand_dims(g, 1 + ax)
        return Jet(v, g)

    # index order everywhere: [a, b, c]
    A_ca = view(A, (1, 0), (1,))  # A[c, a] placed at (a, ., c)
    A_ba = view(A, (1, 0), (2,))  # A[b, a] placed at (a, b, .)
    A_ab = view(A, (0, 1), (2,))  # A[a, b] placed at (a, b, .)
    t1 = _mask(A_ca, eye[:, :, None] * np.ones((1, 1, d)))
    t2 = _mask(A_ba, eye[:, None, :] * np.ones((1, d, 1)))
    t3 = _mask(A_ab, eye[None, :, :] * np.ones((d, 1, 1)))
    half_ginv = Jet(0.5 * ginv.v[:, :, None, None], 0.5 * ginv.g[:, :, None, None, :])
    intra = half_ginv * ((t1 + t2) - t3)
    ctype = half_ginv * t1
    W_bac = view(W, (1, 0, 2), ())
    g_b = Jet(g1.v[:, None, :, None], g1.g[:, None, :, None, :])
    ltype = half_ginv * t1 - W * 0.5 + half_ginv * g_b * W_bac
    ba, bb, bc = blk[:, None, None], blk[None, :, None], blk[None, None, :]
    same = ba == bb
    return (
        _mask(intra, same & (bc == ba))
        + _mask(ctype, same & (bc > ba))
        + _mask(ltype, same & (bc < ba))
    )


@dataclass
class CurvatureStack:
    """Pointwise canonical connection data over a batch of points."""

    points: np.ndarray
    blocks: np.ndarray
    metric: np.ndarray  # (P, D) frame metric diagonal
    gamma: np.ndarray  # (P, D, D, D)
    anholonomy: np.ndarray  # (P, D, D, D)
    torsion: np.ndarray  # (P, D, D, D)
    riemann: np.ndarray  # (P, D, D, D, D)
    ricci: np.ndarray  # (P, D, D)
    compatibility: np.ndarray  # (P, D, D, D): [c, a, b] = (D_c g)_{ab}

    @property
    def ricci_mixed(self) -> np.ndarray:
        return self.ricci / self.metric[:, :, None]

    @property
    def scalar(self) -> np.ndarray:
        return np.einsum("paa->p", self.ricci_mixed)

    @property
    def einstein(self) -> np.ndarray:
        d = self.metric.shape[1]
        diag = self.metric[:, :, None] * np.eye(d)[None]
        return self.ricci - 0.5 * diag * self.scalar[:, None, None]

    @property
    def einstein_mixed(self) -> np.ndarray:
        d = self.metric.shape[1]
        return self.ricci_mixed - 0.5 * np.eye(d)[None] * self.scalar[:, None, None]

    def take(self, k: int) -> "CurvatureStack":
        return CurvatureStack(
            self.points[k : k + 1],
            self.blocks,
            *(getattr(self, n)[k : k + 1] for n in (
                "metric", "gamma", "anholonomy", "torsion", "riemann", "ricci", "compatibility"
            )),
        )


def _stack_chunk(m: DMetric, pts: np.ndarray, mixed_sign: int) -> CurvatureStack:
    fd = frame_data(m, pts, order=2)
    _check_blocks(fd)
    W = anholonomy(fd)
    G = _canonical_gamma(fd, W)
    Gv, Wv = G.v, W.v
    eG = np.einsum("pcn,pabdn->pabcd", fd.F.v, G.g)  # e_c Gamma[a, b, d]
    Q = np.einsum("pmbd,pamc->pabcd", Gv, Gv)
    TW = np.einsum("pmcd,pabm->pabcd", Wv, Gv)
    S = eG + Q - 0.5 * TW
    R = S - np.swapaxes(S, 3, 4)
    ric = np.einsum("pcbcd->pbd", R)
    blk = fd.blocks
    if mixed_sign != 1:
        flip = blk[:, None] < blk[None, :]
        ric = np.where(flip[None], mixed_sign * ric, ric)
    tors = Gv - np.swapaxes(Gv, 2, 3) + Wv
    gd = fd.gd.v
    A = _frame_metric_derivative(fd).v  # [c, b]
    d = gd.shape[1]
    eye = np.eye(d)
    # (D_c g)_{ab} = delta_ab e_c g_a - Gamma[b, a, c] g_b - Gamma[a, b, c] g_a
    comp = (
        np.einsum("pca,ab->pcab", A, eye)
        - np.einsum("pbac,pb->pcab", Gv, gd)
        - np.einsum("pabc,pa->pcab", Gv, gd)
    )
    return CurvatureStack(pts, blk, gd, Gv, Wv, tors, R, ric, comp)


def canonical_stack(m: DMetric, points, mixed_sign: int = 1, chunk: int = CHUNK) -> CurvatureStack:
    """Canonical connection, torsion, curvature and Ricci over a point batch.

    ``mixed_sign=-1`` flips the lower-upper mixed Ricci entries, which is the
    opposite sign convention for those components.
    """
    pts, _ = as_points(points)
    parts = [_stack_chunk(m, pts[k : k + chunk], mixed_sign) for k in range(0, len(pts), chunk)]
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return CurvatureStack(
        cat("points"), parts[0].blocks, cat("metric"), cat("gamma"), cat("anholonomy"),
        cat("torsion"), cat("riemann"), cat("ricci"), cat("compatibility"),
    )


# ---------------------------------------------------------------------------
# pointwise wrappers
# ---------------------------------------------------------------------------


def _point_or_batch(arr, single):
    return arr[0] if single else arr


def canonical_connection(m: DMetric, p) -> np.ndarray:
    """``Gamma[a, b, c]`` of the canonical d-connection."""
    pts, single = as_points(p)
    return _point_or_batch(canonical_stack(m, pts).gamma, single)


def torsion(m: DMetric, p) -> np.ndarray:
    """``T[a, b, c]``: the ``e_a`` component of ``T(e_c, e_b)``.

    For a shell with fiber pair ``(a3, a4)`` and lower index ``k``, the
    entry ``T[a3, k, a4]`` equals half the fiber derivative of ``n_k``.
    """
    pts, single = as_points(p)
    return _point_or_batch(canonical_stack(m, pts).torsion, single)


def curvature(m: DMetric, p) -> np.ndarray:
    pts, single = as_points(p)
    return _point_or_batch(canonical_stack(m, pts).riemann, single)


def ricci(m: DMetric, p, mixed_sign: int = 1) -> np.ndarray:
    pts, single = as_points(p)
    return _point_or_batch(canonical_stack(m, pts, mixed_sign).ricci, single)


def scalar(m: DMetric, p):
    pts, single = as_points(p)
    s = canonical_stack(m, pts).scalar
    return float(s[0]) if single else s


def einstein(m: DMetric, p) -> np.ndarray:
    pts, single = as_points(p)
    return _point_or_batch(canonical_stack(m, pts).einstein, single)


def curvature_family(blocks: np.ndarray, family: str, shell: int = 0) -> tuple:
    """Index masks selecting one of the six curvature families of a shell.

    ``family`` is one of ``hhhh``, ``vvhh``, ``hhhv``, ``vvhv``, ``hhvv``,
    ``vvvv`` naming the (upper, lower, pair) block types relative to shell
    ``shell``: ``h`` is any block below the shell fiber, ``v`` the shell fiber.
    """
    top = shell + 1
    kind = {"h": blocks < top, "v": blocks == top}
    a, b, c, d = family
    return np.ix_(
        np.flatnonzero(kind[a]), np.flatnonzero(kind[b]),
        np.flatnonzero(kind[c]), np.flatnonzero(kind[d]),
    )


# ---------------------------------------------------------------------------
# Levi-Civita oracle in the coordinate basis
# ---------------------------------------------------------------------------


def _coordinate_metric(fd: FrameData) -> Jet:
    X = Jet(
        fd.gd.v[:, :, None] * fd.C.v,
        fd.gd.g[:, :, None, :] * fd.C.v[..., None] + fd.gd.v[:, :, None, None] * fd.C.g,
        fd.gd.h[:, :, None, :, :] * fd.C.v[..., None, None]
        + fd.gd.g[:, :, None, :, None] * fd.C.g[..., None, :]
        + fd.gd.g[:, :, None, None, :] * fd.C.g[..., :, None]
        + fd.gd.v[:, :, None, None, None] * fd.C.h,
    )
    return jeinsum("am,an->mn", fd.C, X)


def _christoffel(G: Jet) -> Jet:
    """Coordinate Christoffel symbols ``Chr[l, m, n]`` as a first-order jet."""
    Ginv_v = np.linalg.inv(G.v)
    Ginv_g = -np.einsum("pmi,pijz,pjn->pmnz", Ginv_v, G.g, Ginv_v)
    Ginv = Jet(Ginv_v, Ginv_g)
    dG = G.derivative_jet()  # [a, b, c] = d_c G_ab

    def perm(j, order):
        return Jet(np.transpose(j.v, (0,) + order), np.transpose(j.g, (0,) + order + (4,)))

    # lowered [s, m, n] = 1/2 (d_m G_sn + d_n G_sm - d_s G_mn)
    t1 = perm(dG, (1, 3, 2))  # d_m G_sn: dG[s, n, m] -> [s, m, n]
    t2 = dG  # d_n G_sm: dG[s, m, n]
    t3 = perm(dG, (3, 1, 2))  # d_s G_mn: dG[m, n, s] -> [s, m, n]
    low = (t1 + t2 - t3) * 0.5
    return jeinsum("ls,smn->lmn", Ginv, low)


def _ricci_from_coordinate_connection(K: Jet) -> np.ndarray:
    """Ricci of a coordinate-basis connection ``K[l, m, n]`` with ``D_n d_m = K[l, m, n] d_l``."""
    dK = K.g  # [l, m, n, z] = d_z K[l, m, n]
    Kv = K.v
    # R(d_a, d_b) d_m contracted over the upper index and a
    d_a_Kmb = np.einsum("plmbl->pmb", dK)
    d_b_Kma = np.einsum("plmlb->pmb", dK)
    quad1 = np.einsum("psmb,plsl->pmb", Kv, Kv)
    quad2 = np.einsum("psml,plsb->pmb", Kv, Kv)
    return d_a_Kmb - d_b_Kma + quad1 - quad2


def _lc_chunk(m: DMetric, pts):
    fd = frame_data(m, pts, order=2)
    G = _coordinate_metric(fd)
    chr_ = _christoffel(G)
    return fd, G, chr_


def lc_connection(m: DMetric, p) -> np.ndarray:
    """Coordinate Christoffel symbols ``Chr[l, m, n]`` of the full metric."""
    pts, single = as_points(p)
    out = np.concatenate([_lc_chunk(m, pts[k : k + CHUNK])[2].v for k in range(0, len(pts), CHUNK)])
    return _point_or_batch(out, single)


def lc_ricci(m: DMetric, p) -> np.ndarray:
    """Levi-Civita Ricci tensor in the coordinate basis."""
    pts, single = as_points(p)
    out = []
    for k in range(0, len(pts), CHUNK):
        G = _coordinate_metric(frame_data(m, pts[k : k + CHUNK], order=2))
        if np.any(~np.isfinite(G.v)) or np.any(np.abs(np.linalg.det(G.v)) < 1e-300):
            raise ZeroDivisionError("singular coordinate metric")
        out.append(_ricci_from_coordinate_connection(_christoffel(G)))
    return _point_or_batch(np.concatenate(out), single)


def to_frame(fd_or_F: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """Transform a covariant 2-tensor from coordinate to adapted-frame components."""
    return np.einsum("pbm,pdn,pmn->pbd", fd_or_F, fd_or_F, tensor)


def lc_ricci_frame(m: DMetric, p) -> np.ndarray:
    """Levi-Civita Ricci tensor expressed in the N-adapted frame."""
    pts, single = as_points(p)
    Fv = frame_data(m, pts, order=1).F.v
    ric = lc_ricci(m, pts)
    return _point_or_batch(to_frame(Fv, ric), single)


def _canonical_coordinate_connection(fd: FrameData, G: Jet) -> Jet:
    """Canonical connection coefficients in the coordinate basis.

    ``K[l, m, n] = d_n C[b, m] F[b, l] + C[b, m] C[c, n] F[a, l] Gamma[a, b, c]``.
    """
    dC = fd.C.derivative_jet()  # [b, m, n]
    Fl = fd.F.first()
    Cl = fd.C.first()
    first = jeinsum("bmn,bl->lmn", dC, Fl)
    t = jeinsum("bm,abc->amc", Cl, G)
    t = jeinsum("cn,amc->amn", Cl, t)
    second = jeinsum("al,amn->lmn", Fl, t)
    return first + second


def distortion(m: DMetric, p) -> np.ndarray:
    """Distortion ``Z = Gamma_canonical - Gamma_LC`` in the coordinate basis."""
    pts, single = as_points(p)
    out = []
    for k in range(0, len(pts), CHUNK):
        fd = frame_data(m, pts[k : k + CHUNK], order=2)
        W = anholonomy(fd)
        K = _canonical_coordinate_connection(fd, _canonical_gamma(fd, W))
        out.append(K.v - _christoffel(_coordinate_metric(fd)).v)
    return _point_or_batch(np.concatenate(out), single)


def ricci_coordinate_route(m: DMetric, p) -> np.ndarray:
    """Canonical Ricci obtained through the coordinate-basis connection.

    An independent route to the same tensor: the connection is transported to
    coordinates, curved there with commuting derivatives, and the Ricci tensor
    is transformed back to the adapted frame.
    """
    pts, single = as_points(p)
    out = []
    for k in range(0, len(pts), CHUNK):
        fd = frame_data(m, pts[k : k + CHUNK], order=2)
        W = anholonomy(fd)
        K = _canonical_coordinate_connection(fd, _canonical_gamma(fd, W))
        out.append(to_frame(fd.F.v, _ricci_from_coordinate_connection(K)))
    return _point_or_batch(np.concatenate(out), single)


# ---------------------------------------------------------------------------
# residual evaluators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolitonData:
    kappa: ScalarField
    lam: float


def soliton_residual(m: DMetric, sol: SolitonData, p) -> np.ndarray:
    """``R_bc + D_b D_c kappa - lambda g_bc`` in the adapted frame."""
    pts, single = as_points(p)
    out = []
    for k in range(0, len(pts), CHUNK):
        blk = pts[k : k + CHUNK]
        st = canonical_stack(m, blk)
        fd = frame_data(m, blk, order=2)
        kj = sol.kappa.jet(blk, order=2)
        ek_v = np.einsum("pam,pm->pa", fd.F.v, kj.g)
        ek_g = np.einsum("pamz,pm->paz", fd.F.g, kj.g) + np.einsum("pam,pmz->paz", fd.F.v, kj.h)
        eek = np.einsum("pbn,pcn->pbc", fd.F.v, ek_g)  # e_b (e_c kappa)
        hess = eek - np.einsum("pacb,pa->pbc", st.gamma, ek_v)
        d = st.metric.shape[1]
        out.append(st.ricci + hess - sol.lam * st.metric[:, :, None] * np.eye(d)[None])
    return _point_or_batch(np.concatenate(out), single)


def _label(a: int, b: int | None = None) -> str:
    if b is None:
        return f"R{a + 1}_{a + 1}"
    return f"R_{a + 1}{b + 1}"


def field_residual(m: DMetric, src, p, stack: CurvatureStack | None = None) -> dict[str, np.ndarray]:
    """Residuals of the block-diagonal source equations.

    Rows ``R^a_a + source(block of a)`` for every diagonal entry, and every
    off-diagonal ``R_{bc}`` with ``block(b) >= block(c)``, which must vanish.
    ``src`` provides ``block_sources()`` returning one ScalarField per block.
    """
    pts, _ = as_points(p)
    st = stack if stack is not None else canonical_stack(m, pts)
    sources = src.block_sources(m.chart.nblocks)
    vals = F.evaluate(sources, pts, order=1)
    out: dict[str, np.ndarray] = {}
    mixed = st.ricci_mixed
    blk = st.blocks
    d = len(blk)
    for a in range(d):
        out[_label(a)] = mixed[:, a, a] + vals[blk[a]].v
    for b in range(d):
        for c in range(d):
            if b != c and blk[b] >= blk[c]:
                out[_label(b, c)] = st.ricci[:, b, c]
    return out


# ---------------------------------------------------------------------------
# closed-form Ricci components of the Killing ansatz
# ---------------------------------------------------------------------------


class AnsatzError(ValueError):
    """The metric is not of the Killing block form the closed formulas need."""


def _check_ansatz(m: DMetric):
    bad = m.killing_violations()
    if bad:
        idx, coord = bad[0]
        raise AnsatzError(f"coefficient {idx} depends on Killing coordinate {coord}")
    dep = m.nconn.dependency_violations()
    if dep:
        a, i, d = dep[0]
        raise AnsatzError(f"N[{a},{i}] depends on coordinate {d} above its shell")


def ricci_components_ansatz(m: DMetric, p, uncorrected: bool = False) -> dict[str, np.ndarray]:
    """Ricci components of a Killing-form d-metric from closed formulas.

    Labels follow :func:`field_residual`: ``R{a}_{a}`` for mixed diagonal
    entries and ``R_{a}{b}`` for the off-diagonal rows of each shell fiber
    against every lower index.

    For shell fibers the lower directions are taken relative to the lower
    adapted frame: derivatives are ``e_tau`` restricted to lower coordinates,
    and the N-coefficients are the frame components ``-F[tau, a]``.  On the
    base fiber this is the plain partial derivative and ``N[a, tau]``.

    ``uncorrected`` evaluates the off-diagonal fiber rows with coordinate
    N-coefficients and plain partial derivatives, for comparison.
    """
    _check_ansatz(m)
    pts, single = as_points(p)
    out: dict[str, list[np.ndarray]] = {}
    for k in range(0, len(pts), CHUNK):
        part = _ansatz_chunk(m, pts[k : k + CHUNK], uncorrected)
        for key, val in part.items():
            out.setdefault(key, []).append(val)
    res = {key: np.concatenate(v) for key, v in out.items()}
    if single:
        return {key: v[0] for key, v in res.items()}
    return res


def _ansatz_chunk(m: DMetric, pts: np.ndarray, uncorrected: bool) -> dict[str, np.ndarray]:
    fd = frame_data(m, pts, order=2)
    _check_blocks(fd)
    gd = fd.gd
    out: dict[str, np.ndarray] = {}

    g1, g2 = gd.v[:, 0], gd.v[:, 1]
    d1g1, d2g1 = gd.g[:, 0, 0], gd.g[:, 0, 1]
    d1g2, d2g2 = gd.g[:, 1, 0], gd.g[:, 1, 1]
    base = -(
        gd.h[:, 1, 0, 0]
        - d1g1 * d1g2 / (2 * g1)
        - d1g2**2 / (2 * g2)
        + gd.h[:, 0, 1, 1]
        - d2g1 * d2g2 / (2 * g2)
        - d2g1**2 / (2 * g1)
    ) / (2 * g1 * g2)
    out["R1_1"] = base
    out["R2_2"] = base.copy()

    Fv, Fg, Fh = fd.F.v, fd.F.g, fd.F.h
    for b in range(1, m.chart.nblocks):
        a3, a4 = 2 * b, 2 * b + 1
        h3, h4 = gd.v[:, a3], gd.v[:, a4]
        d4h3, d4h4 = gd.g[:, a3, a4], gd.g[:, a4, a4]
        d44h3 = gd.h[:, a3, a4, a4]
        bracket = d44h3 - d4h3**2 / (2 * h3) - d4h3 * d4h4 / (2 * h4)
        diag = -bracket / (2 * h3 * h4)
        out[f"R{a3 + 1}_{a3 + 1}"] = diag
        out[f"R{a4 + 1}_{a4 + 1}"] = diag.copy()
        lower = np.arange(a3)
        for t in range(a3):
            if uncorrected:
                n_v = fd.C.v[:, a3, t]
                n_4 = fd.C.g[:, a3, t, a4]
                n_44 = fd.C.h[:, a3, t, a4, a4]
                w_v = fd.C.v[:, a4, t]
                row3 = h3 / (2 * h4) * n_44 + (h3 / h4 * d4h4 - 1.5 * d4h3) * n_4 / (2 * h4)
                e_h3 = gd.g[:, a3, t]
                e_h4 = gd.g[:, a4, t]
                e_d4h3 = gd.h[:, a3, a4, t]
            else:
                n_4 = -Fg[:, t, a3, a4]
                n_44 = -Fh[:, t, a3, a4, a4]
                w_v = -Fv[:, t, a4]
                row3 = -(h3 / (2 * h4)) * (
                    n_44 + (1.5 * d4h3 / h3 - 0.5 * d4h4 / h4) * n_4
                )
                ft = Fv[:, t, lower]
                e_h3 = np.einsum("pm,pm->p", ft, gd.g[:, a3, lower])
                e_h4 = np.einsum("pm,pm->p", ft, gd.g[:, a4, lower])
                e_d4h3 = np.einsum("pm,pm->p", ft, gd.h[:, a3, a4, lower])
            row4 = (
                w_v / (2 * h3) * bracket
                + d4h3 / (4 * h3) * (e_h3 / h3 + e_h4 / h4)
                - e_d4h3 / (2 * h3)
            )
            out[f"R_{a3 + 1}{t + 1}"] = row3
            out[f"R_{a4 + 1}{t + 1}"] = row4
    return out
