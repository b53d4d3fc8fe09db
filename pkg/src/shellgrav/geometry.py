"""Shell charts, d-metrics, N-connections and N-adapted frames.

Index conventions (zero-based chart indices):

* block 0: base horizontal pair ``(0, 1)``
* block 1: base fiber pair ``(2, 3)``
* block ``k + 1``: fiber pair of shell ``k`` for ``k >= 1``, i.e. ``(2k+2, 2k+3)``

An N-connection coefficient ``N[a, i]`` couples a fiber index ``a`` to an index
``i`` of any lower block.  The coframe is ``e^a = du^a + N[a, i] du^i`` and the
frame vectors ``e_i`` are its dual basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import fields as F
from ._jet import Jet, jeinsum, jmatmul, jtranspose
from .fields import ScalarField, as_points

MAX_SHELLS = 3


@dataclass(frozen=True)
class ShellChart:
    """Coordinate bookkeeping for a ``4 + 2s`` dimensional shell chart."""

    s: int = 0
    max_shells: int = MAX_SHELLS

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("shell count must be non-negative")
        if self.s > self.max_shells:
            raise ValueError(f"shell count {self.s} exceeds the cap {self.max_shells}")

    @property
    def dim(self) -> int:
        return 4 + 2 * self.s

    @property
    def nblocks(self) -> int:
        return self.s + 2

    @property
    def labels(self) -> tuple[str, ...]:
        names = ["x1", "x2", "y3", "y4"]
        names += [f"z{k}" for k in range(5, self.dim + 1)]
        return tuple(names)

    def block_of(self, index: int) -> int:
        if not 0 <= index < self.dim:
            raise IndexError(f"index {index} outside chart of dimension {self.dim}")
        return index // 2

    def tag(self, index: int) -> str:
        b = self.block_of(index)
        return "base-h" if b == 0 else "base-v" if b == 1 else f"shell-{b - 1}"

    def block_indices(self, block: int) -> tuple[int, int]:
        return (2 * block, 2 * block + 1)

    def blocks(self) -> np.ndarray:
        return np.arange(self.dim) // 2

    def name_map(self) -> dict[str, int]:
        names = {lab: i for i, lab in enumerate(self.labels)}
        names.update({f"u{i + 1}": i for i in range(self.dim)})
        return names


@dataclass(frozen=True)
class NConnection:
    """Coefficients ``N[a, i]`` with ``a`` a fiber index and ``i`` in a lower block."""

    chart: ShellChart
    coeffs: Mapping[tuple[int, int], ScalarField] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (a, i), f in dict(self.coeffs).items():
            ba, bi = self.chart.block_of(a), self.chart.block_of(i)
            if ba < 1 or bi >= ba:
                raise ValueError(f"N[{a},{i}] must couple a fiber index to a lower block")
            f = F.lift(f)
            if not f.is_zero():
                clean[(a, i)] = f
        object.__setattr__(self, "coeffs", clean)

    @classmethod
    def from_shells(cls, chart: ShellChart, shells: Sequence[tuple[Sequence, Sequence]]) -> "NConnection":
        """Build from per-shell ``(n, w)`` lists over all lower indices.

        ``shells[k] = (n, w)`` sets ``N[2k+2, i] = n[i]`` and ``N[2k+3, i] = w[i]``.
        """
        coeffs = {}
        for k, (n, w) in enumerate(shells):
            a = 2 * k + 2
            for i, f in enumerate(n or ()):
                coeffs[(a, i)] = f
            for i, f in enumerate(w or ()):
                coeffs[(a + 1, i)] = f
        return cls(chart, coeffs)

    def get(self, a: int, i: int) -> ScalarField:
        return self.coeffs.get((a, i), F.ZERO)

    def dependency_violations(self) -> list[tuple[int, int, int]]:
        """Coefficients depending on coordinates beyond their own shell."""
        bad = []
        for (a, i), f in self.coeffs.items():
            top = 2 * self.chart.block_of(a) + 1
            for d in f.depends_on():
                if d > top:
                    bad.append((a, i, d))
        return bad


@dataclass(frozen=True)
class DMetric:
    """Block-diagonal d-metric with an N-connection.

    ``g`` is the base horizontal pair, ``h[k]`` the fiber pair of shell ``k``
    (``h[0]`` is the base fiber ``(h3, h4)``).  Coefficients are the signed
    metric components; ``signature`` records the intended signs.
    """

    chart: ShellChart
    g: tuple[ScalarField, ScalarField]
    h: tuple[tuple[ScalarField, ScalarField], ...]
    nconn: NConnection | None = None
    signature: tuple[int, ...] | None = None

    def __post_init__(self):
        g = tuple(F.lift(x) for x in self.g)
        h = tuple(tuple(F.lift(x) for x in pair) for pair in self.h)
        if len(g) != 2:
            raise ValueError("base block needs exactly two coefficients")
        if len(h) != self.chart.s + 1 or any(len(p) != 2 for p in h):
            raise ValueError(f"expected {self.chart.s + 1} fiber pairs of two coefficients")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)
        if self.nconn is None:
            object.__setattr__(self, "nconn", NConnection(self.chart))
        elif self.nconn.chart.dim != self.chart.dim:
            raise ValueError("N-connection chart does not match metric chart")
        sig = self.signature
        if sig is None:
            sig = (1,) * self.chart.dim
        sig = tuple(int(e) for e in sig)
        if len(sig) != self.chart.dim or any(e not in (1, -1) for e in sig):
            raise ValueError("signature needs one +1/-1 entry per coordinate")
        object.__setattr__(self, "signature", sig)

    @property
    def dim(self) -> int:
        return self.chart.dim

    def diagonal(self) -> list[ScalarField]:
        out = list(self.g)
        for pair in self.h:
            out.extend(pair)
        return out

    def killing_violations(self) -> list[tuple[int, int]]:
        """Structural check of the Killing pattern: shell-k coefficients and
        N-coefficients of shells up to k do not depend on the first fiber
        coordinate of shell k."""
        bad = []
        diag = self.diagonal()
        for k in range(self.chart.s + 1):
            killing = 2 * k + 2
            for idx in range(2, self.dim):
                if self.chart.block_of(idx) <= k + 1 and killing in diag[idx].depends_on():
                    bad.append((idx, killing))
            for (a, i), f in self.nconn.coeffs.items():
                if self.chart.block_of(a) <= k + 1 and killing in f.depends_on():
                    bad.append((a, killing))
        for idx in (0, 1):
            if diag[idx].depends_on() - {0, 1}:
                bad.append((idx, -1))
        return bad

    def with_fields(self, **changes) -> "DMetric":
        data = dict(chart=self.chart, g=self.g, h=self.h, nconn=self.nconn, signature=self.signature)
        data.update(changes)
        return DMetric(**data)


# ---------------------------------------------------------------------------
# batched frame data
# ---------------------------------------------------------------------------


@dataclass
class FrameData:
    """Jets of the frame-basis metric, coframe and frame over a point batch."""

    points: np.ndarray
    gd: Jet  # diagonal metric in the adapted frame, shape (D,)
    C: Jet  # coframe matrix, e^alpha = C[alpha, mu] du^mu
    F: Jet  # frame matrix, e_alpha = F[alpha, mu] d/du^mu
    blocks: np.ndarray


def frame_data(m: DMetric, points, order: int = 2) -> FrameData:
    pts, _ = as_points(points)
    if pts.shape[1] != m.dim:
        raise ValueError(f"points have dimension {pts.shape[1]}, chart needs {m.dim}")
    d = m.dim
    diag = m.diagonal()
    keys = list(m.nconn.coeffs)
    vals = F.evaluate(diag + [m.nconn.coeffs[k] for k in keys], pts, order)
    gd = Jet.stack(vals[:d])
    npts = pts.shape[0]
    M = Jet.constant(np.zeros((d, d)), npts, d, order)
    for (a, i), j in zip(keys, vals[d:]):
        M.v[:, a, i] = j.v
        M.g[:, a, i] = j.g
        if order >= 2:
            M.h[:, a, i] = j.h
    eye = np.eye(d)
    C = M + eye
    # unit lower-triangular inverse by a finite Neumann series
    inv = Jet.constant(eye, npts, d, order)
    term = Jet.constant(eye, npts, d, order)
    for _ in range(m.chart.nblocks - 1):
        term = -jmatmul(term, M)
        inv = inv + term
    return FrameData(pts, gd, C, jtranspose(inv), m.chart.blocks())


def frame_derivative(fd: FrameData, f: Jet) -> Jet:
    """``e_alpha f`` for a scalar jet ``f``; returns a first-order jet of shape (D,)."""
    v = np.einsum("pam,pm->pa", fd.F.v, f.g)
    g = np.einsum("pamz,pm->paz", fd.F.g, f.g) + np.einsum("pam,pmz->paz", fd.F.v, f.h)
    return Jet(v, g)


def anholonomy(fd: FrameData) -> Jet:
    """Structure functions ``W[alpha, beta, gamma]`` with ``[e_beta, e_gamma] = W^alpha e_alpha``.

    Returned as a first-order jet.
    """
    Fr = fd.F
    # X[b, g, m] = e_b(F[g, m]) = F[b, n] d_n F[g, m]
    xv = np.einsum("pbn,pgmn->pbgm", Fr.v, Fr.g)
    xg = np.einsum("pbnz,pgmn->pbgmz", Fr.g, Fr.g) + np.einsum("pbn,pgmnz->pbgmz", Fr.v, Fr.h)
    kv = xv - np.swapaxes(xv, 1, 2)
    kg = xg - np.swapaxes(xg, 1, 2)
    W = jeinsum("am,bgm->abg", fd.C.first(), Jet(kv, kg), order=1)
    # exact antisymmetry in the lower pair
    return Jet(0.5 * (W.v - np.swapaxes(W.v, 2, 3)), 0.5 * (W.g - np.swapaxes(W.g, 2, 3)))


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameBasis:
    frame: np.ndarray  # rows are e_alpha in coordinate components
    coframe: np.ndarray  # rows are e^alpha in coordinate components

    def duality_error(self) -> float:
        return float(np.max(np.abs(self.coframe @ self.frame.T - np.eye(self.frame.shape[0]))))


def frame_at(m: DMetric, p) -> FrameBasis | list[FrameBasis]:
    pts, single = as_points(p)
    fd = frame_data(m, pts, order=1)
    out = [FrameBasis(fd.F.v[k], fd.C.v[k]) for k in range(pts.shape[0])]
    return out[0] if single else out


def dmetric_matrix(m: DMetric, p) -> np.ndarray:
    """Coordinate-basis components of the full metric."""
    pts, single = as_points(p)
    fd = frame_data(m, pts, order=1)
    G = np.einsum("pam,pa,pan->pmn", fd.C.v, fd.gd.v, fd.C.v)
    return G[0] if single else G


def apply_frame(m: DMetric, f: ScalarField, alpha: int, p):
    pts, single = as_points(p)
    fd = frame_data(m, pts, order=1)
    grad = f.jet(pts, order=1).g
    out = np.einsum("pm,pm->p", fd.F.v[:, alpha, :], grad)
    return float(out[0]) if single else out


def nonholonomy(m: DMetric, alpha: int, beta: int, p) -> np.ndarray:
    """Components ``W^gamma`` of ``[e_alpha, e_beta]`` in the adapted frame."""
    pts, single = as_points(p)
    W = anholonomy(frame_data(m, pts, order=2)).v[:, :, alpha, beta]
    return W[0] if single else W


def jet_group_dim(n: int, m: int, r: int) -> int:
    """Dimension ``m * (C(n + r, n) - 1)`` of the r-jet group of maps R^n -> R^m."""
    for name, val in (("n", n), ("m", m), ("r", r)):
        if not isinstance(val, (int, np.integer)) or val < 1:
            raise ValueError(f"{name} must be a positive integer")
    total = m * (math.comb(n + r, n) - 1)
    if total > 2**63 - 1:
        raise OverflowError("jet group dimension exceeds 64-bit range")
    return int(total)
