"""Recipe-driven batch front end.

A recipe is a YAML (or JSON) document that fully determines a build and the
checks run against it.  Running a recipe writes a JSON report with residual
statistics per equation label and, optionally, a long-format CSV residual
table with the columns ``coordinates..., equation, residual``.

Exit codes: 0 when every check passes, 1 when any check fails its tolerance,
2 for invalid recipes or arguments.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import afdm
from . import fields as F
from . import kerr as K
from .connection import field_residual, lc_ricci, torsion
from .geometry import DMetric, NConnection, ShellChart

KINDS = ("afdm-build", "vacuum", "lc-extract", "kerr-deform", "verify-only")
CHECKS = ("residual", "torsion", "lc-ricci", "decoupled", "epsilon-order")
DEFAULT_TOL = {"residual": 1e-6, "torsion": 1e-8, "lc-ricci": 1e-6, "decoupled": 1e-8}
EPSILON_ORDER_BAND = (3.0, 5.0)
QUANTILES = (0.5, 0.9, 0.99)
BLOCK_NAMES = ("h", "v", "s1", "s2", "s3")


class RecipeError(ValueError):
    """Invalid recipe; carries the line and column of the offending node."""

    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(f"{msg}{where}")
        self.line, self.col = line, col


# ---------------------------------------------------------------------------
# coverage index
# ---------------------------------------------------------------------------

COVERAGE: dict[str, tuple[str, str]] = {
    "ncshell": ("N = N_i^a(u) dx^i (x) d_a, shell by shell, N[a, i] nonzero only for block(i) < block(a)",
                "geometry.NConnection"),
    "naders": ("e_alpha = d_alpha - N[a, alpha] d_a for lower indices, d_a on fibers", "geometry.frame_data"),
    "nadifs": ("W^gamma_{alpha beta} from [e_alpha, e_beta] = W^gamma_{alpha beta} e_gamma", "geometry.anholonomy"),
    "dm": ("g = g_i dx^i dx^i + sum_k h_a(e^a)^2 in the dual adapted frame", "geometry.DMetric"),
    "candcon": ("canonical d-connection: block-wise Christoffel symbols of the adapted frame",
                "connection.canonical_connection"),
    "dtors": ("T = Gamma[a,b,c] - Gamma[a,c,b] + W[a,b,c]; pure h and pure fiber blocks vanish",
              "connection.torsion"),
    "dricci": ("R_{bc} = R^a_{bca} of the canonical d-connection", "connection.ricci"),
    "sourc1": ("R^a_a = -Lambda(block of a) on diagonals, off-diagonal R_{bc} = 0", "connection.field_residual"),
    "dsource": ("block sources (Lambda_h, Lambda_v[k]) of the decoupled system", "afdm.SourceSpec"),
    "equ1": ("R^1_1 = R^2_2 = -(psi_11 + psi_22) exp(-psi) / 2", "connection.ricci_components_ansatz"),
    "equ2": ("R^3_3 = R^4_4 from h3, h4 and their fiber derivatives", "connection.ricci_components_ansatz"),
    "equ3": ("R_{3k} row: (h3/2h4) n_k'' + (h3 h4'/h4 - 3 h3'/2) n_k'/(2 h4)", "connection.ricci_components_ansatz"),
    "equ4": ("R_{4k} row: linear in w_k, vanishing exactly when beta w_k = alpha_k",
             "connection.ricci_components_ansatz"),
    "equ4d2s": ("shell rows of the same form with lower indices in the adapted frame",
                "connection.ricci_components_ansatz"),
    "e2": ("phi' h3' = 2 h3 h4 Lambda_v with phi = ln|h3' / sqrt|h3 h4||", "afdm.decoupled_residuals"),
    "e3": ("n_k'' + gamma n_k' = 0 with gamma = (3/2) h3'/h3 - (1/2) h4'/h4", "afdm.decoupled_residuals"),
    "e4": ("beta w_k - alpha_k = 0", "afdm.decoupled_residuals"),
    "rescgf": ("Lambda_v (Phi^2)' = tilde_Lambda0 (tilde_Phi^2)'", "afdm.rescale_generating"),
    "solha": ("h3 = S / (4 tilde_Lambda0), h4 = (S')^2 / (4 S Xi) with S = tilde_Phi^2", "afdm.gen_h_pair"),
    "solhn": ("n_k = n1_k + n2_k * integral of S' / (2 S^2 sqrt|Xi|) over the fiber", "afdm.gen_n"),
    "h3aux": ("w_k = e_k(Xi) / Xi'", "afdm.gen_w"),
    "h4aux": ("Xi = Lambda_v S - integral of Lambda_v' S + Xi0", "afdm.xi_functional"),
    "qnk4d": ("four-dimensional assembly of the base shell", "afdm.build_solution"),
    "qnk6d": ("six-dimensional prolongation with one shell", "afdm.build_solution"),
    "qnk8d": ("eight-dimensional prolongation with two shells", "afdm.build_solution"),
    "zerot": ("torsion-free conditions w_k = e_k(check_A), n_k = e_k(n potential)", "afdm.lc_extract"),
    "lcconstr": ("torsion-free member selected by the gradient constraints", "afdm.lc_extract"),
    "qellcs": ("torsion-free shell: h3 = check_phi^2/(4 Lambda), w = gradient of check_A",
               "afdm.lc_shell_fields"),
    "h34vacuum": ("vacuum fiber branches v1, v2, v3", "afdm.build_vacuum"),
    "vs2": ("h4 = h4_0 (sqrt|h3|)'^2, n = n1 + n2 / |h3|", "afdm.build_vacuum"),
    "vs3": ("h3 = (c1 + c2 y4)^2, n = n1 + n2 (c1 + c2 y4)^-2", "afdm.build_vacuum"),
    "qe6dvacuum": ("six-dimensional vacuum with a v2-type shell", "afdm.build_vacuum"),
    "6to4": ("constant h3, h5 embedding of a six-dimensional vacuum into four dimensions", "afdm.embed_6to4"),
    "6to4lc": ("torsion-free restriction of the embedding", "afdm.embed_6to4"),
    "vconfc": ("admissible omega: e_k omega = 0 in the adapted frame", "afdm.apply_omega"),
    "kerrbl": ("Kerr in Boyer-Lindquist form with Delta = r^2 - 2 m0 r + a^2", "kerr.kerr_prime"),
    "kerrcoef": ("Abar, Bbar, Cbar, Delta, Xi_K of the prime Kerr data", "kerr.KerrCoeffs"),
    "dkerr": ("prime d-metric (Xi_K/Delta, Xi_K, Abar, Cbar - Bbar^2/Abar) with n = -phi d(Bbar/Abar)",
              "kerr.kerr_prime"),
    "polarkerr": ("eta coefficients: targets divided by the prime values", "kerr.polarizations"),
    "nvlcmgs": ("torsion-free Kerr deformation from eta3 with S = 4 tilde_Lambda0 Abar eta3",
                "kerr.deform_ricci_soliton"),
    "ofindtmg": ("torsionful Kerr deformation with nonzero n2", "kerr.deform_torsionful"),
    "edefcel": ("first-order eta: chi3 = 2q - lambda/mu, chi4 = 4 S dq/dS - lambda/mu", "kerr.epsilon_coefficients"),
    "nvlcmgse": ("epsilon-deformed Kerr metric, residual O(epsilon^2)", "kerr.deform_epsilon"),
    "6dks": ("six-dimensional jet prolongation of the Kerr deformation", "kerr.prolong_jet"),
    "8dfd": ("eight-dimensional jet prolongation on the torsionful base", "kerr.prolong_jet"),
    "kmasedvac": ("vacuum balance epsilon = -mu / (lambda_tilde + Lambda)", "kerr.vacuum_balance_epsilon"),
}


def explain(label: str) -> str:
    """Formula, anchor and owning operation for a coverage label."""
    key = label.strip().strip("()")
    if key not in COVERAGE:
        raise KeyError(f"unknown equation label {label!r}")
    formula, owner = COVERAGE[key]
    return f"({key})\n  formula: {formula}\n  owner:   shellgrav.{owner}"


# ---------------------------------------------------------------------------
# recipe loading
# ---------------------------------------------------------------------------


def _node_marks(text: str) -> dict[tuple, tuple[int, int]]:
    """Map key paths of the YAML tree to 1-based (line, column) of their value."""
    marks: dict[tuple, tuple[int, int]] = {}

    def walk(node, path):
        quoted = isinstance(node, yaml.ScalarNode) and node.style in ("'", '"')
        marks[path] = (node.start_mark.line + 1, node.start_mark.column + 1 + quoted)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return marks
    if root is not None:
        walk(root, ())
    return marks


@dataclass
class Recipe:
    """A parsed recipe document plus the source text for error locations."""

    data: dict
    text: str
    path: str = "<recipe>"
    marks: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, path: str = "<recipe>") -> "Recipe":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            if mark is not None:
                raise RecipeError(f"{path}: {getattr(exc, 'problem', exc)}", mark.line + 1, mark.column + 1)
            raise RecipeError(f"{path}: {exc}")
        if not isinstance(data, dict):
            raise RecipeError(f"{path}: a recipe must be a mapping")
        rec = cls(data, text, path, _node_marks(text))
        kind = data.get("kind")
        if kind not in KINDS:
            rec.fail(("kind",), f"kind must be one of {KINDS}, got {kind!r}")
        return rec

    @classmethod
    def load(cls, path: str | Path) -> "Recipe":
        p = Path(path)
        return cls.from_text(p.read_text(), str(p))

    @property
    def kind(self) -> str:
        return self.data["kind"]

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def fail(self, path: tuple, msg: str, inner: tuple[int, int] | None = None):
        """Raise a RecipeError located at ``path``; ``inner`` offsets into a scalar."""
        where = self.marks.get(path)
        loc = ".".join(str(p) for p in path) or "<root>"
        if where is None:
            raise RecipeError(f"{self.path}: {loc}: {msg}")
        line, col = where
        if inner is not None and inner[0] == 1:
            col += inner[1]
        raise RecipeError(f"{self.path}: {loc}: {msg}", line, col)

    def get(self, path: tuple, default: Any = None) -> Any:
        cur: Any = self.data
        for p in path:
            if isinstance(cur, dict) and p in cur:
                cur = cur[p]
            elif isinstance(cur, list) and isinstance(p, int) and p < len(cur):
                cur = cur[p]
            else:
                return default
        return cur


class Context:
    """Name resolution for expressions: chart coordinates, constants, named fields."""

    def __init__(self, recipe: Recipe, names: Mapping[str, int]):
        self.recipe = recipe
        self.names = dict(names)
        params = recipe.get(("params",), {}) or {}
        if not isinstance(params, dict):
            recipe.fail(("params",), "params must be a mapping of constants")
        self.params = {}
        for k, v in params.items():
            if not isinstance(v, (int, float)):
                recipe.fail(("params", k), "constants must be numbers")
            self.params[str(k)] = float(v)
        self.fields: dict[str, F.ScalarField] = {}
        named = recipe.get(("fields",), {}) or {}
        if not isinstance(named, dict):
            recipe.fail(("fields",), "fields must be a mapping of expressions")
        for k, v in named.items():
            self.fields[str(k)] = self.expr(("fields", k))

    def expr(self, path: tuple, default: Any = None, required: bool = False) -> F.ScalarField | None:
        val = self.recipe.get(path, None)
        if val is None:
            if required:
                self.recipe.fail(path[:-1], f"missing required entry {path[-1]!r}")
            return None if default is None else F.lift(default)
        if isinstance(val, bool) or not isinstance(val, (int, float, str)):
            self.recipe.fail(path, "expected a number or an expression string")
        if isinstance(val, (int, float)):
            return F.const(float(val))
        try:
            return F.parse_field(val, self.names, self.params, self.fields)
        except F.ExpressionError as exc:
            self.recipe.fail(path, str(exc).rsplit(" (line", 1)[0], (exc.line, exc.col))

    def expr_list(self, path: tuple) -> list[F.ScalarField]:
        val = self.recipe.get(path, None)
        if val is None:
            return []
        if not isinstance(val, list):
            self.recipe.fail(path, "expected a list of expressions")
        return [self.expr(path + (i,)) for i in range(len(val))]

    def number(self, path: tuple, default: float | None = None) -> float | None:
        val = self.recipe.get(path, None)
        if val is None:
            return default
        if isinstance(val, str):
            try:
                f = F.parse_field(val, {}, self.params)
            except F.ExpressionError as exc:
                self.recipe.fail(path, str(exc).rsplit(" (line", 1)[0], (exc.line, exc.col))
            return float(f.jet(np.zeros((1, 1)), 0).v[0])
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.recipe.fail(path, "expected a number or a constant expression")
        return float(val)

    def psi(self, path: tuple) -> F.PsiSpec:
        spec = self.recipe.get(path, None)
        if spec is None:
            return F.PsiSpec(F.ZERO, F.ZERO)
        if not isinstance(spec, dict):
            self.recipe.fail(path, "psi must be a mapping with 'family' or 'expr'")
        eps = tuple(int(e) for e in spec.get("eps", (1, 1)))
        if "expr" in spec:
            psi = self.expr(path + ("expr",))
            return F.PsiSpec(psi, F.laplace_source(psi, eps), eps)
        family = spec.get("family")
        params = spec.get("params", {}) or {}
        try:
            return F.analytic_psi(family, {k: float(v) for k, v in params.items()}, eps)
        except (ValueError, TypeError) as exc:
            self.recipe.fail(path, str(exc))


def _shape_arg(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 16x16x16, got {text!r}")
    if not shape or any(n < 1 for n in shape):
        raise argparse.ArgumentTypeError("grid sizes must be positive")
    return shape


def _bounds(recipe: Recipe, dim: int, default: tuple[float, float]) -> afdm.Box:
    lo = recipe.get(("grid", "lower"), default[0])
    hi = recipe.get(("grid", "upper"), default[1])
    lo = [float(lo)] * dim if isinstance(lo, (int, float)) else [float(v) for v in lo]
    hi = [float(hi)] * dim if isinstance(hi, (int, float)) else [float(v) for v in hi]
    if len(lo) != dim or len(hi) != dim:
        recipe.fail(("grid",), f"bounds need {dim} entries, one per coordinate")
    try:
        return afdm.Box(tuple(lo), tuple(hi))
    except ValueError as exc:
        recipe.fail(("grid",), str(exc))


def default_axes(dim: int) -> list[int]:
    """Non-Killing coordinates first: x1, x2 and every shell's second fiber coordinate."""
    first = [0, 1] + list(range(3, dim, 2))
    return first + [i for i in range(dim) if i not in first]


def grid_points(recipe: Recipe, box: afdm.Box, names: Mapping[str, int], shape=None, seed: int = 0) -> np.ndarray:
    """Points of the recipe grid: a tensor grid over ``axes`` or seeded samples."""
    dim = box.dim
    samples = recipe.get(("grid", "samples"))
    if shape is None and samples is not None:
        return box.sample(int(samples), seed)
    if shape is None:
        shape = recipe.get(("grid", "shape"), [8] * min(3, dim))
    axes_names = recipe.get(("grid", "axes"))
    if axes_names is None:
        axes = default_axes(dim)[: len(shape)]
    else:
        axes = []
        for i, n in enumerate(axes_names):
            if n not in names or names[n] >= dim:
                recipe.fail(("grid", "axes", i), f"unknown coordinate {n!r}")
            axes.append(names[n])
    if len(shape) != len(axes):
        recipe.fail(("grid",), f"grid shape has {len(shape)} sizes for {len(axes)} axes")
    lines = [np.array([0.5 * (box.lower[i] + box.upper[i])]) for i in range(dim)]
    for n, ax in zip(shape, axes):
        lines[ax] = np.linspace(box.lower[ax], box.upper[ax], int(n))
    mesh = np.meshgrid(*lines, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def _rule(recipe: Recipe) -> F.QuadratureRule:
    q = recipe.get(("quadrature",), {}) or {}
    try:
        return F.QuadratureRule(kind=q.get("kind", "composite-simpson"), panels=int(q.get("panels", 8)))
    except (ValueError, TypeError) as exc:
        recipe.fail(("quadrature",), str(exc))


# ---------------------------------------------------------------------------
# builds
# ---------------------------------------------------------------------------


@dataclass
class Build:
    """A metric with its sources, evaluation points and the checks to run."""

    metric: DMetric
    sources: Any
    points: np.ndarray
    coord_names: tuple[str, ...]
    checks: tuple[str, ...]
    extra: dict = field(default_factory=dict)


def _checks(recipe: Recipe, default: Sequence[str]) -> tuple[str, ...]:
    val = recipe.get(("checks",), list(default))
    if not isinstance(val, list) or not val:
        recipe.fail(("checks",), "checks must be a non-empty list")
    out = []
    for i, c in enumerate(val):
        if c not in CHECKS:
            recipe.fail(("checks", i), f"unknown check {c!r}; expected one of {CHECKS}")
        if c in out:
            recipe.fail(("checks", i), f"check {c!r} declared twice")
        out.append(c)
    return tuple(out)


def _chart_s(recipe: Recipe) -> int:
    s = recipe.get(("chart", "s"), 0)
    if not isinstance(s, int) or not 0 <= s <= 3:
        recipe.fail(("chart", "s"), "shell count must be an integer in [0, 3]")
    return s


def _signature(recipe: Recipe, dim: int):
    sig = recipe.get(("chart", "signature"))
    if sig is None:
        return None
    if not isinstance(sig, list) or len(sig) != dim or any(e not in (1, -1) for e in sig):
        recipe.fail(("chart", "signature"), f"signature needs {dim} entries of +1 or -1")
    return tuple(sig)


def _shell_list(recipe: Recipe, n: int) -> list:
    shells = recipe.get(("shells",), [])
    if not isinstance(shells, list) or len(shells) < n:
        recipe.fail(("shells",), f"need {n} shell entries (base fiber first)")
    return shells


def _build_afdm(recipe: Recipe, shape, seed: int, uncorrected: bool) -> Build:
    s = _chart_s(recipe)
    chart = ShellChart(s)
    ctx = Context(recipe, chart.name_map())
    psi = ctx.psi(("psi",))
    lam_v = ctx.expr_list(("sources", "Lambda_v"))
    if len(lam_v) < s + 1:
        recipe.fail(("sources",), f"Lambda_v needs {s + 1} entries")
    box = _bounds(recipe, chart.dim, (0.2, 0.8))
    _shell_list(recipe, s + 1)
    gens = []
    for k in range(s + 1):
        base = ("shells", k)
        kinds = [key for key in ("tilde_phi", "tilde_phi_sq", "phi") if recipe.get(base + (key,)) is not None]
        if len(kinds) != 1:
            recipe.fail(base, "give exactly one of tilde_phi, tilde_phi_sq, phi")
        lam0 = ctx.number(base + ("tilde_lambda0",))
        if not lam0:
            recipe.fail(base, "tilde_lambda0 must be a nonzero number")
        gens.append(afdm.ShellGenerator(
            tilde_lambda0=lam0,
            **{kinds[0]: ctx.expr(base + (kinds[0],))},
            n1=ctx.expr_list(base + ("n1",)),
            n2=ctx.expr_list(base + ("n2",)),
            xi0=ctx.expr(base + ("xi0",), 0.0),
        ))
    gd = afdm.GeneratingData(psi, tuple(gens), box, _rule(recipe))
    src = afdm.SourceSpec.from_psi(psi, lam_v)
    m = afdm.build_solution(s, gd, src, uncorrected)
    sig = _signature(recipe, chart.dim)
    if sig is not None:
        m = m.with_fields(signature=sig)
    pts = grid_points(recipe, box, chart.name_map(), shape, seed)
    return Build(m, src, pts, chart.labels, _checks(recipe, ["residual"]))


def _build_lc(recipe: Recipe, shape, seed: int, uncorrected: bool) -> Build:
    s = _chart_s(recipe)
    chart = ShellChart(s)
    ctx = Context(recipe, chart.name_map())
    psi = ctx.psi(("psi",))
    lam_v = ctx.expr_list(("sources", "Lambda_v"))
    if len(lam_v) < s + 1:
        recipe.fail(("sources",), f"Lambda_v needs {s + 1} entries")
    _shell_list(recipe, s + 1)
    box = _bounds(recipe, chart.dim, (0.2, 0.8))
    lc = afdm.LCData(
        psi,
        tuple(ctx.expr(("shells", k, "check_phi"), required=True) for k in range(s + 1)),
        tuple(ctx.expr(("shells", k, "check_A"), 0.0) for k in range(s + 1)),
        tuple(ctx.expr(("shells", k, "n_potential"), 0.0) for k in range(s + 1)),
        box,
    )
    src = afdm.SourceSpec.from_psi(psi, lam_v)
    pts = grid_points(recipe, box, chart.name_map(), shape, seed)
    m = afdm.lc_extract(s, lc, src, pts[: min(len(pts), 64)])
    return Build(m, src, pts, chart.labels, _checks(recipe, ["residual", "torsion"]))


def _build_vacuum(recipe: Recipe, shape, seed: int, uncorrected: bool) -> Build:
    branch = recipe.get(("branch",))
    if branch not in ("v1", "v2", "v3", "jet-v2s"):
        recipe.fail(("branch",), "branch must be v1, v2, v3 or jet-v2s")
    s = 1 if branch == "jet-v2s" else 0
    chart = ShellChart(s)
    ctx = Context(recipe, chart.name_map())
    box = _bounds(recipe, chart.dim, (0.2, 0.8))
    h4_0 = recipe.get(("h4_0",))
    data = afdm.VacuumData(
        psi=ctx.psi(("psi",)),
        h3=ctx.expr(("h3",)),
        h4=ctx.expr(("h4",)),
        h4_0=ctx.number(("h4_0",)) if branch in ("v2", "jet-v2s") and h4_0 is not None else ctx.expr(("h4_0",)),
        c1=ctx.expr(("c1",)),
        c2=ctx.expr(("c2",)),
        n1=ctx.expr_list(("n1",)),
        n2=ctx.expr_list(("n2",)),
        w=ctx.expr_list(("w",)),
        shell_h=ctx.expr(("shell_h",)),
        shell_h0=ctx.number(("shell_h0",)),
        shell_n1=ctx.expr_list(("shell_n1",)),
        shell_n2=ctx.expr_list(("shell_n2",)),
        shell_w=ctx.expr_list(("shell_w",)),
        domain=box,
        rule=_rule(recipe),
    )
    m = afdm.build_vacuum(branch, data)
    pts = grid_points(recipe, box, chart.name_map(), shape, seed)
    return Build(m, afdm.SourceSpec.vacuum(s), pts, chart.labels, _checks(recipe, ["residual"]))


def _parse_nconn(recipe: Recipe, ctx: Context, chart: ShellChart) -> NConnection:
    raw = recipe.get(("metric", "N"), {}) or {}
    if not isinstance(raw, dict):
        recipe.fail(("metric", "N"), "N must map 'fiber,lower' coordinate pairs to expressions")
    coeffs = {}
    for key in raw:
        parts = [p.strip() for p in str(key).split(",")]
        if len(parts) != 2 or any(p not in ctx.names for p in parts):
            recipe.fail(("metric", "N", key), f"N key {key!r} must name two chart coordinates, e.g. 'y3,x1'")
        coeffs[(ctx.names[parts[0]], ctx.names[parts[1]])] = ctx.expr(("metric", "N", key))
    try:
        return NConnection(chart, coeffs)
    except ValueError as exc:
        recipe.fail(("metric", "N"), str(exc))


def _build_verify(recipe: Recipe, shape, seed: int, uncorrected: bool) -> Build:
    hs = recipe.get(("metric", "h"))
    if not isinstance(hs, list) or not hs:
        recipe.fail(("metric",), "metric.h must list one [h_a, h_b] pair per fiber")
    s = len(hs) - 1
    chart = ShellChart(s)
    ctx = Context(recipe, chart.name_map())
    g = [ctx.expr(("metric", "g", i), required=True) for i in range(2)]
    h = tuple((ctx.expr(("metric", "h", k, 0), required=True), ctx.expr(("metric", "h", k, 1), required=True))
              for k in range(s + 1))
    m = DMetric(chart, tuple(g), h, _parse_nconn(recipe, ctx, chart), _signature(recipe, chart.dim))
    lam_h = ctx.expr(("sources", "Lambda_h"), 0.0)
    lam_v = ctx.expr_list(("sources", "Lambda_v"))
    lam_v += [F.ZERO] * (s + 1 - len(lam_v))
    box = _bounds(recipe, chart.dim, (0.2, 0.8))
    pts = grid_points(recipe, box, chart.name_map(), shape, seed)
    return Build(m, afdm.SourceSpec(lam_h, tuple(lam_v)), pts, chart.labels, _checks(recipe, ["residual"]))


def _kerr_names(dim: int) -> dict[str, int]:
    names = ShellChart((dim - 4) // 2).name_map()
    names.update({"theta": 1, "phi": K.PHI})
    return names


def kerr_params(recipe: Recipe | None, m0: float | None = None, a: float | None = None) -> K.KerrParams:
    m0_r = recipe.get(("kerr", "m0")) if recipe else None
    a_r = recipe.get(("kerr", "a")) if recipe else None
    m0 = m0 if m0 is not None else (m0_r if m0_r is not None else 1.0)
    a = a if a is not None else (a_r if a_r is not None else 0.0)
    try:
        return K.KerrParams(float(m0), float(a))
    except ValueError as exc:
        if recipe is not None:
            recipe.fail(("kerr",), str(exc))
        raise RecipeError(str(exc))


def kerr_prime_build(kp: K.KerrParams, shape=None, uncorrected_delta: bool = False) -> Build:
    """Prime Kerr data on the Boyer-Lindquist ``(r, theta)`` grid."""
    nr, nth = (shape or (32, 16))[:2] if shape and len(shape) >= 2 else (32, 16)
    prime = K.kerr_prime(kp, uncorrected_delta=uncorrected_delta)
    pts = K.kerr_grid(kp, nr, nth)
    K.check_domain(kp, pts[:, 0], pts[:, 1], uncorrected_delta)
    return Build(prime.metric, afdm.SourceSpec.vacuum(0), pts, ("r", "theta", "y3", "phi"), ("lc-ricci",))


def _lc_shells(recipe: Recipe, ctx: Context) -> tuple:
    raw = recipe.get(("shells",), []) or []
    if not isinstance(raw, list):
        recipe.fail(("shells",), "shells must be a list")
    return tuple(
        afdm.LCShell(ctx.expr(("shells", k, "check_phi"), required=True),
                     ctx.expr(("shells", k, "check_A"), 0.0),
                     ctx.expr(("shells", k, "n_potential"), 0.0))
        for k in range(len(raw))
    )


def _build_kerr(recipe: Recipe, shape, seed: int, uncorrected: bool, literal_delta: bool = False) -> Build:
    kp = kerr_params(recipe)
    literal_delta = literal_delta or bool(recipe.get(("uncorrected_delta",), False))
    mode = recipe.get(("mode",), "prime")
    if mode == "prime":
        b = kerr_prime_build(kp, shape, literal_delta)
        b.checks = _checks(recipe, ["lc-ricci"])
        return b
    if mode not in K.MODES:
        recipe.fail(("mode",), f"mode must be 'prime' or one of {K.MODES}")
    nsh = len(recipe.get(("shells",), []) or [])
    s = {"ricci-soliton-LC": 0, "torsionful": 0, "epsilon": 0}.get(mode, nsh)
    names = _kerr_names(4 + 2 * s)
    ctx = Context(recipe, names)
    kwargs: dict[str, Any] = {}
    for key in ("eta3", "eta_n", "xi0", "ratio"):
        if recipe.get((key,)) is not None:
            kwargs[key] = ctx.expr((key,))
    if recipe.get(("v_lambda",)) is not None:
        kwargs["v_lambda"] = ctx.expr(("v_lambda",))
    for key in ("tilde_lambda0", "epsilon", "mu_lambda", "lambda_tilde", "zeta", "omega0", "phi0", "cosmological"):
        if recipe.get((key,)) is not None:
            kwargs[key] = ctx.number((key,))
    for key in ("n1", "n2"):
        if recipe.get((key,)) is not None:
            kwargs[key] = ctx.expr_list((key,))
    if recipe.get(("psi",)) is not None:
        kwargs["psi"] = ctx.psi(("psi",))
    if recipe.get(("chi",)) is not None:
        kwargs["chi"] = ctx.psi(("chi",))
    kwargs["shells"] = _lc_shells(recipe, ctx)
    kwargs["uncorrected_delta"] = literal_delta
    kwargs["uncorrected_chi"] = bool(recipe.get(("uncorrected_chi",), False))
    iso = K.iso_box(kp, s, uncorrected_delta=literal_delta)
    if recipe.get(("grid", "lower")) is not None or recipe.get(("grid", "upper")) is not None:
        iso = _bounds(recipe, 4 + 2 * s, (0.0, 1.0))
    kwargs["domain"] = iso
    rec = K.DeformationRecipe(mode, **kwargs)
    checks = _checks(recipe, ["residual"])
    pts = grid_points(recipe, iso, names, shape, seed)
    d = K.deform(kp, rec)
    extra: dict = {}
    if "epsilon-order" in checks:
        if mode not in ("epsilon", "rotoid"):
            recipe.fail(("checks",), "epsilon-order applies to the epsilon and rotoid modes")
        eps_list = recipe.get(("epsilons",), [0.04, 0.02, 0.01, 0.005])
        builder = (lambda e: K.deform_epsilon(kp, rec, e)) if mode == "epsilon" else (lambda e: K.prolong_jet(kp, rec, e))
        extra["epsilon-order"] = (list(map(float, eps_list)), builder)
    labels = tuple(n for n, _ in sorted(((k, v) for k, v in ShellChart(s).name_map().items() if not k.startswith("u")),
                                        key=lambda kv: kv[1]))
    labels = ("x1", "theta", "y3", "phi") + labels[4:]
    return Build(d.metric, d.sources, pts, labels, checks, extra)


BUILDERS: dict[str, Callable] = {
    "afdm-build": _build_afdm,
    "lc-extract": _build_lc,
    "vacuum": _build_vacuum,
    "verify-only": _build_verify,
    "kerr-deform": _build_kerr,
}


# ---------------------------------------------------------------------------
# checks and statistics
# ---------------------------------------------------------------------------


def torsion_families(T: np.ndarray, blocks: np.ndarray) -> dict[str, np.ndarray]:
    """Largest torsion entry per point for each (upper block; lower block pair) family."""
    nb = int(blocks.max()) + 1
    out = {}
    for A in range(nb):
        ia = np.where(blocks == A)[0]
        for B in range(nb):
            for C in range(B, nb):
                ib, ic = np.where(blocks == B)[0], np.where(blocks == C)[0]
                sub = np.abs(T[:, ia][:, :, ib][:, :, :, ic])
                sub2 = np.abs(T[:, ia][:, :, ic][:, :, :, ib])
                val = np.maximum(sub.reshape(len(T), -1).max(axis=1), sub2.reshape(len(T), -1).max(axis=1))
                out[f"T^{BLOCK_NAMES[A]}_{BLOCK_NAMES[B]}{BLOCK_NAMES[C]}"] = val
    return out


def _lc_ricci_rows(m: DMetric, pts: np.ndarray) -> dict[str, np.ndarray]:
    R = lc_ricci(m, pts)
    d = R.shape[-1]
    return {f"R_{a + 1}{b + 1}": R[:, a, b] for a in range(d) for b in range(a, d)}


def _sweep(fn: Callable[[np.ndarray], dict], pts: np.ndarray, threads: int) -> dict[str, np.ndarray]:
    """Evaluate ``fn`` on chunks of points; results are concatenated in point order."""
    threads = max(1, int(threads))
    if threads == 1 or len(pts) < 2 * threads:
        return fn(pts)
    chunks = np.array_split(pts, threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(fn, chunks))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


@dataclass
class CheckResult:
    label: str
    values: np.ndarray
    tol: Any
    passed: bool
    worst: int

    def record(self, points: np.ndarray, names: Sequence[str]) -> dict:
        v = np.abs(self.values)
        finite = np.isfinite(v)
        rec = {
            "label": self.label,
            "max": float(np.max(v)) if finite.all() else float("nan"),
            "mean": float(np.mean(v)) if finite.all() else float("nan"),
            "quantiles": {f"q{int(q * 100)}": float(np.quantile(v, q)) if finite.all() else float("nan")
                          for q in QUANTILES},
            "points": int(v.size),
            "tol": self.tol,
            "pass": bool(self.passed),
        }
        if not self.passed and points is not None and len(points) == v.size:
            p = points[self.worst]
            rec["worst_point"] = {n: float(x) for n, x in zip(names, p)}
        return rec


def _abs_check(label: str, vals: np.ndarray, tol: float) -> CheckResult:
    v = np.abs(np.asarray(vals, float))
    bad = ~np.isfinite(v)
    worst = int(np.argmax(bad)) if bad.any() else int(np.argmax(v))
    ok = bool(not bad.any() and v.max() <= tol)
    return CheckResult(label, v, tol, ok, worst)


def run_checks(b: Build, tol: Mapping[str, float], threads: int = 1, uncorrected: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []
    m, pts = b.metric, b.points
    for check in b.checks:
        if check == "residual":
            rows = _sweep(lambda p: field_residual(m, b.sources, p), pts, threads)
            results += [_abs_check(f"sourc1:{k}", v, tol["residual"]) for k, v in rows.items()]
        elif check == "torsion":
            blocks = m.chart.blocks()
            rows = _sweep(lambda p: torsion_families(torsion(m, p), blocks), pts, threads)
            results += [_abs_check(f"dtors:{k}", v, tol["torsion"]) for k, v in rows.items()]
        elif check == "lc-ricci":
            rows = _sweep(lambda p: _lc_ricci_rows(m, p), pts, threads)
            results += [_abs_check(f"dkerr:{k}", v, tol["lc-ricci"]) for k, v in rows.items()]
        elif check == "decoupled":
            rows = _sweep(lambda p: afdm.decoupled_residuals(m, b.sources, p), pts, threads)
            results += [_abs_check(f"tdecoupling:{k}", v, tol["decoupled"]) for k, v in rows.items()]
        elif check == "epsilon-order":
            eps, builder = b.extra["epsilon-order"]
            res = K.epsilon_residuals(builder, eps, pts)
            ratios = res[:-1] / res[1:]
            lo, hi = EPSILON_ORDER_BAND
            ok = bool(np.all(np.isfinite(ratios)) and np.all((ratios >= lo) & (ratios <= hi)))
            dev = np.abs(ratios - 0.5 * (lo + hi))
            results.append(CheckResult("nvlcmgse:order", ratios, [lo, hi], ok, int(np.argmax(dev))))
    return results


# ---------------------------------------------------------------------------
# running recipes
# ---------------------------------------------------------------------------


def tolerances(recipe: Recipe, override: float | None) -> dict[str, float]:
    tol = dict(DEFAULT_TOL)
    raw = recipe.get(("tolerances",), {}) or {}
    if not isinstance(raw, dict):
        recipe.fail(("tolerances",), "tolerances must be a mapping")
    for k, v in raw.items():
        if k not in tol:
            recipe.fail(("tolerances", k), f"unknown tolerance {k!r}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
            recipe.fail(("tolerances", k), "tolerances must be positive numbers")
        tol[k] = float(v)
    if override is not None:
        tol = {k: float(override) for k in tol}
    return tol


@dataclass
class RunResult:
    report: dict
    build: Build
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return bool(self.report["pass"])


def run_recipe(recipe: Recipe, shape=None, tol: float | None = None, seed: int | None = None,
               threads: int = 1, uncorrected_delta: bool = False) -> RunResult:
    """Build, check and summarize one recipe.  The report has no timestamps."""
    seed = int(seed if seed is not None else recipe.get(("seed",), 0))
    literal = bool(recipe.get(("uncorrected",), False))
    tols = tolerances(recipe, tol)
    if recipe.kind == "kerr-deform":
        b = _build_kerr(recipe, shape, seed, literal, uncorrected_delta)
    else:
        b = BUILDERS[recipe.kind](recipe, shape, seed, literal)
    results = run_checks(b, tols, threads, literal)
    report = {
        "name": recipe.get(("name",), Path(recipe.path).stem),
        "kind": recipe.kind,
        "provenance": {"recipe_sha256": recipe.sha256, "seed": seed},
        "dimension": b.metric.dim,
        "points": int(len(b.points)),
        "checks": [r.record(b.points, b.coord_names) for r in results],
    }
    report["pass"] = all(r.passed for r in results)
    return RunResult(report, b, results)


def write_report(report: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_table(run: RunResult, path: Path) -> None:
    """Long-format residual table: one row per point and pointwise equation."""
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(run.build.coord_names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["equation", "residual"])
        for r in run.results:
            if len(r.values) != len(run.build.points):
                continue
            for p, v in zip(run.build.points, r.values):
                w.writerow([repr(float(x)) for x in p] + [r.label, repr(float(v))])


def write_fields(run: RunResult, path: Path) -> None:
    """Metric coefficients and nonzero N-coefficients at the evaluation points."""
    m = run.build.metric
    cols, fields_ = [], []
    for i, f in enumerate(m.diagonal()):
        cols.append(f"g{i + 1}{i + 1}")
        fields_.append(f)
    for (a, i), f in sorted(m.nconn.coeffs.items()):
        cols.append(f"N{a + 1}_{i + 1}")
        fields_.append(f)
    vals = F.evaluate(fields_, run.build.points, order=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(run.build.coord_names) + cols)
        for j, p in enumerate(run.build.points):
            w.writerow([repr(float(x)) for x in p] + [repr(float(v.v[j])) for v in vals])


def _print_summary(report: dict, stream=None) -> None:
    stream = stream or sys.stdout
    for c in report["checks"]:
        status = "PASS" if c["pass"] else "FAIL"
        line = f"{status} {c['label']:<28} max={c['max']:.3e} tol={c['tol']}"
        if "worst_point" in c:
            at = ", ".join(f"{k}={v:.6g}" for k, v in c["worst_point"].items())
            line += f" at ({at})"
        print(line, file=stream)
    print(f"{'PASS' if report['pass'] else 'FAIL'} {report['name']}: {len(report['checks'])} checks", file=stream)


def _outputs(recipe: Recipe, out: str | None) -> tuple[Path, Path | None]:
    base = Path(out or recipe.get(("output", "dir"), "out"))
    rep = base / recipe.get(("output", "report"), "report.json")
    tab = recipe.get(("output", "table"), "residuals.csv")
    return rep, (base / tab) if tab else None


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, recipe_required: bool = True) -> None:
    p.add_argument("--recipe", required=recipe_required, help="YAML or JSON recipe file")
    p.add_argument("--grid", type=_shape_arg, help="grid sizes such as 16x16x16")
    p.add_argument("--tol", type=float, help="override every tolerance")
    p.add_argument("--seed", type=int, help="seed for sampled grids")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the grid sweep")
    p.add_argument("--uncorrected-delta", action="store_true",
                   help="use the alternative Kerr Delta = r^2 + a^2 - 2 m0")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shellgrav", description="Shell-by-shell exact solution builder and verifier.")
    sub = ap.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build", help="build a recipe, write fields, report and residual table")
    _common(b)
    v = sub.add_parser("verify", help="run the checks of a recipe and write the report")
    _common(v)
    k = sub.add_parser("kerr", help="prime Kerr vacuum check or a kerr-deform recipe")
    _common(k, recipe_required=False)
    k.add_argument("--m0", type=float, help="mass parameter when no recipe is given")
    k.add_argument("--a", type=float, help="spin parameter when no recipe is given")
    e = sub.add_parser("explain", help="show the formula and owner of an equation label")
    e.add_argument("label", nargs="?", help="equation label; omit with --list")
    e.add_argument("--list", action="store_true", help="list every known label")
    r = sub.add_parser("report", help="summarize a written report; exit status mirrors its verdict")
    r.add_argument("path", help="report JSON file or output directory")
    return ap


def _run_and_write(args, recipe: Recipe, fields_csv: bool) -> int:
    run = run_recipe(recipe, args.grid, args.tol, args.seed, args.threads, args.uncorrected_delta)
    rep, tab = _outputs(recipe, args.out)
    write_report(run.report, rep)
    if tab is not None:
        write_table(run, tab)
    if fields_csv:
        write_fields(run, rep.parent / "fields.csv")
    _print_summary(run.report)
    return 0 if run.passed else 1


def _cmd_kerr(args) -> int:
    if args.recipe:
        recipe = Recipe.load(args.recipe)
        if recipe.kind != "kerr-deform":
            raise RecipeError(f"{args.recipe}: the kerr command needs a kerr-deform recipe")
        return _run_and_write(args, recipe, False)
    m0 = 1.0 if args.m0 is None else args.m0
    a = 0.0 if args.a is None else args.a
    text = json.dumps({"kind": "kerr-deform", "name": f"kerr-prime-m{m0:g}-a{a:g}", "mode": "prime",
                       "kerr": {"m0": m0, "a": a}, "seed": args.seed or 0}, sort_keys=True)
    return _run_and_write(args, Recipe.from_text(text, "<kerr>"), False)


def _cmd_report(args) -> int:
    p = Path(args.path)
    if p.is_dir():
        p = p / "report.json"
    report = json.loads(p.read_text())
    _print_summary(report)
    return 0 if report.get("pass") else 1


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "explain":
            if args.list:
                for key in sorted(COVERAGE):
                    print(f"{key:<12} {COVERAGE[key][1]}")
                return 0
            if not args.label:
                print("error: give a label or --list", file=sys.stderr)
                return 2
            print(explain(args.label))
            return 0
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "kerr":
            return _cmd_kerr(args)
        recipe = Recipe.load(args.recipe)
        return _run_and_write(args, recipe, args.command == "build")
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except (RecipeError, afdm.GeneratorError, K.KerrDomainError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
