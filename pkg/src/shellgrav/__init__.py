"""Shell-by-shell exact solutions with the canonical d-connection.

Modules
-------
fields      scalar fields with exact first and second derivatives, fiber quadrature
geometry    shell charts, N-connections, d-metrics and adapted frames
connection  canonical d-connection, torsion, curvature and the field residuals
afdm        generating-function builds, torsion-free extraction, vacuum branches
kerr        prime Kerr data and its deformations
cli         recipe-driven batch front end
"""

from .afdm import (
    Box,
    GeneratingData,
    GeneratorError,
    LCData,
    LCShell,
    ShellGenerator,
    SourceSpec,
    VacuumData,
    build_solution,
    build_vacuum,
    lc_extract,
)
from .connection import canonical_connection, field_residual, lc_ricci, ricci, ricci_components_ansatz, torsion
from .fields import PsiSpec, ScalarField, analytic_psi, coord, parse_field
from .geometry import DMetric, NConnection, ShellChart, jet_group_dim
from .kerr import DeformationRecipe, KerrParams, deform, kerr_prime

__all__ = [
    "Box",
    "DMetric",
    "DeformationRecipe",
    "GeneratingData",
    "GeneratorError",
    "KerrParams",
    "LCData",
    "LCShell",
    "NConnection",
    "PsiSpec",
    "ScalarField",
    "ShellChart",
    "ShellGenerator",
    "SourceSpec",
    "VacuumData",
    "analytic_psi",
    "build_solution",
    "build_vacuum",
    "canonical_connection",
    "coord",
    "deform",
    "field_residual",
    "jet_group_dim",
    "kerr_prime",
    "lc_extract",
    "lc_ricci",
    "parse_field",
    "ricci",
    "ricci_components_ansatz",
    "torsion",
]
