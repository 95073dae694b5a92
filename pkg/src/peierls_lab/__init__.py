"""Lattice laboratory for the Peierls bracket of classical field theories on R x S^1."""

from .fields import FieldConfig, PullbackConnection, Variation, chart_backward, chart_forward
from .geometry import FlatTarget, StereographicSphere, TargetGeometry, builtin_target
from .green import (GreenOperator, advanced_operator, advanced_solve, causal_propagator,
                    propagator_derivative, retarded_operator, retarded_solve)
from .lattice import LorentzianLattice, SitePoint, causal_future, causal_past, causally_disjoint
from .observables import Functional, QuadForm, additivity_test, classify, global_additivity_test
from .peierls import (bracket_value, jacobi_residual, lagrangian_locality_check, leibniz_check,
                      onshell_ideal_element, peierls_bracket)
from .variational import (GeneralizedLagrangian, LagrangianDensity, el_kernel, evaluate_action,
                          free_scalar, is_normally_hyperbolic, linearize, reconstruct_density,
                          wave_map)
from .wavemaps import WaveMapModel, run_wavemap_scenario

__all__ = [
    "FieldConfig", "PullbackConnection", "Variation", "chart_backward", "chart_forward",
    "FlatTarget", "StereographicSphere", "TargetGeometry", "builtin_target",
    "GreenOperator", "advanced_operator", "advanced_solve", "causal_propagator",
    "propagator_derivative", "retarded_operator", "retarded_solve",
    "LorentzianLattice", "SitePoint", "causal_future", "causal_past", "causally_disjoint",
    "Functional", "QuadForm", "additivity_test", "classify", "global_additivity_test",
    "bracket_value", "jacobi_residual", "lagrangian_locality_check", "leibniz_check",
    "onshell_ideal_element", "peierls_bracket",
    "GeneralizedLagrangian", "LagrangianDensity", "el_kernel", "evaluate_action",
    "free_scalar", "is_normally_hyperbolic", "linearize", "reconstruct_density", "wave_map",
    "WaveMapModel", "run_wavemap_scenario",
]
