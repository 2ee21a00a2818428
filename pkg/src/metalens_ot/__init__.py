"""Metalens phase design by discrete optimal transport, verified by ray tracing."""

from .cost import CostModel, cost_eval, cost_matrix, grad_x_cost, grad_y_cost, mixed_hessian_det, sm_inverse
from .geometry import DiscreteMeasure, Grid2, IncidentField, PhiMap, Surface, build_measure, compute_phi, incident_field
from .optics import Design, pushforward, reflect, refract, trace, trace_many, verify_energy
from .phase import integrate_gradient, recover_phase_single, recover_phases_double
from .transport import TransportSolution, extract_map, potential_gradient, solve_exact, solve_sinkhorn

__version__ = "0.1.0"
