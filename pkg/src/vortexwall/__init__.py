"""Numerical laboratory for half-plane Navier-Stokes in vorticity form
with point-vortex initial data."""

from .grid import (HalfPlaneGrid, PhysicalField, ModeField, make_grid,
                   refine_grid, to_modes, to_physical, apply_dx, apply_dy,
                   dirichlet_laplacian_inverse, wall_flux_trace)
from .fields import (PointVortexConfig, WeightParams, CutoffFamily, CUTOFFS,
                     mollified_vorticity, mollified_vorticity_modes,
                     boundary_trace_u0, oseen_profile, oseen_velocity)
from .kernels import (KernelParams, kernel_g, kernel_G2, kernel_H, kernel_R,
                      kernel_R_fast, corrector, corrector_profiles,
                      corrector_bound_report, CorrectorState)
from .biot_savart import (VelocityModes, bs_half_plane, bs_half_plane_direct,
                          curl_residual, divergence_residual, PlaneGrid,
                          PlaneField, plane_field_from_func, bs_whole_plane,
                          SelfSimilarState, make_selfsim_state,
                          self_similar_image_velocity)
from .evolution import (StateSnapshot, make_snapshot, startup_state,
                        advection_term, step, run_simulation,
                        SimulationResult, SourceTerms, duhamel_sources,
                        duhamel_initial_data, duhamel_boundary_solution,
                        self_similar_residual, norm_l2m,
                        linearized_oseen_evolve, u0_wall_modes)

__version__ = "0.1.0"
