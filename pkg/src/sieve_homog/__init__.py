"""Numerical experiments for p-Laplacian obstacle problems on periodic sieves along convex surfaces."""

from .surface import (ConvexSurface, HoleShape, SieveConfig, critical_hole_size,
                      enumerate_hit_cells, plane_surface, quadratic_surface, cosh_surface)
from .equidistribution import (ModOneSample, discrepancy_exact, erdos_turan_bound,
                               erdos_koksma_sum_bound, surface_sequence, theorem1_deviation)
from .pcapacity import (CapacityProblem, SolidSet, cell_capacity, mean_capacity, plane_tilt_gap,
                        solve_capacity, tangent_approx_gap)
from .homogenization import (ObstacleProblemSpec, build_limit_measure, convergence_experiment,
                             corrector_energy, solve_homogenized, solve_perforated)

__version__ = "0.1.0"
