"""netlod: coarse-scale solvers for spatial network models.

Builds graph-Laplacian-type operators (heat conduction, axial springs,
fiber bending) on networks embedded in a box domain, audits the coarse
scale assumptions, and solves via localized correctors on a uniform
hypercube mesh.
"""

__version__ = "0.1.0"

from .audit import (AuditReport, connectivity_subgraph, convergence_study,
                    decay_study, error_norms, estimate_poincare_mu, full_audit,
                    homogeneity_scan)
from .errors import (DisconnectedRegionError, GenerationError,
                     InterpolationError, MeshError, NetlodError,
                     NetworkValidationError, SolverError)
from .generator import (GenerationReport, GeneratorConfig,
                        generate_fiber_network, generate_with_report,
                        network_from_segments, tag_dirichlet_nodes)
from .interpolation import QuasiInterpolator, coarse_dofs, compute_dual_basis, interpolate
from .lod import (CorrectorBasis, IdealOracle, MultiscaleSystem,
                  assemble_multiscale, build_corrector_basis, correct_function,
                  dirichlet_lifting, element_corrector, free_dofs,
                  solve_coarse_fem, solve_lod, solve_multiscale, solve_reference)
from .mesh import CoarseMesh, build_coarse_mesh, coarse_basis_matrix
from .network import SpatialNetwork, read_network, write_network
from .operators import (AssembledOperator, EdgeCoefficients, FiberParams,
                        assemble_fiber2d_operator, assemble_fiber_bending,
                        assemble_fiber_operator, assemble_heat_operator,
                        assemble_laplacian, assemble_mass, assemble_model,
                        assemble_spring_operator, inverse_mass_norm,
                        restrict_operator, seminorm)
from .solvers import (SaddleSystem, SolveReport, cg_solve,
                      generalized_eig_smallest, saddle_solve)
