"""Finite-dimensional feedback stabilization of a discretized Boussinesq system.

Pipeline: MAC discretization (:mod:`.geometry`), steady states
(:mod:`.equilibrium`), the linearized generator and its adjoint
(:mod:`.operators`), the unstable eigenspace (:mod:`.spectral`), feedback
synthesis (:mod:`.synthesis`) and closed-loop simulation (:mod:`.closedloop`).
"""

from .closedloop import (
    ClosedLoopOperator,
    DecayReport,
    NormProxy,
    SimulationTrace,
    assemble_closed_loop,
    estimate_decay,
    norm_proxy,
    picard_solve,
    propagate_linear,
    propagate_nonlinear,
)
from .equilibrium import EquilibriumState, Forcing, manufactured_equilibrium, solve_steady
from .estimator import FeedbackStabilizer
from .geometry import (
    ControlRegions,
    Grid,
    assemble_diff_ops,
    build_grid,
    build_regions,
    divfree_basis,
    leray_project,
)
from .operators import (
    BlockOperator,
    DirichletMapD,
    assemble_adjoint,
    assemble_generator,
    control_injection,
    dirichlet_map,
    eval_nonlinear,
)
from .spectral import ProjectorPN, SpectralDecomposition, biorthonormalize, eig_unstable, project, projector
from .synthesis import (
    ControlMatrices,
    FeedbackLaw,
    boundary_shape_pool,
    build_control_matrices,
    kalman_rank_check,
    package_feedback,
    pole_place,
    ucp_witness_check,
)

__version__ = "0.1.0"

__all__ = [
    "BlockOperator", "ClosedLoopOperator", "ControlMatrices", "ControlRegions", "DecayReport",
    "DirichletMapD", "EquilibriumState", "FeedbackLaw", "FeedbackStabilizer", "Forcing", "Grid",
    "NormProxy", "ProjectorPN", "SimulationTrace", "SpectralDecomposition", "assemble_adjoint",
    "assemble_closed_loop", "assemble_diff_ops", "assemble_generator", "biorthonormalize",
    "boundary_shape_pool", "build_control_matrices", "build_grid", "build_regions",
    "control_injection", "dirichlet_map", "divfree_basis", "eig_unstable", "estimate_decay",
    "eval_nonlinear", "kalman_rank_check", "leray_project", "manufactured_equilibrium",
    "norm_proxy", "package_feedback", "picard_solve", "pole_place", "project", "projector",
    "propagate_linear", "propagate_nonlinear", "solve_steady", "ucp_witness_check",
]
