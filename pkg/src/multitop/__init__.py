"""Multi-thickness topology optimization on adaptive quadtree meshes."""

from .driver import CaseConfig, CaseResult, StudyMatrix, run_case, run_study
from .export import SheetStack, extract_contours, extrude_stack, write_layers
from .fem import BvpSpec, assemble_solve, cantilever_bvp, mbb_half_bvp
from .material import TargetSet, effective_modulus, modulus_derivative
from .mesh import AdaptiveMesh, adapt, build_initial
from .optimizer import OptimizerConfig, oc_update, volume_fraction
from .regularization import (FilterConfig, ProjectionConfig, filter_adjoint,
                             pde_filter, project_derivative,
                             project_multilevel)

__all__ = [
    "AdaptiveMesh",
    "BvpSpec",
    "CaseConfig",
    "CaseResult",
    "FilterConfig",
    "OptimizerConfig",
    "ProjectionConfig",
    "SheetStack",
    "StudyMatrix",
    "TargetSet",
    "adapt",
    "assemble_solve",
    "build_initial",
    "cantilever_bvp",
    "effective_modulus",
    "extract_contours",
    "extrude_stack",
    "filter_adjoint",
    "mbb_half_bvp",
    "modulus_derivative",
    "oc_update",
    "pde_filter",
    "project_derivative",
    "project_multilevel",
    "run_case",
    "run_study",
    "volume_fraction",
    "write_layers",
]

__version__ = "0.1.0"
