"""Stacked primal-dual hybrid gradient solver with a limited-angle
tomography harness."""

__version__ = "0.1.0"

from .geometry import GridSpec, ImageGrid, ScanGeometry, Sinogram, default_geometry
from .linop import (BlockOperator, LinearOperator, OperatorShape, PowerMethodError, compose,
                    identity, op_norm, stack)
from .pdhg import (ConvergenceLog, IterateState, ProblemSpec, StepConfig, StepParams,
                   derive_step_params, pdhg_iterate, solve)
from .problems import DTVConfig, build_dtv_2d, build_dtv_3d

__all__ = [
    "GridSpec", "ImageGrid", "ScanGeometry", "Sinogram", "default_geometry",
    "BlockOperator", "LinearOperator", "OperatorShape", "PowerMethodError", "compose",
    "identity", "op_norm", "stack",
    "ConvergenceLog", "IterateState", "ProblemSpec", "StepConfig", "StepParams",
    "derive_step_params", "pdhg_iterate", "solve",
    "DTVConfig", "build_dtv_2d", "build_dtv_3d",
]
