from .linear import LinearApp
from .vdp_advdiff import (
    ModelConfig,
    StepDivergence,
    VanDerPolAdvectionDiffusion,
    cn_step,
    field_operator,
    rhs_jacobian,
    semi_discrete_rhs,
)

__all__ = [
    "LinearApp",
    "ModelConfig",
    "StepDivergence",
    "VanDerPolAdvectionDiffusion",
    "cn_step",
    "field_operator",
    "rhs_jacobian",
    "semi_discrete_rhs",
]
