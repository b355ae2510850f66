"""Resource-constrained dynamic pricing simulation laboratory."""

from .fluid import (
    FluidInfeasibleError,
    FluidProblem,
    FluidSolution,
    attraction_threshold,
    boundary_attract,
    fluid_value,
    solve_fluid,
)
from .kernels import backend_name
from .model import (
    LinearDemandModel,
    ModelValidationError,
    PriceBox,
    PricingInstance,
    clip_to_box,
    demand_mean,
    inverse_demand,
    revenue_of_demand,
    unconstrained_opt_demand,
)

__version__ = "0.1.0"

__all__ = [
    "FluidInfeasibleError",
    "FluidProblem",
    "FluidSolution",
    "LinearDemandModel",
    "ModelValidationError",
    "PriceBox",
    "PricingInstance",
    "attraction_threshold",
    "backend_name",
    "boundary_attract",
    "clip_to_box",
    "demand_mean",
    "fluid_value",
    "inverse_demand",
    "revenue_of_demand",
    "solve_fluid",
    "unconstrained_opt_demand",
    "__version__",
]
