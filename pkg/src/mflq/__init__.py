"""Open-loop equilibrium controls for time-inconsistent conditional mean-field LQ problems."""

from .model import ProblemSpec, TimeGrid, aggregate, build_q_coeffs, validate
from .riccati import (
    BackwardOdeSolution,
    EquilibriumSolution,
    FeedbackLaw,
    check_second_order,
    pinv_apply,
    solve_equilibrium_system,
    solve_hat_p1,
    solve_hat_p2,
    solve_repr_coeffs,
    solve_y0,
)

__all__ = [
    "ProblemSpec", "TimeGrid", "aggregate", "build_q_coeffs", "validate",
    "BackwardOdeSolution", "EquilibriumSolution", "FeedbackLaw", "check_second_order",
    "pinv_apply", "solve_equilibrium_system", "solve_hat_p1", "solve_hat_p2",
    "solve_repr_coeffs", "solve_y0",
]
__version__ = "0.1.0"
