"""Numerical toolkit for optimal control of stochastic Volterra integral equations."""

__version__ = "0.1.0"

from .grid import (
    MONTE_CARLO, TREE, AdaptedProcess, NoiseDriver, RegressionWarning, ResourceLimitError, TimeGrid,
    TwoTimeProcess, brownian_moment, build_driver, cond_expect, make_grid, martingale_integrand,
)
from .problem import (
    ControlSet, LinearSpec, ProblemSpec, ScalarFunction, epidemic_scenario, validate_assumptions,
)
from .solver import (
    LinearSVIEInput, NumericalError, eval_cost, linearize, solve_linear_svie, solve_svie, stability_check,
)
from .adjoint import (
    FirstOrderAdjoint, delta_H, hamiltonian, hamiltonian_u, hessian_H, solve_first_order_adjoint,
)
from .second_order import (
    B3_matrix, B_state_independent, F_quadratic, J_bilinear_sde, QuadraticWeights, f1_bilinear,
    f2_bilinear, quadratic_weights, solve_second_order_bsde, spike_direction,
)
from .spike import (
    asymptotic_experiment, check_order_estimates, solve_variational, spike_control,
    variational_inequality_terms,
)
from .mp import MPReport, check_mp, convex_condition, script_S, script_S0, script_S_discrete
from .lq import LQSolution, case1_conditions, case2_conditions, script_S1, solve_lq
from .scenario import ScenarioError, ScenarioFile, parse_scenario, serialize_scenario
