"""Structure-exploiting SQP for constrained discrete-time optimal control.

Hard equality constraints are handled by nullspace-projected Riccati
recursion, inequalities by a regularized primal-dual interior-point method
with predictor-corrector barrier updates.
"""
from .model import (DimensionError, Iterate, KktResidual, NonFiniteError, OcpProblem, Stage,
                    StageLq, TerminalCost, derivative_check, evaluate_stage, kkt_residual,
                    validate_problem)
from .problems import PROBLEMS, problem_library
from .solver import SolveReport, SolverSettings, Status, solve

__all__ = [
    "DimensionError", "Iterate", "KktResidual", "NonFiniteError", "OcpProblem", "Stage",
    "StageLq", "TerminalCost", "derivative_check", "evaluate_stage", "kkt_residual",
    "validate_problem", "PROBLEMS", "problem_library", "SolveReport", "SolverSettings",
    "Status", "solve",
]
__version__ = "0.1.0"
