"""Differentiable optimization layers."""

from .qp import (
    KktFactor, QpProblem, QpSolution, SolverConfig, Status, ValidatedProblem,
    kkt_residuals, solve_batch, solve_qp, validate_problem,
)
from .qpdiff import BackwardSeeds, DiffTriple, ParamGrads, assemble_grads, backward_solve, gradcheck

__version__ = "0.1.0"
