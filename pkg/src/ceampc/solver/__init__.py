from .mpc import MpcProblem, MpcSolution, solve
from .qp import QPError, QPResult, solve_qp
from .sqp import LeastSquaresNLP, sqp_solve

__all__ = ["MpcProblem", "MpcSolution", "solve", "QPError", "QPResult", "solve_qp",
           "LeastSquaresNLP", "sqp_solve"]
