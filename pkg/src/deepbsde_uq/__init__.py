"""Deep BSDE solver with uncertainty quantification of its approximations."""
from .dbsde import DbsdeConfig, DbsdeResult, ensemble_solve, train
from .problems import (BlackScholesParams, BsdeProblem, BurgersParams, black_scholes_analytic,
                       black_scholes_problem, burgers_analytic, burgers_problem)
from .sde import TimeGrid

__version__ = "0.1.0"

__all__ = [
    "BlackScholesParams", "BsdeProblem", "BurgersParams", "DbsdeConfig", "DbsdeResult", "TimeGrid",
    "black_scholes_analytic", "black_scholes_problem", "burgers_analytic", "burgers_problem",
    "ensemble_solve", "train",
]
