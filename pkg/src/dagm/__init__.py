"""Penalty-based decentralized bilevel optimization.

Agents on an undirected network each hold a pair of objectives and
cooperate, through neighbor averaging only, to solve a bilevel problem.
"""

__version__ = "0.1.0"

from .graph import (
    Graph,
    MixingMatrix,
    metropolis_weights,
    max_degree_weights,
    random_connected_graph,
    spectral_gap,
    validate_mixing,
)
from .problem import BilevelProblem, ProblemConstants, ho_problem, quad_bilevel, synthetic_regression_data
from .penalty import StackedState, hessian_split
from .dihgp import dihgp
from .dagm import RunConfig, dagm_run, hypergradient, inner_loop, schedule_params
from .diagnostics import penalty_gap, stationarity, theory_constants
