"""Asynchronous network Newton for penalized consensus optimization."""

from .topology import build_graph, build_consensus, validate_consensus, Graph, ConsensusMatrix
from .objectives import (QuadraticObjective, LogisticObjective, ProblemSpec, make_problem,
                         quadratic_locals, parse_libsvm, load_libsvm, partition_uniform)
from .newton_core import theory_constants, TheoryConstants
from .engine import (ActivationSchedule, RunConfig, Trace, run_async_newton, run_sync_newton,
                     run_gossip, enumerate_one_step_expectation, slow_agent_costs)
from .analysis import (Reference, RateReport, solve_reference, solve_constrained_reference,
                       weighted_error, aggregate_rates, steps_to_epsilon)

__version__ = "0.1.0"
