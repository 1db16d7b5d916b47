"""Mining game with pay-forward: exact solvers, potential LPs, bounds and a chain simulator."""

from payforward.model import (
    Action,
    Event,
    ForkState,
    MiningParams,
    Scheme,
    TransitionOutcome,
    Variant,
    honest_gain,
    legal_actions,
    payforward_amount,
    transition,
)
from payforward.potential import solve_potential
from payforward.search import is_frontier_best_response, min_w
from payforward.solver import optimal_gain, solve_policy, value_iterate

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Event",
    "ForkState",
    "MiningParams",
    "Scheme",
    "TransitionOutcome",
    "Variant",
    "honest_gain",
    "is_frontier_best_response",
    "min_w",
    "optimal_gain",
    "solve_policy",
    "solve_potential",
    "value_iterate",
    "legal_actions",
    "payforward_amount",
    "transition",
    "__version__",
]
