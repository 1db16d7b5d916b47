"""Closed-form quantities: race-winning bounds, pay-forward share bounds for
the two ways a deviating strategy can differ from Frontier, the strategic
threshold root, and the small-miner deviation check."""

from __future__ import annotations

from typing import NamedTuple

from scipy.optimize import bisect

from payforward.potential import release_claim_value

__all__ = [
    "MarkovCaseBound",
    "case1_advantage",
    "case1_bound",
    "case1_qpf",
    "case1_qpf_bound",
    "case2_advantage",
    "gamblers_ruin_bound",
    "pne_deviation_check",
    "release_claim_value",
    "stationary_pi",
    "strategic_polynomial",
    "strategic_threshold",
]


def gamblers_ruin_bound(p: float, gap: int) -> float:
    """Largest probability that Miner 1 ever makes up a deficit of ``gap``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    return (p / (1 - p)) ** gap


def stationary_pi(alpha: float, beta: float, p: float) -> float:
    """Stationary mass of the capitulated state in the two-state race chain.

    ``alpha`` is the chance of losing the race after falling one behind,
    ``beta`` the chance of winning back from the capitulated state.
    """
    num = alpha * (1 - p)
    den = num + beta
    if den == 0:
        raise ValueError("degenerate chain: alpha*(1-p) and beta are both zero")
    return num / den


def case1_qpf(alpha: float, beta: float, p: float) -> float:
    """Upper bound on q_PF for a strategy that keeps mining one block behind."""
    pi = stationary_pi(alpha, beta, p)
    blocks = (1 - pi) * (2 * (1 - alpha) * (1 - p) + alpha * (1 - p) + p) + pi * (2 * beta + 1 - beta)
    return pi * beta / blocks


def case1_qpf_bound(p: float) -> float:
    return (1 - p) * p**2 / (1 - (1 - p) * p * (3 - 2 * p))


def case1_advantage(p: float) -> float:
    """p(1-p) minus the bound above, in simplified form."""
    return (1 - p) ** 3 * p * (1 - 2 * p) / (1 - (1 - p) * p * (3 - 2 * p))


def case2_advantage(p: float) -> float:
    num = (p - 1) ** 3 * p * (2 * p - 1) * (p**2 + p - 1)
    den = 1 + (p - 1) * p * (4 + p * (-4 + p * (2 * p - 1)))
    return 0.0 - num / den  # avoids a signed zero at the endpoints


class MarkovCaseBound(NamedTuple):
    alpha: float
    beta: float
    pi: float
    qpf_bound: float
    advantage: float


def case1_bound(p: float) -> MarkovCaseBound:
    """The race chain at its worst case: certain loss after falling behind,
    best possible comeback from two blocks down."""
    alpha = 1.0
    beta = (p / (1 - p)) ** 2
    qpf = case1_qpf(alpha, beta, p)
    return MarkovCaseBound(alpha, beta, stationary_pi(alpha, beta, p), qpf, p * (1 - p) - qpf)


def strategic_polynomial(p: float) -> float:
    return -(p**4) + 3 * p**3 - 7 * p**2 + 5 * p - 1


def strategic_threshold(xtol: float = 1e-12) -> float:
    """Root of the polynomial in (0, 0.5): the largest p for which releasing
    beats mining on at a one-block private lead with w = 1, c = 0."""
    return bisect(strategic_polynomial, 0.0, 0.5, xtol=xtol)


class DeviationCheck(NamedTuple):
    deviation_payoff: float
    compliant_payoff: float
    is_equilibrium_supporting: bool


def keep_probability(p: float) -> float:
    """Chance a non-paying small-miner block survives Miner 1's fork response."""
    return 1 - p**2 - (1 - p) * p**3


def pne_deviation_check(p: float, w: float) -> DeviationCheck:
    """Compare a small miner's payoff bound for skipping the pay-forward with
    the payoff floor for paying it."""
    if not 0.0 < p < 0.5:
        raise ValueError(f"p must lie in (0, 0.5), got {p}")
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    deviation = (1 + w) * keep_probability(p)
    compliant = 1 - w
    return DeviationCheck(deviation, compliant, deviation <= compliant)
