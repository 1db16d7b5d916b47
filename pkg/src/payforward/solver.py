"""Finite-horizon dynamic programming over the truncated fork game.

``g_k(a, b, c)`` is Miner 1's optimal expected gain from state ``(a, b, c)``
while the longest chain grows by ``k`` more levels.  One layer ``g_k`` depends
on ``g_{k-1}`` and on itself, but the in-layer dependencies are acyclic:
capitulation targets have a shorter honest branch and mining by Miner 1 only
lengthens his own.  Sweeping ``b`` upwards and ``a`` downwards therefore
computes each layer exactly in one pass.

The layer map is monotone and commutes with adding a constant, so the
per-state increments ``g_k - g_{k-1}`` bracket the gain per level and the
bracket shrinks geometrically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from payforward.model import (
    MINE,
    ORIGIN,
    RELEASE,
    Action,
    Event,
    ForkState,
    MiningParams,
    all_states,
    capitulation_tag,
    frontier_action,
    is_winning,
    legal_actions,
    payforward_amount,
    transition,
)

K_MAX = 100_000
CONVERGENCE_TOL = 1e-7
TIE_TOL = 1e-9


class PolicyError(ValueError):
    pass


class NotErgodic(PolicyError):
    pass


class _Program:
    """Index-level description of one layer update, compiled once per params."""

    def __init__(self, params: MiningParams):
        self.params = params
        states = sorted(all_states(params), key=lambda s: (s.b, -s.a, s.c))
        self.states = states
        self.index = {s: i for i, s in enumerate(states)}
        idx = self.index
        self.ops = []
        for st in states:
            a, b, c = st
            pf = payforward_amount(c, params)
            if is_winning(st, params):
                self.ops.append(((idx[ORIGIN], a + pf), None, (), None, None))
                continue
            acts = legal_actions(st, params)
            mine = None
            if MINE in acts:
                mine = (idx[ForkState(a + 1, b, c)], idx[ForkState(a, b + 1, c)])
            caps = tuple(idx[ForkState(0, s, capitulation_tag(st, s, params))] for s in range(b))
            rel = None
            horizon = None
            if RELEASE in acts:
                rel = (idx[ForkState(a - b - 1, 0, 0)], b + 1 + pf)
                horizon = (a - b, b + pf)
            self.ops.append((None, mine, caps, rel, horizon))

    def layer(self, prev: list[float], k: int) -> list[float]:
        p = self.params.p
        q = 1.0 - p
        cur = [0.0] * len(prev)
        for i, (win, mine, caps, rel, horizon) in enumerate(self.ops):
            if win is not None:
                cur[i] = prev[win[0]] + win[1]
                continue
            best = -math.inf
            if mine is not None:
                best = p * cur[mine[0]] + q * prev[mine[1]]
            for j in caps:
                if cur[j] > best:
                    best = cur[j]
            if rel is not None:
                v = prev[rel[0]] + rel[1]
                if v > best:
                    best = v
                # with k levels left an a >= k + b lead can be cashed in whole
                if k <= horizon[0]:
                    v = k + horizon[1]
                    if v > best:
                        best = v
            cur[i] = best
        return cur


_programs: dict[MiningParams, _Program] = {}


def _program(params: MiningParams) -> _Program:
    prog = _programs.get(params)
    if prog is None:
        if len(_programs) > 256:
            _programs.clear()
        prog = _programs[params] = _Program(params)
    return prog


@dataclass
class ValueTable:
    params: MiningParams
    K: int
    states: list[ForkState]
    index: dict[ForkState, int]
    layers: dict[int, list[float]] = field(repr=False)

    def value(self, k: int, state: ForkState) -> float:
        try:
            layer = self.layers[k]
        except KeyError:
            raise KeyError(f"layer k={k} not retained (K={self.K})") from None
        return layer[self.index[state]]

    @property
    def full(self) -> bool:
        return len(self.layers) == self.K + 1

    def increments(self) -> np.ndarray:
        return np.asarray(self.layers[self.K]) - np.asarray(self.layers[self.K - 1])

    def gain_bounds(self) -> tuple[float, float]:
        """min/max over states of g_K - g_{K-1}; the gain per level lies between."""
        inc = self.increments()
        return float(inc.min()), float(inc.max())

    @property
    def gain(self) -> float:
        lo, hi = self.gain_bounds()
        return 0.5 * (lo + hi)


def value_iterate(
    params: MiningParams,
    K: int | None = None,
    *,
    keep_layers: bool = False,
    tol: float = 1e-10,
    k_max: int = K_MAX,
) -> ValueTable:
    """Compute layers g_0..g_K.

    With ``K=None`` iteration stops once the increment bracket is narrower than
    ``tol`` (or at ``k_max``).  Only the last two layers are kept unless
    ``keep_layers`` is set.
    """
    if K is not None and K < 1:
        raise ValueError(f"horizon K must be >= 1, got {K}")
    prog = _program(params)
    if not prog.states:
        raise ValueError("empty state space")
    prev = [0.0] * len(prog.states)
    layers = {0: prev}
    # the horizon shortcut can only fire while k <= a - b
    warmup = (params.a_max if params.strategic else 0) + 2
    limit = K if K is not None else k_max
    k = 0
    while k < limit:
        k += 1
        cur = prog.layer(prev, k)
        if keep_layers:
            layers[k] = cur
        else:
            layers = {k - 1: prev, k: cur}
        if K is None and k > warmup:
            lo = hi = cur[0] - prev[0]
            for x, y in zip(cur, prev):
                inc = x - y
                if inc < lo:
                    lo = inc
                elif inc > hi:
                    hi = inc
            if hi - lo < tol:
                prev = cur
                break
        prev = cur
    return ValueTable(params, k, prog.states, prog.index, layers)


class GainEstimate(NamedTuple):
    g_star: float
    converged: bool
    residual: float


def gain_per_level(table: ValueTable) -> GainEstimate:
    """``g_K(0,0,0) / K`` with the change from ``g_{K-1}(0,0,0) / (K-1)``."""
    K = table.K
    if K < 2:
        raise ValueError("gain per level needs K >= 2")
    g = table.value(K, ORIGIN) / K
    residual = abs(g - table.value(K - 1, ORIGIN) / (K - 1))
    return GainEstimate(g, residual < CONVERGENCE_TOL, residual)


def optimal_gain(params: MiningParams, tol: float = 1e-10) -> float:
    return value_iterate(params, tol=tol).gain


# --- policies -------------------------------------------------------------

_KIND = {"mine": "mining", "release": "release", "capitulate": "capitulation"}


def _preference(action: Action) -> tuple[int, int]:
    # ties go to mine, then release, then the shallowest capitulation
    return {"mine": (0, 0), "release": (1, 0)}.get(action.kind, (2, action.target))


@dataclass(frozen=True)
class PolicyTable:
    params: MiningParams
    actions: dict[ForkState, Action | None]

    def __getitem__(self, state: ForkState) -> Action | None:
        try:
            return self.actions[state]
        except KeyError:
            raise PolicyError(f"policy has no action for state {state}") from None

    def kind(self, state: ForkState) -> str:
        action = self[state]
        return "winning" if action is None else _KIND[action.kind]

    def states_of_kind(self, kind: str) -> set[ForkState]:
        return {s for s in self.actions if self.kind(s) == kind}

    def reachable(self, start: ForkState = ORIGIN) -> set[ForkState]:
        """States visited from ``start`` when following this policy."""
        seen = {start}
        todo = [start]
        while todo:
            st = todo.pop()
            action = self[st]
            if action is None or action.kind != "mine":
                nxt = [transition(st, action, Event.SETTLE, self.params).next]
            else:
                nxt = [transition(st, MINE, ev, self.params).next for ev in (Event.MINER1_MINES, Event.MINER2_MINES)]
            for n in nxt:
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen

    def is_frontier(self) -> bool:
        """True when the policy acts like Frontier on every state it can reach."""
        return all(self[s] == frontier_action(s, self.params) for s in self.reachable())


def frontier_policy(params: MiningParams) -> PolicyTable:
    return PolicyTable(params, {s: frontier_action(s, params) for s in all_states(params)})


def choose(options: list[tuple[float, Action]]) -> tuple[Action, float]:
    """Argmax with the tie-breaking order mine > release > capitulate(smallest s)."""
    best = max(v for v, _ in options)
    tied = [act for v, act in options if v >= best - TIE_TOL * (1.0 + abs(best))]
    return min(tied, key=_preference), best


def state_options(
    state: ForkState, params: MiningParams, cur, prev, shift: float = 0.0
) -> list[tuple[float, Action]]:
    """Values of each legal action given same-layer (``cur``) and previous-layer
    (``prev``) lookups; ``shift`` is subtracted whenever a level is consumed."""
    a, b, c = state
    p = params.p
    pf = payforward_amount(c, params)
    out = []
    for act in legal_actions(state, params):
        if act == MINE:
            v = p * cur(ForkState(a + 1, b, c)) + (1 - p) * (prev(ForkState(a, b + 1, c)) - shift)
        elif act == RELEASE:
            v = prev(ForkState(a - b - 1, 0, 0)) + b + 1 + pf - shift
        else:
            v = cur(ForkState(0, act.target, capitulation_tag(state, act.target, params)))
        out.append((v, act))
    return out


def extract_policy(table: ValueTable) -> PolicyTable:
    params = table.params
    K = table.K
    cur = table.layers[K]
    prev = table.layers[K - 1]
    idx = table.index
    actions: dict[ForkState, Action | None] = {}
    for st in table.states:
        if is_winning(st, params):
            actions[st] = None
            continue
        opts = state_options(st, params, lambda s: cur[idx[s]], lambda s: prev[idx[s]])
        actions[st] = choose(opts)[0]
    return PolicyTable(params, actions)


def solve_policy(params: MiningParams) -> PolicyTable:
    return extract_policy(value_iterate(params))


# --- long-run decomposition -------------------------------------------------


class Decomposition(NamedTuple):
    q_M: float
    q_PF: float
    pf_per_level: float
    gain: float


def _resolve(state: ForkState, policy: PolicyTable):
    """Follow instantaneous moves (settlements, capitulations, releases) until
    Miner 1 next mines.  Returns the mining state and accrued
    (levels, miner1 blocks, pay-forward claims, pay-forward value)."""
    levels = blocks = claims = 0
    value = 0.0
    for _ in range(10 * len(policy.actions) + 10):
        action = policy[state]
        if action == MINE:
            return state, (levels, blocks, claims, value)
        out = transition(state, action, Event.SETTLE, policy.params)
        if action is None or action == RELEASE:
            claims += state.c != 0
        levels += out.levels_added
        blocks += out.miner1_blocks
        value += out.payforward
        state = out.next
    raise PolicyError(f"policy never returns to mining from {state}")


def policy_gain_decomposition(policy: PolicyTable, params: MiningParams | None = None) -> Decomposition:
    """Exact long-run fractions for ``policy`` via the stationary distribution of
    the chain on states where Miner 1 mines."""
    params = params or policy.params
    if params != policy.params:
        policy = PolicyTable(params, policy.actions)
    start, _ = _resolve(ORIGIN, policy)
    index = {start: 0}
    order = [start]
    rows: list[list[tuple[int, float]]] = []
    rewards: list[np.ndarray] = []
    i = 0
    while i < len(order):
        st = order[i]
        i += 1
        row = []
        r = np.zeros(4)
        for ev, prob in ((Event.MINER1_MINES, params.p), (Event.MINER2_MINES, 1 - params.p)):
            out = transition(st, MINE, ev, params)
            nxt, acc = _resolve(out.next, policy)
            r += prob * (np.array(acc) + np.array([out.levels_added, 0, 0, 0]))
            if nxt not in index:
                index[nxt] = len(order)
                order.append(nxt)
            row.append((index[nxt], prob))
        rows.append(row)
        rewards.append(r)

    n = len(order)
    P = np.zeros((n, n))
    for i, row in enumerate(rows):
        for j, prob in row:
            P[i, j] += prob
    # single recurrent class: every visited state must lead back to the start
    back = {0}
    changed = True
    while changed:
        changed = False
        for i in range(n):
            if i not in back and any(P[i, j] > 0 and j in back for j in range(n)):
                back.add(i)
                changed = True
    if len(back) != n:
        stuck = [str(order[i]) for i in range(n) if i not in back]
        raise NotErgodic(f"policy chain is not ergodic; no return from {', '.join(stuck[:5])}")

    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(A, rhs)
    levels, blocks, claims, value = pi @ np.array(rewards)
    return Decomposition(
        float(blocks / levels), float(claims / levels), float(value / levels), float((blocks + value) / levels)
    )
