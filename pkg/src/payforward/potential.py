"""Linear program for the potential function and the gain per level.

Relaxing the maxima of the potential recurrence into inequalities gives an LP
in ``g`` and one ``phi`` per truncated state.  Minimising ``g`` (plus a tiny
multiple of the sum of potentials, which forces every recurrence to be tight)
yields the optimal gain per level, and any feasible pair bounds the
finite-horizon gains as ``g_k <= phi + k * g``.

This module also holds the closed-form extension of the honest potential to
states where Miner 1 holds a private lead (strategic release), with the
checks that it satisfies the strategic recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from payforward.model import (
    MINE,
    ORIGIN,
    RELEASE,
    Action,
    ForkState,
    MiningParams,
    Variant,
    all_states,
    capitulation_tag,
    honest_gain,
    is_winning,
    legal_actions,
    payforward_amount,
)
from payforward.solver import PolicyTable, ValueTable, choose, state_options

LP_TOL = 1e-9
TIGHT_TOL = 1e-6
BOUND_TOL = 1e-7


class LPError(RuntimeError):
    pass


def var_name(state: ForkState) -> str:
    return "phi_{}_{}_{}".format(*state)


@dataclass(frozen=True)
class Constraint:
    """``phi(state) >= sum(coef * var) + const``."""

    family: str
    state: ForkState
    terms: tuple[tuple[str, float], ...]
    const: float

    def __str__(self):
        rhs = []
        for name, coef in self.terms:
            if coef == 1:
                rhs.append(f"+ {name}")
            elif coef == -1:
                rhs.append(f"- {name}")
            else:
                rhs.append(f"{'+' if coef >= 0 else '-'} {abs(coef):.12g}*{name}")
        if self.const:
            rhs.append(f"{'+' if self.const >= 0 else '-'} {abs(self.const):.12g}")
        text = " ".join(rhs) or "0"
        if text.startswith("+ "):
            text = text[2:]
        return f"{var_name(self.state)} >= {text}"


@dataclass
class LinearProgramSpec:
    params: MiningParams
    states: list[ForkState]
    variables: list[str]
    constraints: list[Constraint]
    D: float

    def objective(self) -> np.ndarray:
        c = np.full(len(self.variables), 1.0 / self.D)
        c[0] = 1.0
        return c

    def to_text(self) -> str:
        lines = [f"minimize g + (1/{self.D:.12g}) * sum(phi)"]
        lines += [str(con) for con in self.constraints]
        lines.append(f"{var_name(ORIGIN)} = 0")
        return "\n".join(lines) + "\n"


def build_lp(params: MiningParams) -> LinearProgramSpec:
    p = params.p
    states = all_states(params)
    variables = ["g"] + [var_name(s) for s in states]
    cons = []
    for st in states:
        a, b, c = st
        pf = payforward_amount(c, params)
        if is_winning(st, params):
            cons.append(Constraint("winning", st, ((var_name(ORIGIN), 1.0), ("g", -1.0)), a + pf))
            continue
        acts = legal_actions(st, params)
        for s in range(b):
            target = ForkState(0, s, capitulation_tag(st, s, params))
            cons.append(Constraint("capitulation", st, ((var_name(target), 1.0),), 0.0))
        if MINE in acts:
            terms = (
                (var_name(ForkState(a + 1, b, c)), p),
                (var_name(ForkState(a, b + 1, c)), 1 - p),
                ("g", -(1 - p)),
            )
            cons.append(Constraint("mining", st, terms, 0.0))
        if RELEASE in acts:
            terms = ((var_name(ForkState(a - b - 1, 0, 0)), 1.0), ("g", -1.0))
            cons.append(Constraint("release", st, terms, b + 1 + pf))
    return LinearProgramSpec(params, states, variables, cons, 1e4 * (params.d + 1) ** 2)


@dataclass
class PotentialSolution:
    params: MiningParams
    g: float
    phi: dict[ForkState, float]
    residuals: dict[ForkState, dict[Action | None, float]] = field(repr=False)

    @property
    def variant(self) -> Variant:
        return self.params.variant

    def __call__(self, state: ForkState) -> float:
        return self.phi[state]


def _branch_values(st: ForkState, params: MiningParams, phi, g: float) -> list[tuple[float, Action | None]]:
    if is_winning(st, params):
        return [(phi(ORIGIN) + st.a + payforward_amount(st.c, params) - g, None)]
    return state_options(st, params, phi, phi, shift=g)


def solve_lp(spec: LinearProgramSpec) -> PotentialSolution:
    names = {v: i for i, v in enumerate(spec.variables)}
    rows, cols, vals, rhs = [], [], [], []
    for r, con in enumerate(spec.constraints):
        # -phi(state) + sum(coef * var) <= -const
        rows.append(r)
        cols.append(names[var_name(con.state)])
        vals.append(-1.0)
        for name, coef in con.terms:
            rows.append(r)
            cols.append(names[name])
            vals.append(coef)
        rhs.append(-con.const)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(spec.constraints), len(spec.variables)))
    b = np.array(rhs)
    # pinning phi(0,0,0) fixes the free shift; no sign bound, since winning
    # potentials go negative once g exceeds 1
    bounds = [(None, None)] * len(spec.variables)
    bounds[names[var_name(ORIGIN)]] = (0.0, 0.0)
    res = linprog(
        spec.objective(),
        A_ub=A,
        b_ub=b,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": LP_TOL, "dual_feasibility_tolerance": LP_TOL},
    )
    if res.x is None:
        raise LPError(f"LP failed: {res.message}")
    x = res.x
    worst = float(np.max(A @ x - b, initial=0.0))
    if res.status != 0 or worst > 1e2 * LP_TOL:
        raise LPError(f"LP failed ({res.message}); worst constraint violation {worst:.3g}")
    phi = {st: float(x[i + 1]) for i, st in enumerate(spec.states)}
    g = float(x[0])
    residuals = {
        st: {act: phi[st] - v for v, act in _branch_values(st, spec.params, phi.__getitem__, g)}
        for st in spec.states
    }
    return PotentialSolution(spec.params, g, phi, residuals)


def solve_potential(params: MiningParams) -> PotentialSolution:
    return solve_lp(build_lp(params))


class PotentialReport(NamedTuple):
    ok: bool
    max_gap: float
    failures: list[tuple[ForkState, float]]
    policy: PolicyTable


def verify_potential(sol: PotentialSolution, params: MiningParams | None = None) -> PotentialReport:
    """Check that every phi equals the best of its recurrence branches and read
    back the maximising action of each state."""
    params = params or sol.params
    failures = []
    actions = {}
    worst = abs(sol.phi[ORIGIN])
    if worst > TIGHT_TOL:
        failures.append((ORIGIN, sol.phi[ORIGIN]))
    for st in sol.phi:
        opts = _branch_values(st, params, sol.phi.__getitem__, sol.g)
        if opts[0][1] is None:
            act, best = None, opts[0][0]
        else:
            act, best = choose(opts)
        actions[st] = act
        gap = sol.phi[st] - best
        worst = max(worst, abs(gap))
        if abs(gap) > TIGHT_TOL:
            failures.append((st, gap))
    return PotentialReport(not failures, worst, failures, PolicyTable(params, actions))


def readback_policy(sol: PotentialSolution) -> PolicyTable:
    return verify_potential(sol).policy


def induction_violations(sol: PotentialSolution, table: ValueTable, tol: float = BOUND_TOL):
    """All (k, state, excess) with g_k(state) > phi(state) + k g + tol."""
    if sol.params != table.params:
        raise ValueError("potential and value table were computed for different parameters")
    out = []
    for k in sorted(table.layers):
        layer = table.layers[k]
        for st, i in table.index.items():
            excess = layer[i] - (sol.phi[st] + k * sol.g)
            if excess > tol:
                out.append((k, st, excess))
    return out


def check_induction_bound(sol: PotentialSolution, table: ValueTable, tol: float = BOUND_TOL) -> bool:
    return not induction_violations(sol, table, tol)


def upper_bound_violations(sol: PotentialSolution, p: float | None = None, w: float | None = None):
    """Pairs violating phi(a+l, b+l, 1) <= phi(a, b, 0) + (l + w)(p/(1-p))^(b-a+1)."""
    params = sol.params
    p = params.p if p is None else p
    w = params.w if w is None else w
    ratio = p / (1 - p)
    out = []
    for (a, b, c) in sol.phi:
        if c != 0 or a > b:
            continue
        for ell in (0, 1):
            far = ForkState(a + ell, b + ell, 1)
            if far not in sol.phi:
                continue
            slack = sol.phi[ForkState(a, b, 0)] + (ell + w) * ratio ** (b - a + 1) - sol.phi[far]
            if slack < -BOUND_TOL:
                out.append((ForkState(a, b, 0), ell, slack))
    return out


def check_potential_upper_bound(sol: PotentialSolution, p: float | None = None, w: float | None = None) -> bool:
    return not upper_bound_violations(sol, p, w)


# --- closed-form strategic extension ------------------------------------------


class PhiBarParams(NamedTuple):
    lam: float
    mu: float
    kappa: float


def phi_bar_params(p: float, w: float) -> PhiBarParams:
    if p == 0.5:
        raise ValueError("closed-form potential is undefined at p = 0.5")
    lam = (p - 1) ** 2 * (1 - p * w) / (1 - 2 * p)
    mu = p * (p - (p - 1) ** 2 * w) / (2 * p - 1)
    kappa = (p - 1) * p * (p * w - 1) / (2 * p - 1)
    return PhiBarParams(lam, mu, kappa)


def phi_bar(a: int, b: int, c: int, p: float, w: float, sol: PotentialSolution | None = None) -> float:
    """Honest immediate-release potential below the diagonal, linear beyond it."""
    if a <= b + 1:
        if sol is None:
            raise ValueError(f"state ({a},{b},{c}) needs a solved immediate-release potential")
        st = ForkState(a, b, c)
        if st not in sol.phi and a == b + 1:
            # (d+1, d) lies outside the truncated game; its winning value is fixed
            return a + c * w - sol.g
        return sol.phi[st]
    lam, mu, kappa = phi_bar_params(p, w)
    return a * lam + b * mu + kappa + c * w


def release_claim_value(p: float, w: float, c: int) -> float:
    """Lower bound (at b = 0) on how much releasing beats mining at a = b + 1."""
    return (p - 1) * (p**3 * w - p**2 * (w + 1) + p * (2 * c * w + 5) - c * w) + 1


def release_gap_closed_form(p: float, w: float) -> float:
    """phi_bar - phi_bar_R on the linear region; equals -kappa for every b."""
    return p * (1 - p) * (1 - p * w) / (1 - 2 * p)


@dataclass
class ClaimsReport:
    p: float
    w: float
    release_gap_min: float
    release_gap_expected: float
    capitulation_max: float
    capitulation_cap: float
    release_floor_min: float
    release_floor: float
    release_vs_mine: dict[int, float]
    release_vs_mine_min: float
    recurrence_max_gap: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_strategic_claims(p: float, w: float, sol: PotentialSolution) -> ClaimsReport:
    """Evaluate the closed-form potential against the strategic recurrence on
    a in 0..2d, b in 0..d-1, c in {0, 1}."""
    params = sol.params
    if params.strategic or params.scheme.value != "uniform":
        raise ValueError("claims are stated for the uniform immediate-release potential")
    d = params.d
    g = honest_gain(params)
    ratio = p / (1 - p)
    violations = []

    def pb(a, b, c):
        if a < 0:
            return -np.inf
        return phi_bar(a, b, c, p, w, sol)

    def branches(a, b, c):
        mine = p * pb(a + 1, b, c) + (1 - p) * (pb(a, b + 1, c) - g)
        release = pb(a - b - 1, 0, 0) + b + 1 + c * w - g if a >= b + 1 else -np.inf
        cap = max((pb(0, s, 1) for s in range(b)), default=-np.inf)
        return mine, release, cap

    gap_min = floor_min = np.inf
    cap_max = -np.inf
    rel_vs_mine = np.inf
    rec_gap = 0.0
    for b in range(d):
        for a in range(2 * d + 1):
            for c in (0, 1):
                mine, release, cap = branches(a, b, c)
                here = pb(a, b, c)
                rec_gap = max(rec_gap, abs(here - max(mine, release, cap)))
                if a > b + 1:
                    gap = here - release
                    gap_min = min(gap_min, gap)
                    floor_min = min(floor_min, release)
                    cap_max = max(cap_max, cap)
                    if gap <= 0:
                        violations.append(f"release beats the linear potential at ({a},{b},{c})")
                elif a == b + 1:
                    rel_vs_mine = min(rel_vs_mine, release - mine)
                    if release < mine - TIGHT_TOL:
                        violations.append(f"mining beats release at ({a},{b},{c})")
    if rec_gap > TIGHT_TOL:
        violations.append(f"strategic recurrence off by {rec_gap:.3g}")
    if cap_max > w * ratio + TIGHT_TOL:
        violations.append(f"capitulation value {cap_max:.6g} exceeds w p/(1-p) = {w * ratio:.6g}")
    floor = 1 - p * (1 - p) * w
    if floor_min < floor - TIGHT_TOL:
        violations.append(f"release value {floor_min:.6g} below 1 - p(1-p)w = {floor:.6g}")
    rvm = {c: release_claim_value(p, w, c) for c in (0, 1)}
    for c, v in rvm.items():
        if v < 0:
            violations.append(f"release-vs-mine bound negative for c={c}: {v:.6g}")
    return ClaimsReport(
        p, w, gap_min, release_gap_closed_form(p, w), cap_max, w * ratio, floor_min, floor,
        rvm, rel_vs_mine, rec_gap, violations,
    )
