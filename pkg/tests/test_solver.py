import math
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from payforward.model import (
    MINE,
    ORIGIN,
    Action,
    Event,
    ForkState,
    MiningParams,
    Variant,
    all_states,
    honest_gain,
    legal_actions,
    transition,
)
from payforward.solver import (
    PolicyError,
    PolicyTable,
    extract_policy,
    frontier_policy,
    gain_per_level,
    optimal_gain,
    policy_gain_decomposition,
    solve_policy,
    value_iterate,
)


def recursive_oracle(params):
    """The recurrence written directly against the transition rules."""
    p, w = params.p, params.w

    @lru_cache(maxsize=None)
    def g(k, state):
        if k == 0:
            return 0.0
        a, b, c = state
        if params.strategic and a >= k + b:
            return k + b + c * w
        acts = legal_actions(state, params)
        if not acts:
            out = transition(state, None, Event.SETTLE, params)
            return g(k - 1, out.next) + out.reward
        best = -math.inf
        for act in acts:
            if act == MINE:
                up = transition(state, MINE, Event.MINER1_MINES, params).next
                down = transition(state, MINE, Event.MINER2_MINES, params).next
                v = p * g(k, up) + (1 - p) * g(k - 1, down)
            else:
                out = transition(state, act, Event.SETTLE, params)
                v = g(k - out.levels_added, out.next) + out.reward
            best = max(best, v)
        return best

    return g


def test_first_layers_by_hand():
    for p, w in ((0.2, 0.0), (0.4, 0.7)):
        t = value_iterate(MiningParams(p, w), 2, keep_layers=True)
        assert t.value(1, ORIGIN) == pytest.approx(p)
        assert t.value(1, ForkState(0, 0, 1)) == pytest.approx(p * (1 + w))
    t = value_iterate(MiningParams(0.4, 0.0), 2, keep_layers=True)
    assert t.value(2, ORIGIN) == pytest.approx(0.8)


def test_bad_horizon():
    with pytest.raises(ValueError):
        value_iterate(MiningParams(0.3), 0)


@settings(max_examples=25, deadline=None)
@given(
    p=st.floats(0.05, 0.6),
    w=st.floats(0.0, 1.5),
    d=st.integers(1, 4),
    variant=st.sampled_from(list(Variant)),
    scheme=st.sampled_from(["uniform", "shared"]),
)
def test_matches_recursive_oracle(p, w, d, variant, scheme):
    params = MiningParams(p, w, d, variant, scheme)
    K = 10
    t = value_iterate(params, K, keep_layers=True)
    g = recursive_oracle(params)
    for k in (1, 2, 5, K):
        for s in all_states(params):
            assert t.value(k, s) == pytest.approx(g(k, s), abs=1e-9)


@pytest.mark.parametrize("variant", list(Variant))
def test_value_table_monotone(variant):
    params = MiningParams(0.42, 0.3, 6, variant)
    t = value_iterate(params, 60, keep_layers=True)
    assert all(x == 0 for x in t.layers[0])
    for k in range(1, 61):
        for s in t.states:
            assert t.value(k, s) >= t.value(k - 1, s) - 1e-12
            if s.c == 0:
                assert t.value(k, s._replace(c=1)) >= t.value(k, s) - 1e-12
            longer = s._replace(a=s.a + 1)
            if longer in t.index:
                assert t.value(k, longer) >= t.value(k, s) - 1e-12


@pytest.mark.parametrize("p,w", [(0.3, 1.0), (0.44, 0.0), (0.48, 0.5)])
def test_exchange_bound(p, w):
    params = MiningParams(p, w, 8)
    t = value_iterate(params, 80, keep_layers=True)
    r = p / (1 - p)
    for k in range(0, 81, 5):
        for s in t.states:
            a, b, c = s
            if a > b:
                continue
            far = ForkState(a + 1, b + 1, c)
            if far in t.index:
                assert t.value(k, far) <= t.value(k, s) + r ** (b - a + 1) + 1e-9


def test_layer_not_kept():
    t = value_iterate(MiningParams(0.3), 10)
    assert not t.full
    with pytest.raises(KeyError):
        t.value(3, ORIGIN)


def test_gain_per_level_estimator():
    t = value_iterate(MiningParams(0.3, 0.0), 10_000)
    est = gain_per_level(t)
    assert est.g_star == pytest.approx(0.3, abs=1e-4)
    assert est.converged
    with pytest.raises(ValueError):
        gain_per_level(value_iterate(MiningParams(0.3), 1))


def test_gain_honest_point():
    g = optimal_gain(MiningParams(0.45, 0.225))
    assert g == pytest.approx(0.45 + 0.45 * 0.55 * 0.225, abs=1e-3)


def test_gain_beats_honest_without_payforward():
    assert optimal_gain(MiningParams(0.45, 0.0)) > 0.45 + 1e-4


def test_bracket_contains_estimate():
    t = value_iterate(MiningParams(0.47, 0.2), 3000)
    lo, hi = t.gain_bounds()
    assert lo <= t.gain <= hi
    converged = optimal_gain(MiningParams(0.47, 0.2))
    # the converged estimate is itself a midpoint of a bracket of width 1e-10
    assert lo - 1e-10 <= converged <= hi + 1e-10


def test_frontier_policy_regime():
    pol = solve_policy(MiningParams(0.3, 0.0))
    assert pol.states_of_kind("mining") & pol.reachable() == {ForkState(0, 0, 0), ForkState(0, 0, 1)}
    for c in (0, 1):
        assert pol[ForkState(0, 1, c)] == Action.capitulate(0)
    assert pol.is_frontier()


def test_fork_response_states():
    pol = solve_policy(MiningParams(0.44, 0.0))
    mining = pol.states_of_kind("mining")
    for a, b in ((0, 1), (1, 1), (1, 2), (2, 2)):
        for c in (0, 1):
            assert ForkState(a, b, c) in mining


def test_tiny_power_capitulates():
    params = MiningParams(1e-3, 0.0)
    pol = solve_policy(params)
    reach = pol.reachable()
    assert pol.states_of_kind("mining") & reach == {ORIGIN, ForkState(0, 0, 1)}
    for s in reach:
        if s.b >= 1:
            assert pol.kind(s) == "capitulation"
    # tied races stay worth one more block even at tiny p; they are just never reached
    assert pol.kind(ForkState(1, 1, 0)) == "mining"


def test_policy_actions_are_legal():
    for params in (MiningParams(0.46, 0.1), MiningParams(0.4, 0.4, 5, "strategic", "shared")):
        pol = solve_policy(params)
        for s, act in pol.actions.items():
            if act is None:
                assert legal_actions(s, params) == frozenset()
            else:
                assert act in legal_actions(s, params)


@pytest.mark.parametrize("p", [0.1, 0.3, 0.45])
def test_frontier_decomposition(p):
    for variant in Variant:
        dec = policy_gain_decomposition(frontier_policy(MiningParams(p, 1.0, 8, variant)))
        assert dec.q_M == pytest.approx(p, abs=1e-12)
        assert dec.q_PF == pytest.approx(p * (1 - p), abs=1e-12)
        assert isinstance(dec.q_M, float)


def test_decomposition_lemma_instance():
    dec = policy_gain_decomposition(frontier_policy(MiningParams(0.3, 1.0)))
    assert (dec.q_M, dec.q_PF) == pytest.approx((0.3, 0.21))


@pytest.mark.parametrize(
    "params",
    [MiningParams(0.45, 0.0), MiningParams(0.48, 0.3), MiningParams(0.4, 0.2, 8, "strategic"),
     MiningParams(0.46, 0.1, 8, scheme="shared")],
)
def test_decomposition_matches_value_iteration(params):
    pol = solve_policy(params)
    assert not pol.is_frontier()
    dec = policy_gain_decomposition(pol)
    assert dec.gain == pytest.approx(optimal_gain(params), abs=1e-6)
    if params.scheme.value == "uniform":
        assert dec.gain == pytest.approx(dec.q_M + dec.q_PF * params.w, abs=1e-9)
    assert dec.q_PF < params.p * (1 - params.p)


def test_missing_state_named():
    params = MiningParams(0.3)
    actions = dict(frontier_policy(params).actions)
    del actions[ForkState(0, 1, 0)]
    with pytest.raises(PolicyError, match=r"\(0,1,0\)"):
        policy_gain_decomposition(PolicyTable(params, actions))


def test_extract_policy_honest_gain_regime():
    params = MiningParams(0.43, 0.06)
    t = value_iterate(params)
    assert t.gain == pytest.approx(honest_gain(params), abs=1e-9)
    assert extract_policy(t).is_frontier()
