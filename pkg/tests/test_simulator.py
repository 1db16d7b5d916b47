import csv
import json

import pytest

from payforward.model import ForkState, MiningParams
from payforward.simulate import (
    SimConfig,
    SimStats,
    compile_chain,
    keep_probability,
    simulate,
    simulate_replicates,
    simulate_small_miners,
)
from payforward.solver import PolicyError, PolicyTable, frontier_policy, optimal_gain, solve_policy


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(MiningParams(0.3), phases=0)
    with pytest.raises(ValueError):
        SimConfig(MiningParams(0.3), frontier_policy(MiningParams(0.4)))


def test_frontier_lemma_values():
    s = simulate(SimConfig(MiningParams(0.3, 1.0), phases=1_000_000, seed=0))
    assert s.q_M_hat == pytest.approx(0.3, abs=0.002)
    assert s.q_PF_hat == pytest.approx(0.21, abs=0.002)
    assert s.forks_started == 0 and s.forks_won == 0
    assert s.realized_gain_per_level == pytest.approx(s.q_M_hat + s.miner1_pf_value / s.blocks_settled)
    assert 0 < s.q_M_se < 0.001


def test_optimal_at_curve_point():
    params = MiningParams(0.45, 0.225)
    s = simulate(SimConfig(params, solve_policy(params), phases=400_000, seed=7))
    assert s.realized_gain_per_level == pytest.approx(0.5057, abs=0.003)


def test_tiny_power_never_mines():
    s = simulate(SimConfig(MiningParams(1e-9, 0.5), phases=20_000, seed=1))
    assert s.q_M_hat == 0 and s.miner1_pf_value == 0


def test_seed_determinism():
    cfg = SimConfig(MiningParams(0.46, 0.1), solve_policy(MiningParams(0.46, 0.1)), phases=50_000, seed=42)
    assert simulate(cfg).to_dict() == simulate(cfg).to_dict()
    other = SimConfig(cfg.params, cfg.policy, cfg.phases, seed=43)
    assert simulate(other).to_dict() != simulate(cfg).to_dict()


@pytest.mark.parametrize(
    "params",
    [MiningParams(0.45, 0.0), MiningParams(0.48, 0.3), MiningParams(0.4, 0.5, 8, "strategic"),
     MiningParams(0.46, 0.1, 8, scheme="shared"), MiningParams(0.3, 0.5, 8, "strategic", "shared")],
)
def test_gain_matches_solver(params):
    s = simulate(SimConfig(params, solve_policy(params), phases=300_000, seed=11))
    g = optimal_gain(params)
    assert abs(s.realized_gain_per_level - g) < 4 * s.gain_se
    assert 0 <= s.q_M_hat <= 1 and 0 <= s.q_PF_hat <= 1
    assert s.miner1_pf_value <= s.pf_attached + 1e-9


def test_forks_counted_for_selfish_policy():
    params = MiningParams(0.45, 0.0)
    s = simulate(SimConfig(params, solve_policy(params), phases=100_000, seed=3))
    assert 0 < s.forks_won < s.forks_started


def test_missing_policy_state():
    params = MiningParams(0.3)
    actions = dict(frontier_policy(params).actions)
    del actions[ForkState(0, 1, 1)]
    with pytest.raises(PolicyError, match=r"\(0,1,1\)"):
        simulate(SimConfig(params, PolicyTable(params, actions), phases=10))


def test_chain_has_two_successors_per_state():
    chain = compile_chain(solve_policy(MiningParams(0.45, 0.0)))
    assert chain.nxt.shape == (len(chain.states), 2)
    assert (chain.nxt >= 0).all() and (chain.nxt < len(chain.states)).all()


def test_merge_is_order_independent():
    params = MiningParams(0.44, 0.2)
    a = simulate(SimConfig(params, phases=20_000, seed=1))
    b = simulate(SimConfig(params, phases=30_000, seed=2))
    ab, ba = a.merge(b).to_dict(), b.merge(a).to_dict()
    ab.pop("seeds"), ba.pop("seeds")
    assert ab == pytest.approx(ba)
    assert a.merge(SimStats()).blocks_settled == a.blocks_settled


def test_replicates():
    cfg = SimConfig(MiningParams(0.3, 1.0), phases=50_000, seed=5)
    one = simulate_replicates(cfg, 3)
    two = simulate_replicates(cfg, 3, workers=2)
    assert one.to_dict() == two.to_dict()
    assert one.phases == 150_000 and len(one.seeds) == 3
    assert one.q_M_hat == pytest.approx(0.3, abs=0.01)


def test_trace(tmp_path):
    path = tmp_path / "trace.csv"
    stats = simulate(SimConfig(MiningParams(0.3, 1.0), phases=500, seed=0), trace_path=path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 500
    assert sum(int(r["levels"]) for r in rows) == stats.blocks_settled
    assert sum(int(r["miner1_blocks"]) for r in rows) == stats.miner1_blocks
    json.dumps(stats.to_dict())


def test_small_miners_keep_rate():
    r = simulate_small_miners(n=50, p=0.44, w=0.132, phases=200_000, seed=0)
    assert r.trials > 1000
    assert abs(r.keep_rate - keep_probability(0.44)) < 3 * r.keep_se
    assert r.deviation_payoff == pytest.approx((1 + 0.132) * r.keep_rate)
    assert r.compliant_payoff == pytest.approx(0.868)
    assert set(r.pf_values) <= {0.0, 0.132}


def test_small_miners_all_honest():
    r = simulate_small_miners(n=20, p=0.4, w=0.2, phases=20_000, seed=1, deviant_index=None)
    assert r.trials == 0 and r.pf_values == [0.2]
    # everyone claims w and pays w, so each block is worth exactly 1
    for u, blocks in zip(r.utilities, r.blocks):
        assert u == pytest.approx(blocks)


def test_small_miners_zero_payforward_is_no_deviation():
    a = simulate_small_miners(n=10, p=0.44, w=0.0, phases=20_000, seed=2)
    b = simulate_small_miners(n=10, p=0.44, w=0.0, phases=20_000, seed=2, deviant_index=None)
    assert a.utilities == b.utilities and a.trials == 0


@pytest.mark.parametrize(
    "kw",
    [dict(n=2, hash_powers=[0.4, 0.3, 0.2]), dict(n=2, hash_powers=[0.4, 0.6]),
     dict(n=2, hash_powers=[0.6, 0.2, 0.2]), dict(n=2, p=0.3, deviant_index=5),
     dict(n=2, p=0.3, deviation="other"), dict(n=2)],
)
def test_small_miners_validation(kw):
    with pytest.raises(ValueError):
        simulate_small_miners(phases=10, **kw)
