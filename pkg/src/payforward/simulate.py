"""Monte-Carlo play of the fork game, one block found per phase.

The two-miner simulation walks the chain of states where Miner 1 mines.
Settlements, releases and capitulations in between are resolved with the game
rules and their rewards credited to the phase that triggered them.  Standard
errors come from regenerative cycles (returns to the starting mining state),
so replicate statistics can be merged by adding sums.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from payforward.model import (
    MINE,
    NO_PF,
    ORIGIN,
    RELEASE,
    Event,
    ForkState,
    MiningParams,
    Scheme,
    transition,
)
from payforward.solver import PolicyError, PolicyTable, frontier_policy

CHUNK = 1 << 16

# per-transition accruals
LEVELS, M1_BLOCKS, CLAIMS, PF_VALUE, ATTACHED, FORKS_STARTED, FORKS_WON = range(7)
N_ACC = 7


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SimConfig:
    params: MiningParams
    policy: PolicyTable | None = None  # None means Frontier
    phases: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if int(self.phases) != self.phases or self.phases < 1:
            raise ValueError(f"phases must be an integer >= 1, got {self.phases}")
        if self.policy is not None and self.policy.params != self.params:
            raise ValueError("policy was built for different game parameters")

    def resolved_policy(self) -> PolicyTable:
        return self.policy if self.policy is not None else frontier_policy(self.params)


def _in_fork(st: ForkState) -> bool:
    return st.a >= 1 and st.b >= 1


def _attached(st: ForkState, s: int, params: MiningParams) -> float:
    """Pay-forward carried by the honest blocks b-s..1 that settle when Miner 1
    capitulates from ``st`` to ``s``."""
    n = st.b - s
    if n <= 0:
        return 0.0
    if params.scheme is Scheme.UNIFORM:
        return n * params.w
    first = 1 if st.c == NO_PF else 2
    return (first + 2 * (n - 1)) * params.w


def _settle_chain(state: ForkState, policy: PolicyTable, acc: np.ndarray) -> ForkState:
    """Apply instantaneous moves until Miner 1 mines again, adding rewards to ``acc``."""
    params = policy.params
    for _ in range(10 * len(policy.actions) + 10):
        action = policy[state]
        if action == MINE:
            return state
        out = transition(state, action, Event.SETTLE, params)
        if action is None or action == RELEASE:
            acc[CLAIMS] += state.c != 0
            acc[FORKS_WON] += state.b >= 1
        else:
            acc[ATTACHED] += _attached(state, action.target, params)
        acc[LEVELS] += out.levels_added
        acc[M1_BLOCKS] += out.miner1_blocks
        acc[PF_VALUE] += out.payforward
        state = out.next
    raise PolicyError(f"policy never returns to mining from {state}")


class _Chain(NamedTuple):
    states: list[ForkState]
    nxt: np.ndarray  # (n, 2) next mining-state index per event
    acc: np.ndarray  # (n, 2, N_ACC)


def compile_chain(policy: PolicyTable) -> _Chain:
    """Tabulate the mining-state chain; PolicyError names any missing state."""
    params = policy.params
    start = _settle_chain(ORIGIN, policy, np.zeros(N_ACC))
    index = {start: 0}
    states = [start]
    nxt, accs = [], []
    i = 0
    while i < len(states):
        st = states[i]
        i += 1
        row, arow = [], []
        for ev in (Event.MINER1_MINES, Event.MINER2_MINES):
            out = transition(st, MINE, ev, params)
            acc = np.zeros(N_ACC)
            acc[LEVELS] += out.levels_added
            acc[FORKS_STARTED] += _in_fork(out.next) and not _in_fork(st)
            # Miner 2's block settles at once if Miner 1 gives up on the spot
            landing = _settle_chain(out.next, policy, acc)
            if landing not in index:
                index[landing] = len(states)
                states.append(landing)
            row.append(index[landing])
            arow.append(acc)
        nxt.append(row)
        accs.append(arow)
    return _Chain(states, np.array(nxt, dtype=np.int64), np.array(accs))


@dataclass
class SimStats:
    """Totals and regenerative-cycle moments; add two with :meth:`merge`."""

    phases: int = 0
    blocks_settled: float = 0.0
    miner1_blocks: float = 0.0
    miner1_pf_claims: float = 0.0
    miner1_pf_value: float = 0.0
    pf_attached: float = 0.0
    forks_started: float = 0.0
    forks_won: float = 0.0
    cycles: int = 0
    # sums over completed cycles of levels Y, numerators X (blocks, claims, reward)
    cyc_y: float = 0.0
    cyc_yy: float = 0.0
    cyc_x: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    cyc_xx: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    cyc_xy: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    seeds: list = field(default_factory=list)

    def _ratio(self, num: float) -> float:
        return num / self.blocks_settled if self.blocks_settled else 0.0

    @property
    def q_M_hat(self) -> float:
        return self._ratio(self.miner1_blocks)

    @property
    def q_PF_hat(self) -> float:
        return self._ratio(self.miner1_pf_claims)

    @property
    def pf_per_level(self) -> float:
        return self._ratio(self.miner1_pf_value)

    @property
    def realized_gain_per_level(self) -> float:
        return self.q_M_hat + self.pf_per_level

    def _se(self, j: int) -> float:
        if self.cycles < 2 or self.cyc_y == 0:
            return float("nan")
        r = self.cyc_x[j] / self.cyc_y
        ss = self.cyc_xx[j] - 2 * r * self.cyc_xy[j] + r * r * self.cyc_yy
        return math.sqrt(max(ss, 0.0) * self.cycles / (self.cycles - 1)) / self.cyc_y

    @property
    def q_M_se(self) -> float:
        return self._se(0)

    @property
    def q_PF_se(self) -> float:
        return self._se(1)

    @property
    def gain_se(self) -> float:
        return self._se(2)

    def merge(self, other: SimStats) -> SimStats:
        out = SimStats()
        for name in ("phases", "blocks_settled", "miner1_blocks", "miner1_pf_claims", "miner1_pf_value",
                     "pf_attached", "forks_started", "forks_won", "cycles", "cyc_y", "cyc_yy"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        for name in ("cyc_x", "cyc_xx", "cyc_xy"):
            setattr(out, name, [u + v for u, v in zip(getattr(self, name), getattr(other, name))])
        out.seeds = self.seeds + other.seeds
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            q_M_hat=self.q_M_hat,
            q_M_se=self.q_M_se,
            q_PF_hat=self.q_PF_hat,
            q_PF_se=self.q_PF_se,
            pf_per_level=self.pf_per_level,
            realized_gain_per_level=self.realized_gain_per_level,
            gain_se=self.gain_se,
        )
        return d


def _walk(chain: _Chain, p: float, phases: int, rng: np.random.Generator, trace=None) -> SimStats:
    nxt = chain.nxt.tolist()
    flat = chain.acc.reshape(-1, N_ACC)
    # cycle numerators: blocks, claims, total reward (blocks + pay-forward)
    numer = np.stack([flat[:, M1_BLOCKS], flat[:, CLAIMS], flat[:, M1_BLOCKS] + flat[:, PF_VALUE]], axis=1)
    stats = SimStats(phases=phases)
    totals = np.zeros(N_ACC)
    i = 0
    # running sums of the cycle in progress, carried across chunks
    open_y = 0.0
    open_x = np.zeros(3)
    done = 0
    while done < phases:
        m = min(CHUNK, phases - done)
        events = (rng.random(m) >= p).astype(np.int64).tolist()  # 0: Miner 1, 1: Miner 2
        tids = np.empty(m, dtype=np.int64)
        home = np.zeros(m, dtype=bool)
        for t, e in enumerate(events):
            tids[t] = 2 * i + e
            i = nxt[i][e]
            home[t] = i == 0
        if trace is not None:
            _trace_rows(trace, chain, tids, done)
        totals += flat[tids].sum(axis=0)

        ys = np.concatenate([[open_y], flat[tids, LEVELS]])
        xs = np.concatenate([open_x[None, :], numer[tids]])
        cy = np.cumsum(ys)
        cx = np.cumsum(xs, axis=0)
        ends = np.flatnonzero(home) + 1  # index in the cumulative arrays
        if len(ends):
            bounds = np.concatenate([[0], ends])
            y = np.diff(np.concatenate([[0.0], cy[bounds[1:]]]))
            x = np.diff(np.vstack([np.zeros((1, 3)), cx[bounds[1:]]]), axis=0)
            stats.cycles += len(ends)
            stats.cyc_y += float(y.sum())
            stats.cyc_yy += float((y * y).sum())
            stats.cyc_x = [a + float(v) for a, v in zip(stats.cyc_x, x.sum(axis=0))]
            stats.cyc_xx = [a + float(v) for a, v in zip(stats.cyc_xx, (x * x).sum(axis=0))]
            stats.cyc_xy = [a + float(v) for a, v in zip(stats.cyc_xy, (x * y[:, None]).sum(axis=0))]
            open_y = float(cy[-1] - cy[ends[-1]])
            open_x = cx[-1] - cx[ends[-1]]
        else:
            open_y = float(cy[-1])
            open_x = cx[-1].copy()
        done += m

    stats.blocks_settled = float(totals[LEVELS])
    stats.miner1_blocks = float(totals[M1_BLOCKS])
    stats.miner1_pf_claims = float(totals[CLAIMS])
    stats.miner1_pf_value = float(totals[PF_VALUE])
    stats.pf_attached = float(totals[ATTACHED])
    stats.forks_started = float(totals[FORKS_STARTED])
    stats.forks_won = float(totals[FORKS_WON])
    return stats


TRACE_FIELDS = ("phase", "state", "event", "next_state", "levels", "miner1_blocks", "pf_value")


def _trace_rows(writer, chain: _Chain, tids: np.ndarray, offset: int) -> None:
    flat = chain.acc.reshape(-1, N_ACC)
    nxt = chain.nxt.reshape(-1)
    for t, tid in enumerate(tids.tolist()):
        st = chain.states[tid // 2]
        row = flat[tid]
        writer.writerow([offset + t, str(st), "miner1" if tid % 2 == 0 else "miner2",
                         str(chain.states[nxt[tid]]), int(row[LEVELS]), int(row[M1_BLOCKS]),
                         f"{row[PF_VALUE]:.6f}"])


def simulate(config: SimConfig, trace_path=None, seed=None) -> SimStats:
    """Run ``config.phases`` phases.  ``seed`` overrides the config seed (used for
    spawned replicate streams); the trace, if requested, is one CSV row per phase."""
    chain = compile_chain(config.resolved_policy())
    s = config.seed if seed is None else seed
    rng = make_rng(s)
    if trace_path is None:
        stats = _walk(chain, config.params.p, config.phases, rng)
    else:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_FIELDS)
            stats = _walk(chain, config.params.p, config.phases, rng, writer)
    stats.seeds = [repr(s) if isinstance(s, np.random.SeedSequence) else int(s)]
    return stats


def _replicate(args) -> SimStats:
    config, child = args
    return simulate(config, seed=child)


def simulate_replicates(config: SimConfig, replicates: int, workers: int = 1) -> SimStats:
    """Independent streams spawned from the config seed, merged in spawn order."""
    children = np.random.SeedSequence(config.seed).spawn(replicates)
    jobs = [(config, c) for c in children]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_replicate, jobs))
    else:
        parts = [_replicate(j) for j in jobs]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    return total


# --- small-miner experiment --------------------------------------------------

# Miner 1's response to a non-paying block: keep mining behind it in these
# (a, b) states, capitulate to the tip everywhere else
FORK_MINING_STATES = frozenset({(0, 1), (1, 1), (1, 2), (2, 2)})


def keep_probability(p: float) -> float:
    return 1 - p**2 - (1 - p) * p**3


@dataclass
class SmallMinerReport:
    p: float
    w: float
    n: int
    phases: int
    seed: int
    trials: int
    kept: int
    keep_rate: float
    keep_se: float
    keep_expected: float
    deviation_payoff: float
    deviation_payoff_se: float
    compliant_payoff: float
    utilities: list
    blocks: list
    pf_values: list

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_small_miners(
    n: int = 50,
    hash_powers=None,
    w: float = 0.0,
    deviant_index: int | None = 1,
    deviation: str = "skip-once",
    phases: int = 200_000,
    seed: int = 0,
    p: float | None = None,
) -> SmallMinerReport:
    """Miner 1 (index 0) against ``n`` small miners playing StrictFrontier(w).

    The deviant, when armed, mines one block that pays nothing forward.  Miner 1
    answers by forking behind it; once that race ends the deviant re-arms.
    Without a deviant, or with ``w = 0``, nobody forks and every block pays ``w``.
    """
    if deviation not in ("skip-once", "SkipPayForwardOnce"):
        raise ValueError(f"unknown deviation {deviation!r}")
    if hash_powers is None:
        if p is None:
            raise ValueError("give either hash_powers or p")
        hash_powers = [p] + [(1 - p) / n] * n
    powers = np.asarray(hash_powers, dtype=float)
    if len(powers) != n + 1:
        raise ValueError(f"need n + 1 = {n + 1} hash powers (Miner 1 first), got {len(powers)}")
    if np.any(powers < 0) or abs(powers.sum() - 1) > 1e-9:
        raise ValueError("hash powers must be nonnegative and sum to 1")
    if not 0 < powers[0] < 0.5:
        raise ValueError(f"Miner 1's power must lie in (0, 0.5), got {powers[0]}")
    if deviant_index is not None and not 1 <= deviant_index <= n:
        raise ValueError(f"deviant_index must be a small miner in 1..{n}")
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    p1 = float(powers[0])

    rng = make_rng(seed)
    cum = np.cumsum(powers)
    cum[-1] = 1.0
    miner = [-1]  # genesis
    pf = [w]
    armed = deviant_index is not None
    race = None  # (base index, a, b) while Miner 1 forks behind a non-paying block
    trials = kept = 0
    done = 0
    while done < phases:
        m = min(CHUNK, phases - done)
        who = np.searchsorted(cum, rng.random(m), side="right").tolist()
        for x in who:
            if race is None:
                pays = 0.0 if armed and x == deviant_index else w
                miner.append(x)
                pf.append(pays)
                if pays < w:
                    armed = False
                    race = (len(miner) - 2, 0, 1)
                continue
            base, a, b = race
            if x == 0:
                a += 1
            else:
                b += 1
                # honest miners extend the public tip of the paying chain
                miner.append(x)
                pf.append(w)
            if a == b + 1:
                del miner[base + 1:]
                del pf[base + 1:]
                miner.extend([0] * a)
                pf.extend([w] * a)
                trials += 1
                race = None
                armed = True
            elif (a, b) not in FORK_MINING_STATES:
                trials += 1
                kept += 1
                race = None
                armed = True
            else:
                race = (base, a, b)
        done += m

    utilities = [0.0] * (n + 1)
    blocks = [0] * (n + 1)
    for j in range(1, len(miner)):
        utilities[miner[j]] += 1 + pf[j - 1] - pf[j]
        blocks[miner[j]] += 1
    rate = kept / trials if trials else float("nan")
    se = math.sqrt(rate * (1 - rate) / trials) if trials else float("nan")
    return SmallMinerReport(
        p=p1, w=w, n=n, phases=phases, seed=seed, trials=trials, kept=kept,
        keep_rate=rate, keep_se=se, keep_expected=keep_probability(p1),
        deviation_payoff=(1 + w) * rate, deviation_payoff_se=(1 + w) * se, compliant_payoff=1 - w,
        utilities=utilities, blocks=blocks, pf_values=sorted(set(pf[1:])),
    )
