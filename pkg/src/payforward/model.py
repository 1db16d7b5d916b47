"""States, actions and transition rules of the two-miner fork game.

Miner 1 is the (possibly deviant) large miner with hash power ``p``; Miner 2
stands for every other miner, all of whom play Frontier(w): mine at the tip of
the longest branch and pay forward ``w`` on each block.

A state ``(a, b, c)`` records the length ``a`` of Miner 1's branch, the length
``b`` of Miner 2's branch (both counted from the fork point) and a tag ``c``
for the pay-forward carried by the block the fork starts from.  Block rewards
are normalised to 1.

Tags
----
Uniform scheme: ``0`` (no pay-forward) or ``1`` (pay-forward ``w``).
Shared scheme: ``0``, ``1`` (``w``) or ``2`` (``2w``); here ``w`` is the
per-miner amount, paid by the first honest block after a Miner 1 block, with
every later honest block paying twice that.  In both schemes the claimable
amount is simply ``c * w``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple


class Variant(str, enum.Enum):
    IMMEDIATE = "immediate"
    STRATEGIC = "strategic"


class Scheme(str, enum.Enum):
    UNIFORM = "uniform"
    SHARED = "shared"


class Event(str, enum.Enum):
    MINER1_MINES = "miner1"
    MINER2_MINES = "miner2"
    SETTLE = "settle"


NO_PF = 0
HALF = 1
FULL = 2


class StateError(ValueError):
    """A state outside the truncated state space of the given parameters."""


class IllegalMove(ValueError):
    """An action/event pairing the rules do not allow."""


@dataclass(frozen=True)
class MiningParams:
    """Game configuration.

    ``w`` is the pay-forward unit: the flat amount under the uniform scheme,
    the first-block amount ``w'`` under the shared scheme.
    """

    p: float
    w: float = 0.0
    d: int = 8
    variant: Variant = Variant.IMMEDIATE
    scheme: Scheme = Scheme.UNIFORM

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"hash power p must lie in (0, 1), got {self.p}")
        if self.w < 0:
            raise ValueError(f"pay-forward w must be >= 0, got {self.w}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"truncation depth d must be an integer >= 1, got {self.d}")
        object.__setattr__(self, "d", int(self.d))

    @property
    def strategic(self) -> bool:
        return self.variant is Variant.STRATEGIC

    @property
    def a_max(self) -> int:
        """Cap on Miner 1's branch in the strategic variant."""
        return 2 * self.d

    @property
    def tags(self) -> tuple[int, ...]:
        return (0, 1) if self.scheme is Scheme.UNIFORM else (NO_PF, HALF, FULL)

    def with_w(self, w: float) -> MiningParams:
        return replace(self, w=w)


class ForkState(NamedTuple):
    a: int
    b: int
    c: int = 0

    def __str__(self):
        return f"({self.a},{self.b},{self.c})"


ORIGIN = ForkState(0, 0, 0)


@dataclass(frozen=True, order=True)
class Action:
    kind: str
    target: int = -1

    @classmethod
    def capitulate(cls, s: int) -> Action:
        return cls("capitulate", s)

    def __str__(self):
        if self.kind == "capitulate":
            return f"capitulate({self.target})"
        return self.kind


MINE = Action("mine")
RELEASE = Action("release")


class TransitionOutcome(NamedTuple):
    next: ForkState
    reward: float  # Miner 1's coinbase plus claimed pay-forward
    levels_added: int
    miner1_blocks: int = 0
    payforward: float = 0.0
    settled: int = 0  # blocks that became permanent in this step


def is_winning(state: ForkState, params: MiningParams) -> bool:
    """Immediate release only: Miner 2 capitulates as soon as Miner 1 leads."""
    return not params.strategic and state.a == state.b + 1


def check_state(state: ForkState, params: MiningParams) -> None:
    a, b, c = state
    if a < 0 or b < 0:
        raise StateError(f"negative branch length in {state}")
    if b > params.d:
        raise StateError(f"b={b} exceeds truncation depth d={params.d}")
    if params.strategic:
        if a > params.a_max:
            raise StateError(f"a={a} exceeds cap {params.a_max}")
    elif a > b + 1 or (b == params.d and a > b):
        raise StateError(f"a={a} not reachable with b={b} under immediate release")
    if c not in params.tags:
        raise StateError(f"tag c={c} invalid for {params.scheme.value} scheme")


def all_states(params: MiningParams) -> list[ForkState]:
    """Every state of the truncated game, ordered by b, then a, then c."""
    out = []
    for b in range(params.d + 1):
        top = params.a_max if params.strategic else min(b + 1, params.d)
        for a in range(top + 1):
            for c in params.tags:
                out.append(ForkState(a, b, c))
    return out


def capitulation_tag(state: ForkState, s: int, params: MiningParams) -> int:
    """Tag of the honest block Miner 1 restarts from when capitulating to ``s``.

    That block sits at position ``b - s`` of Miner 2's branch.
    """
    if params.scheme is Scheme.UNIFORM:
        return 1
    if state.c == NO_PF and state.b - s == 1:
        return HALF
    return FULL


def payforward_amount(c: int, params: MiningParams) -> float:
    if c not in params.tags:
        raise StateError(f"tag c={c} invalid for {params.scheme.value} scheme")
    return c * params.w


def legal_actions(state: ForkState, params: MiningParams) -> frozenset[Action]:
    """Miner 1's choices at ``state``.

    Immediate-release winning states (a = b + 1) return the empty set: the
    settlement is forced, see :func:`transition` with ``Event.SETTLE``.
    """
    check_state(state, params)
    a, b, _ = state
    if is_winning(state, params):
        return frozenset()
    acts = {Action.capitulate(s) for s in range(b)}
    if b < params.d and (not params.strategic or a < params.a_max):
        acts.add(MINE)
    if params.strategic and a >= b + 1:
        acts.add(RELEASE)
    return frozenset(acts)


def transition(
    state: ForkState, action: Action | None, event: Event, params: MiningParams
) -> TransitionOutcome:
    check_state(state, params)
    a, b, c = state
    event = Event(event)

    if action is None:
        if event is not Event.SETTLE or not is_winning(state, params):
            raise IllegalMove(f"no action given at {state}: only a winning state settles on its own")
        pf = payforward_amount(c, params)
        return TransitionOutcome(ORIGIN, a + pf, 1, a, pf, a)

    if action not in legal_actions(state, params):
        raise IllegalMove(f"{action} is not legal at {state}")

    if action == MINE:
        if event is Event.MINER1_MINES:
            return TransitionOutcome(ForkState(a + 1, b, c), 0.0, 0)
        if event is Event.MINER2_MINES:
            return TransitionOutcome(ForkState(a, b + 1, c), 0.0, 1)
        raise IllegalMove("mine must be resolved by a mining event, not settle")

    if event is not Event.SETTLE:
        raise IllegalMove(f"{action} resolves with a settle event, got {event.value}")

    if action == RELEASE:
        pf = payforward_amount(c, params)
        return TransitionOutcome(ForkState(a - b - 1, 0, NO_PF), b + 1 + pf, 1, b + 1, pf, b + 1)

    s = action.target
    return TransitionOutcome(ForkState(0, s, capitulation_tag(state, s, params)), 0.0, 0, settled=b - s)


def frontier_action(state: ForkState, params: MiningParams) -> Action | None:
    """Frontier: mine at the tip, publish at once, never fork."""
    a, b, _ = state
    if is_winning(state, params):
        return None
    if params.strategic and a >= b + 1:
        return RELEASE
    if b == 0:
        return MINE
    return Action.capitulate(0)


def honest_gain(params: MiningParams) -> float:
    """Gain per level of Miner 1 when he plays Frontier."""
    p, w = params.p, params.w
    if params.scheme is Scheme.UNIFORM:
        return p + p * (1 - p) * w
    # the honest block he follows paid w if it came right after one of his blocks
    return p + p * (1 - p) * (p * w + (1 - p) * 2 * w)
