"""Detection, localization and recovery.

Detection uses three checks:

* duplicate-block recomputation: stage ``i`` re-runs its copy of stage
  ``i-1``'s layers on the claimed input and compares with the claimed output;
* jumping connection: stage ``i`` compares the claimed input of stage ``i-1``
  with the output that stage ``i-2`` sent it directly;
* backward mirror: the holder of ``M_c'`` (stage ``c+1``) recomputes the
  gradient stage ``c`` should send back and ships it two stages downstream
  (or to the central server), where it is compared with ``c``'s claim.

Recovery escalates monotonically: restart the iteration, then switch to
central-server routing, then bypass the suspected adjacent pair for the rest of
the run while freezing the two modules whose duplicates can no longer be kept
in sync.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .stage import ConfigError, ForwardCache, StageModule
from .tensor import ShapeError

__all__ = [
    "Verdict",
    "CheckKind",
    "AlertEvent",
    "RecoveryPolicy",
    "RecoveryAction",
    "compare",
    "verify_forward",
    "verify_jump",
    "verify_backward",
    "expected_gradient",
    "localize",
    "skip_pair",
    "recover",
    "sync_duplicates",
    "duplicates_consistent",
]

MATCH = "match"
MISMATCH = "mismatch"
NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class Verdict:
    result: str
    max_abs_diff: float
    location: str = ""
    structural: bool = False

    @property
    def ok(self) -> bool:
        return self.result != MISMATCH


class CheckKind(str, Enum):
    DUP_BLOCK = "dup_block"
    JUMP = "jump"
    BACKWARD_MIRROR = "backward_mirror"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class AlertEvent:
    stage: int
    iteration: int
    attempt: int
    micro: int
    direction: str
    check: CheckKind
    suspects: tuple[int, ...]
    max_abs_diff: float
    routing: str
    # "server" when the central server recomputed the expected value itself.
    adjudicator: str = "stage"

    def to_dict(self) -> dict:
        diff = self.max_abs_diff
        return {
            "iteration": self.iteration,
            "attempt": self.attempt,
            "micro": self.micro,
            "stage": self.stage,
            "direction": self.direction,
            "kind": self.check.value,
            "routing": self.routing,
            "adjudicator": self.adjudicator,
            "suspects": list(self.suspects),
            "max_abs_diff": diff if math.isfinite(diff) else None,
        }


@dataclass(frozen=True)
class RecoveryPolicy:
    """Restart cap and escalation switch.

    ``retry_cap`` bounds both the number of distinct alerted iterations before
    escalating to central routing and the restarts of a single iteration while
    still in direct routing. ``max_attempts`` guards every later phase against
    livelock.
    """

    retry_cap: int = 3
    escalate: bool = True
    max_attempts: int = 64

    def __post_init__(self):
        if self.retry_cap < 1 or self.max_attempts < 1:
            raise ConfigError("retry_cap and max_attempts must be >= 1")


@dataclass
class RecoveryAction:
    kind: str  # restart | escalate | skip | abort
    iteration: int
    skip: tuple[int, int] | None = None
    frozen: list[str] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "iteration": self.iteration,
            "skip": list(self.skip) if self.skip else None,
            "frozen": self.frozen,
            "reason": self.reason,
        }


def compare(expected: np.ndarray, claimed: np.ndarray, tau: float = 0.0, location: str = "") -> Verdict:
    """Elementwise comparison; ``Match`` iff max |expected - claimed| <= tau."""
    if expected.shape != claimed.shape:
        return Verdict(MISMATCH, math.inf, location, structural=True)
    diff = float(np.max(np.abs(expected - claimed))) if expected.size else 0.0
    if math.isnan(diff):
        diff = math.inf
    return Verdict(MATCH if diff <= tau else MISMATCH, diff, location)


def verify_forward(
    dup: StageModule, a_dup: np.ndarray, a_out_claimed: np.ndarray, tau: float = 0.0, location: str = ""
) -> Verdict:
    """Recompute the predecessor's output with its duplicate and compare."""
    verdict, _ = _verify_forward_cached(dup, a_dup, a_out_claimed, tau, location)
    return verdict


def _verify_forward_cached(dup, a_dup, a_out_claimed, tau, location):
    try:
        recomputed, cache = dup.forward(a_dup)
    except ShapeError:
        return Verdict(MISMATCH, math.inf, location, structural=True), None
    return compare(recomputed, a_out_claimed, tau, location), cache


def verify_jump(
    a_dup_claimed: np.ndarray, a_jump_received: np.ndarray | None, tau: float = 0.0, location: str = ""
) -> Verdict:
    """Compare a claimed input with the copy sent over the jumping connection.

    ``a_jump_received=None`` means there is no grand-predecessor (stage 2), so
    the check does not apply.
    """
    if a_jump_received is None:
        return Verdict(NOT_APPLICABLE, 0.0, location)
    return compare(a_jump_received, a_dup_claimed, tau, location)


def expected_gradient(dup: StageModule, cache: ForwardCache, g_consumed: np.ndarray) -> np.ndarray:
    return dup.backward(cache, g_consumed)[0]


def verify_backward(
    dup: StageModule,
    cached_input: np.ndarray,
    g_consumed: np.ndarray,
    g_claimed: np.ndarray,
    tau: float = 0.0,
    location: str = "",
) -> tuple[np.ndarray, Verdict]:
    """Recompute the gradient stage ``c`` should emit and check ``c``'s claim.

    ``dup`` is ``M_c'``, ``cached_input`` is ``c``'s input and ``g_consumed``
    the gradient ``c`` received from its successor.
    """
    _, cache = dup.forward(cached_input)
    expected = expected_gradient(dup, cache, g_consumed)
    return expected, compare(expected, g_claimed, tau, location)


def _interior(stages, K: int) -> tuple[int, ...]:
    return tuple(sorted({s for s in stages if 2 <= s <= K - 1}))


def localize(alert: AlertEvent, K: int, active: list[int] | None = None) -> tuple[int, ...]:
    """Stages that could explain ``alert``; immune stages 1 and K removed.

    direct routing: forward alert at ``i`` -> {i-2, i-1, i};
    backward alert at ``j`` -> {j, j+1, j+2}.
    central routing: forward alert at ``i`` -> {prev(i), i};
    backward alert adjudicated for receiver ``j`` -> {next(j), next(j)+1}.
    Checks the server computes on its own (the bridged edge of a skip pair)
    implicate only the claiming stage.
    """
    active = active or list(range(1, K + 1))
    i = alert.stage
    if alert.routing == "central":
        pos = active.index(i)
        claimer = active[pos - 1] if alert.direction == "forward" else active[pos + 1]
        if alert.adjudicator == "server" and alert.check is not CheckKind.TIMEOUT:
            return _interior({claimer}, K)
        if alert.direction == "forward":
            return _interior({claimer, i}, K)
        return _interior({claimer, claimer + 1}, K)
    if alert.direction == "forward":
        return _interior({i - 2, i - 1, i}, K)
    return _interior({i, i + 1, i + 2}, K)


def skip_pair(suspects, K: int) -> tuple[int, int]:
    """Adjacent interior pair covering the suspects."""
    s = sorted(suspects)
    if len(s) == 2 and s[1] == s[0] + 1:
        return s[0], s[1]
    if len(s) == 1:
        t = s[0]
        return (t - 1, t) if t - 1 >= 2 else (t, t + 1)
    raise ValueError(f"cannot build an adjacent skip pair from suspects {s} (K={K})")


def recover(state, alert: AlertEvent, policy: RecoveryPolicy) -> RecoveryAction:
    """Apply the escalation policy to a localized alert; mutates ``state``."""
    n = alert.iteration
    state.retries += 1
    if not state.robust:
        # No verification in baseline mode; only liveness timeouts get here.
        if state.retries > policy.retry_cap:
            return RecoveryAction("abort", n, reason=f"retry cap {policy.retry_cap} exceeded")
        return RecoveryAction("restart", n)

    if state.routing == "direct":
        state.alerted_iterations.add(n)
        if policy.escalate and len(state.alerted_iterations) >= policy.retry_cap:
            state.pending_central = True
        if state.retries > policy.retry_cap:
            if not policy.escalate:
                return RecoveryAction("abort", n, reason=f"retry cap {policy.retry_cap} exceeded")
            state.switch_to_central()
            return RecoveryAction("escalate", n, reason="per-iteration retry cap exceeded")
        return RecoveryAction("restart", n)

    if state.skip is None:
        pair = skip_pair(alert.suspects, state.K)
        frozen = state.install_skip(pair)
        return RecoveryAction("skip", n, skip=pair, frozen=frozen)

    if state.retries > policy.max_attempts:
        return RecoveryAction("abort", n, reason=f"{policy.max_attempts} attempts without a clean pass")
    return RecoveryAction("restart", n)


def sync_duplicates(state) -> int:
    """Push every updated owner's parameters to its duplicate's holder.

    Returns the number of sync messages sent.
    """
    sent = 0
    for owner in range(1, state.K):
        holder = owner + 1
        if owner in state.skipped or holder in state.skipped:
            continue
        if owner in state.frozen_originals or owner in state.frozen_duplicates:
            continue
        state.send_param_sync(owner, holder)
        sent += 1
    return sent


def duplicates_consistent(state) -> bool:
    """Every (M_i, M_i') pair is bitwise equal."""
    return all(state.stages[h - 1].equal_params(dup) for h, dup in state.duplicates.items())
