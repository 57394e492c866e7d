"""The attacker: per-iteration attack decisions and tamper functions.

An attack plan names one interior stage ``t`` (never the first or last stage)
and a direction. While a plan is active, every transmission of that stage's
output in the attacked direction, for every micro-batch of the iteration, is
replaced by the tampered value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .stage import ConfigError, StageModule
from .tensor import RandomStream, ShapeError

__all__ = [
    "AttackKind",
    "AttackConfig",
    "AttackPlan",
    "Adversary",
    "plan_iteration",
    "exact_count_schedule",
    "tamper_forward",
    "tamper_backward",
    "tamper_stealthy",
]


class AttackKind(str, Enum):
    NONE = "none"
    FORWARD_FLIP = "forward_flip"
    BACKWARD_GAUSS = "backward_gauss"
    STEALTHY_FORWARD = "stealthy_forward"
    CRASH = "crash"

    @property
    def direction(self) -> str:
        return "backward" if self is AttackKind.BACKWARD_GAUSS else "forward"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.NONE
    rate: float = 0.0
    scheduling: str = "bernoulli"
    seed: int = 0
    # None: redraw the target uniformly each attempt; int: persistent target.
    target: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not 0.0 <= self.rate <= 1.0 or math.isnan(self.rate):
            raise ConfigError(f"attack rate must be in [0, 1], got {self.rate}")
        if self.scheduling not in ("bernoulli", "exact_count"):
            raise ConfigError(f"unknown attack scheduling {self.scheduling!r}")

    @property
    def active(self) -> bool:
        return self.kind is not AttackKind.NONE and self.rate > 0.0


@dataclass(frozen=True)
class AttackPlan:
    iteration: int
    target: int
    direction: str
    kind: AttackKind


def _draw_target(cfg: AttackConfig, K: int, stream: RandomStream) -> int:
    if cfg.target is not None:
        if not 2 <= cfg.target <= K - 1:
            raise ConfigError(f"attack target must be an interior stage in [2, {K - 1}]")
        return cfg.target
    return 2 + stream.randbelow(K - 2)


def exact_count_schedule(rate: float, iterations: int, stream: RandomStream) -> frozenset[int]:
    """Exactly ``floor(rate * iterations)`` iteration indices, seeded shuffle."""
    count = math.floor(rate * iterations)
    return frozenset(stream.shuffle(iterations)[:count])


def plan_iteration(
    cfg: AttackConfig,
    iteration: int,
    K: int,
    stream: RandomStream,
    attacked: frozenset[int] | None = None,
) -> AttackPlan | None:
    """Decide whether (and where) to attack this iteration.

    ``attacked`` is the precomputed index set for ``exact_count`` scheduling.
    """
    if K < 4:
        raise ConfigError("attack planning needs K >= 4")
    if not cfg.active:
        return None
    if cfg.scheduling == "exact_count":
        if attacked is None:
            raise ValueError("exact_count scheduling needs the precomputed attacked set")
        hit = iteration in attacked
    else:
        hit = stream.bernoulli(cfg.rate)
    if not hit:
        return None
    target = _draw_target(cfg, K, stream)
    return AttackPlan(iteration, target, cfg.kind.direction, cfg.kind)


class Adversary:
    """Stateful attacker for one run.

    Decisions come from the ``adversary`` stream; tamper noise and stealthy
    fake inputs from a separate ``adversary/noise`` stream, so the amount of
    noise drawn never shifts later decisions.
    """

    def __init__(self, cfg: AttackConfig, K: int, iterations: int):
        self.cfg = cfg
        self.K = K
        self.decisions = RandomStream(cfg.seed, "adversary")
        self.noise = RandomStream(cfg.seed, "adversary/noise")
        self.attacked = None
        if cfg.scheduling == "exact_count":
            self.attacked = exact_count_schedule(cfg.rate, iterations, RandomStream(cfg.seed, "adversary/schedule"))

    def plan(self, iteration: int, attempt: int) -> AttackPlan | None:
        # exact_count fixes which iterations are hit; replays of them are clean.
        if self.cfg.scheduling == "exact_count" and attempt > 0:
            return None
        return plan_iteration(self.cfg, iteration, self.K, self.decisions, self.attacked)

    def gaussian(self, rows: int, cols: int) -> np.ndarray:
        return self.noise.gaussian(rows, cols)


def tamper_forward(a_out: np.ndarray) -> np.ndarray:
    """Sign flip of the transmitted activation."""
    return -a_out


def tamper_backward(shape: tuple[int, int], stream: RandomStream) -> np.ndarray:
    """Standard-normal replacement for a transmitted gradient.

    Depends only on ``shape`` and the stream, never on the true gradient.
    """
    return stream.gaussian(*shape)


def tamper_stealthy(m: StageModule, fake_input: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A consistent (input, output) pair computed from a fabricated input.

    The pair passes recomputation with a duplicate of ``m``; only comparing the
    claimed input against an independent copy of the real one exposes it.
    """
    if fake_input.ndim != 2 or fake_input.shape[1] != m.in_width:
        raise ShapeError(f"fake input shape {fake_input.shape} does not fit stage width {m.in_width}")
    return fake_input, m(fake_input)
