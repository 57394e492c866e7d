"""K-stage pipeline: messages, routing, GPipe schedule and the training loop.

Execution is single-threaded and driven by a round scheduler. Forward work
follows the GPipe wavefront: at tick ``t`` the stage at position ``p`` of the
active-stage list handles micro-batch ``t - p``. Backward work runs the same
wavefront over the reversed list once every forward has finished, and
parameters are updated once per iteration. Stages that share a tick never
depend on each other, so their order inside the tick is drawn from the
``schedule`` stream; results do not depend on it.

A message that has not arrived when its receiver's tick comes up is treated
as a timeout.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from . import defense
from .adversary import Adversary, AttackConfig, AttackKind, AttackPlan, tamper_forward, tamper_stealthy
from .defense import AlertEvent, CheckKind, RecoveryAction, RecoveryPolicy
from .stage import ConfigError, LayerSpec, StageModule, init_stage
from .tensor import RandomStream, cross_entropy_rows, softmax_cross_entropy

__all__ = [
    "SERVER",
    "Mode",
    "MessageKind",
    "Seeds",
    "PipelineConfig",
    "PipelineMessage",
    "Delivery",
    "MessageBus",
    "PipelineState",
    "IterationResult",
    "RunMetrics",
    "AbortedRun",
    "uniform_stage_specs",
    "build_pipeline",
    "route",
    "run_iteration",
    "run_training",
    "evaluate",
]

SERVER = 0


class Mode(str, Enum):
    BASELINE = "baseline"
    ROBUST_DIRECT = "robust_direct"
    ROBUST_CENTRAL = "robust_central"


class MessageKind(str, Enum):
    FWD_ACT = "FwdAct"
    FWD_JUMP = "FwdJump"
    BWD_GRAD = "BwdGrad"
    BWD_JUMP = "BwdJump"
    PARAM_SYNC = "ParamSync"
    ALERT = "Alert"
    CONTROL = "Control"


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 1
    adversary: int = 2
    schedule: int = 3

    @classmethod
    def from_seed(cls, seed: int) -> "Seeds":
        return cls(init=seed, data=seed + 1, adversary=seed + 2, schedule=seed + 3)


def uniform_stage_specs(
    K: int, input_dim: int, width: int, classes: int, activation: str = "tanh", hidden_per_stage: int = 1
) -> list[list[LayerSpec]]:
    """Stage layer lists with a uniform boundary width.

    Stage 1 maps ``input_dim -> width``, interior stages ``width -> width`` and
    stage K ``width -> classes``. Every stage but the last ends in a
    nonlinearity.
    """
    specs = []
    for s in range(1, K + 1):
        layers = []
        if s == K:
            for _ in range(hidden_per_stage - 1):
                layers += [LayerSpec.affine(width, width), LayerSpec.act(activation)]
            layers.append(LayerSpec.affine(width, classes))
        else:
            first_in = input_dim if s == 1 else width
            layers += [LayerSpec.affine(first_in, width), LayerSpec.act(activation)]
            for _ in range(hidden_per_stage - 1):
                layers += [LayerSpec.affine(width, width), LayerSpec.act(activation)]
        specs.append(layers)
    return specs


@dataclass
class PipelineConfig:
    stage_specs: list[list[LayerSpec]]
    batch_size: int = 4
    micro_batch: int = 1
    lr: float = 0.05
    iterations: int = 0
    mode: Mode = Mode.BASELINE
    seeds: Seeds = field(default_factory=Seeds)
    tolerance: float = 0.0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.validate()

    @property
    def K(self) -> int:
        return len(self.stage_specs)

    @property
    def micro_count(self) -> int:
        return self.batch_size // self.micro_batch

    @property
    def width(self) -> int:
        return _affine_dims(self.stage_specs[0])[1]

    @property
    def input_dim(self) -> int:
        return _affine_dims(self.stage_specs[0])[0]

    @property
    def num_classes(self) -> int:
        return _affine_dims(self.stage_specs[-1])[1]

    def validate(self) -> None:
        if self.K < 4:
            raise ConfigError(f"K must be >= 4 so jumping connections exist, got {self.K}")
        if self.batch_size < 1 or self.micro_batch < 1 or self.batch_size % self.micro_batch:
            raise ConfigError(f"micro_batch {self.micro_batch} must divide batch_size {self.batch_size}")
        if self.iterations < 0 or self.lr < 0 or self.tolerance < 0:
            raise ConfigError("iterations, lr and tolerance must be non-negative")
        d = self.width
        for s, layers in enumerate(self.stage_specs, start=1):
            i, o = _affine_dims(layers)
            if s > 1 and i != d:
                raise ConfigError(f"stage {s} input width {i} != boundary width {d}")
            if s < self.K and o != d:
                raise ConfigError(f"stage {s} output width {o} != boundary width {d}")


def _affine_dims(layers) -> tuple[int, int]:
    aff = [l for l in layers if l.kind == "affine"]
    if not aff:
        raise ConfigError("every stage needs an affine layer")
    return aff[0].in_dim, aff[-1].out_dim


def _checksum(arr) -> str:
    if arr is None:
        return None
    if isinstance(arr, bytes):
        return hashlib.sha256(arr).hexdigest()[:16]
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class PipelineMessage:
    kind: MessageKind
    iteration: int
    micro: int
    sender: int
    receiver: int
    payload: tuple = ()
    attempt: int = 0
    # For relayed or jump messages: the stage whose value the payload describes.
    origin: int | None = None

    def envelope(self) -> dict:
        return {
            "kind": self.kind.value,
            "iteration": self.iteration,
            "attempt": self.attempt,
            "micro": self.micro,
            "sender": self.sender,
            "receiver": self.receiver,
            "origin": self.origin,
            "payload": [_checksum(p) for p in self.payload],
        }


@dataclass
class Delivery:
    delivered: list[PipelineMessage] = field(default_factory=list)
    dropped: bool = False
    alert: AlertEvent | None = None


class MessageBus:
    """Per-receiver inboxes; FIFO per (sender, receiver) pair."""

    def __init__(self, trace: bool = False):
        self.inboxes: dict[int, list[PipelineMessage]] = {}
        self.counts: Counter = Counter()
        self.trace: list[dict] | None = [] if trace else None

    def post(self, msg: PipelineMessage) -> None:
        self.counts[msg.kind.value] += 1
        if self.trace is not None:
            self.trace.append(msg.envelope())
        if msg.receiver is not None:
            self.inboxes.setdefault(msg.receiver, []).append(msg)

    def take(self, receiver: int, kind: MessageKind, micro: int, sender: int | None = None) -> PipelineMessage | None:
        box = self.inboxes.get(receiver, [])
        for k, msg in enumerate(box):
            if msg.kind is kind and msg.micro == micro and (sender is None or msg.sender == sender):
                return box.pop(k)
        return None

    def clear(self) -> None:
        self.inboxes.clear()

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def dump_trace(self, path) -> None:
        with open(path, "w") as fh:
            for env in self.trace or []:
                fh.write(json.dumps(env, sort_keys=True) + "\n")


class PipelineState:
    """Stages, duplicates, routing and recovery bookkeeping for one run."""

    def __init__(self, cfg: PipelineConfig, stages: dict, duplicates: dict, trace: bool = False):
        self.cfg = cfg
        self.stages: dict[int, StageModule] = stages
        # duplicates[i] is M_{i-1}', held by stage i.
        self.duplicates: dict[int, StageModule] = duplicates
        self.robust = cfg.mode is not Mode.BASELINE
        self.routing = "central" if cfg.mode is Mode.ROBUST_CENTRAL else "direct"
        self.skip: tuple[int, int] | None = None
        self.frozen_originals: set[int] = set()
        self.frozen_duplicates: set[int] = set()
        self.iteration = 0
        self.attempt = 0
        self.retries = 0
        self.alerted_iterations: set[int] = set()
        self.pending_central = False
        self.bus = MessageBus(trace=trace)
        self.recomputations = 0
        self.schedule = RandomStream(cfg.seeds.schedule, "schedule")
        # Central server records for the current attempt.
        self.server_out: dict[tuple[int, int], np.ndarray] = {}
        self.server_in: dict[tuple[int, int], np.ndarray] = {}
        self.server_expected: dict[tuple[int, int], np.ndarray] = {}
        self.server_grad: dict[tuple[int, int], np.ndarray] = {}
        # Frozen copy of M_{i-1} the server uses to check the bridged edge.
        self.bridge_verifier: StageModule | None = None

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def skipped(self) -> set[int]:
        return set(self.skip) if self.skip else set()

    @property
    def mode_label(self) -> str:
        if not self.robust:
            return Mode.BASELINE.value
        return Mode.ROBUST_CENTRAL.value if self.routing == "central" else Mode.ROBUST_DIRECT.value

    def active_stages(self) -> list[int]:
        return [s for s in range(1, self.K + 1) if s not in self.skipped]

    def next_active(self, s: int) -> int | None:
        act = self.active_stages()
        pos = act.index(s)
        return act[pos + 1] if pos + 1 < len(act) else None

    def prev_active(self, s: int) -> int | None:
        act = self.active_stages()
        pos = act.index(s)
        return act[pos - 1] if pos > 0 else None

    def switch_to_central(self) -> None:
        self.routing = "central"
        self.pending_central = False

    def install_skip(self, pair: tuple[int, int]) -> list[str]:
        i, j = pair
        if j != i + 1 or i < 2 or j > self.K - 1:
            raise ValueError(f"skip pair must be adjacent interior stages, got {pair}")
        if self.skip is not None:
            raise ValueError("a skip pair is already installed")
        self.skip = (i, j)
        self.frozen_originals.add(i - 1)
        self.frozen_duplicates.add(j)
        if self.robust and i - 1 >= 2:
            self.bridge_verifier = self.stages[i - 1].copy()
        return [f"M{i - 1}@{i - 1}", f"M{j}'@{j + 1}"]

    def is_frozen(self, s: int) -> bool:
        return s in self.frozen_originals

    def begin_attempt(self, iteration: int, attempt: int) -> None:
        self.iteration = iteration
        self.attempt = attempt
        self.bus.clear()
        self.server_out.clear()
        self.server_in.clear()
        self.server_expected.clear()
        self.server_grad.clear()

    def send(self, kind: MessageKind, micro: int, sender: int, receiver: int, payload=(), origin=None) -> Delivery:
        msg = PipelineMessage(kind, self.iteration, micro, sender, receiver, tuple(payload), self.attempt, origin)
        return route(self, msg)

    def send_param_sync(self, owner: int, holder: int) -> None:
        self.send(MessageKind.PARAM_SYNC, -1, owner, holder, (self.stages[owner].snapshot(),), origin=owner)
        msg = self.bus.take(holder, MessageKind.PARAM_SYNC, -1)
        self.duplicates[holder].load(msg.payload[0])

    def alert(self, stage, micro, direction, check, diff, adjudicator="stage") -> AlertEvent:
        proto = AlertEvent(stage, self.iteration, self.attempt, micro, direction, check, (), diff, self.routing, adjudicator)
        suspects = defense.localize(proto, self.K, self.active_stages())
        return AlertEvent(
            stage, self.iteration, self.attempt, micro, direction, check, suspects, diff, self.routing, adjudicator
        )

    def is_bridge_sender(self, s: int) -> bool:
        return self.bridge_verifier is not None and self.skip is not None and s == self.skip[0] - 1


def build_pipeline(cfg: PipelineConfig, trace: bool = False) -> PipelineState:
    """Create stages 1..K from the ``init`` stream, plus bit-identical duplicates.

    Stage ``i >= 2`` holds ``M_{i-1}'``. Duplicates are only materialized in
    robust modes.
    """
    cfg.validate()
    stream = RandomStream(cfg.seeds.init, "init")
    stages, duplicates = {}, {}
    d = cfg.width
    for s, layers in enumerate(cfg.stage_specs, start=1):
        stages[s] = init_stage(layers, s, stream, in_width=None if s == 1 else d, out_width=None if s == cfg.K else d)
    if cfg.mode is not Mode.BASELINE:
        for s in range(2, cfg.K + 1):
            dup = stages[s - 1].copy()
            dup.load(stages[s - 1].snapshot())
            duplicates[s] = dup
    return PipelineState(cfg, stages, duplicates, trace=trace)


def route(state: PipelineState, msg: PipelineMessage) -> Delivery:
    """Deliver ``msg`` according to the current routing.

    Direct routing delivers point to point. Central routing sends every
    inter-stage message through the server (two hops); the server forwards
    activation pairs built from its own record of the predecessor's output and
    adjudicates backward claims against stored expected gradients. Messages to
    or from a bypassed stage are dropped with a Control notice.
    """
    skipped = state.skipped
    if msg.sender in skipped or msg.receiver in skipped:
        state.bus.post(
            PipelineMessage(MessageKind.CONTROL, msg.iteration, msg.micro, SERVER, msg.sender, (), msg.attempt, msg.sender)
        )
        return Delivery(dropped=True)
    if state.routing == "direct" or msg.kind in (MessageKind.CONTROL, MessageKind.ALERT):
        state.bus.post(msg)
        return Delivery([msg])

    # Central routing: first hop to the server.
    state.bus.post(PipelineMessage(msg.kind, msg.iteration, msg.micro, msg.sender, SERVER, (), msg.attempt, msg.origin))
    j = msg.micro
    if msg.kind is MessageKind.FWD_ACT:
        a_dup, a_out = msg.payload
        c = msg.sender
        state.server_out[(c, j)] = a_out
        if c == 1:
            state.server_in[(c, j)] = a_dup
        else:
            state.server_in[(c, j)] = state.server_out[(state.prev_active(c), j)]
        if state.is_bridge_sender(c):
            verdict = defense.verify_forward(state.bridge_verifier, state.server_in[(c, j)], a_out, state.cfg.tolerance)
            state.recomputations += 1
            if not verdict.ok:
                alert = state.alert(msg.receiver, j, "forward", CheckKind.DUP_BLOCK, verdict.max_abs_diff, "server")
                return Delivery(alert=alert)
        fwd = PipelineMessage(
            msg.kind, msg.iteration, j, SERVER, msg.receiver, (state.server_in[(c, j)], a_out), msg.attempt, c
        )
    elif msg.kind is MessageKind.BWD_JUMP:
        state.server_expected[(msg.origin, j)] = msg.payload[0]
        return Delivery()
    elif msg.kind is MessageKind.BWD_GRAD:
        c = msg.sender
        expected = state.server_expected.pop((c, j), None)
        adjudicator = "stage"
        if state.robust and expected is None and state.is_bridge_sender(c):
            _, cache = state.bridge_verifier.forward(state.server_in[(c, j)])
            expected = defense.expected_gradient(state.bridge_verifier, cache, state.server_grad[(c, j)])
            state.recomputations += 1
            adjudicator = "server"
        if state.robust and expected is not None:
            verdict = defense.compare(expected, msg.payload[1], state.cfg.tolerance)
            if not verdict.ok:
                alert = state.alert(
                    msg.receiver, j, "backward", CheckKind.BACKWARD_MIRROR, verdict.max_abs_diff, adjudicator
                )
                return Delivery(alert=alert)
        state.server_grad[(msg.receiver, j)] = msg.payload[1]
        fwd = PipelineMessage(msg.kind, msg.iteration, j, SERVER, msg.receiver, msg.payload, msg.attempt, c)
    else:
        fwd = PipelineMessage(msg.kind, msg.iteration, j, SERVER, msg.receiver, msg.payload, msg.attempt, msg.sender)
    state.bus.post(fwd)
    return Delivery([fwd])


@dataclass
class IterationResult:
    iteration: int
    attempt: int
    committed: bool
    loss: float = math.nan
    alerts: list[AlertEvent] = field(default_factory=list)
    action: RecoveryAction | None = None
    messages: int = 0
    recomputations: int = 0


class _Attempt:
    """Working state for one attempt at one iteration."""

    def __init__(self, state: PipelineState, batch, plan: AttackPlan | None, noise: RandomStream | None):
        self.state = state
        x, y = batch
        cfg = state.cfg
        b = cfg.micro_batch
        self.m = cfg.micro_count
        self.xs = [x[j * b : (j + 1) * b] for j in range(self.m)]
        self.ys = [y[j * b : (j + 1) * b] for j in range(self.m)]
        self.plan = plan
        self.noise = noise
        self.caches: dict[tuple[int, int], object] = {}
        self.dup_caches: dict[tuple[int, int], object] = {}
        self.loss_grads: dict[int, np.ndarray] = {}
        self.row_losses: list[list[float]] = [[] for _ in range(self.m)]
        self.acc: dict[int, list] = {}
        self.crashed = False

    def _attacking(self, s: int, direction: str) -> bool:
        p = self.plan
        return p is not None and p.target == s and p.direction == direction

    def forward(self, s: int, j: int) -> AlertEvent | None:
        st = self.state
        K = st.K
        if s == 1:
            a_in, a_dup = self.xs[j], None
        else:
            msg = st.bus.take(s, MessageKind.FWD_ACT, j)
            if msg is None:
                return st.alert(s, j, "forward", CheckKind.TIMEOUT, math.inf)
            a_dup, a_in = msg.payload
            if st.robust:
                alert = self._verify_forward(s, j, a_dup, a_in)
                if alert is not None:
                    return alert
        out, cache = st.stages[s].forward(a_in)
        self.caches[(s, j)] = cache
        if s == K:
            losses, _ = cross_entropy_rows(out, self.ys[j])
            _, grad = softmax_cross_entropy(out, self.ys[j], normalizer=st.cfg.batch_size)
            self.row_losses[j] = losses.tolist()
            self.loss_grads[j] = grad
            return None
        sent_dup, sent_out = a_in, out
        if self._attacking(s, "forward"):
            kind = self.plan.kind
            if kind is AttackKind.CRASH:
                self.crashed = True
                return None
            if kind is AttackKind.FORWARD_FLIP:
                sent_out = tamper_forward(out)
            elif kind is AttackKind.STEALTHY_FORWARD:
                fake = self.noise.gaussian(a_in.shape[0], st.stages[s].in_width)
                sent_dup, sent_out = tamper_stealthy(st.stages[s], fake)
        st.send(MessageKind.FWD_ACT, j, s, st.next_active(s), (sent_dup if st.robust else None, sent_out), origin=s)
        if st.robust and st.routing == "direct" and s + 2 <= K:
            st.send(MessageKind.FWD_JUMP, j, s, s + 2, (sent_out,), origin=s)
        return None

    def _verify_forward(self, s, j, a_dup, a_in) -> AlertEvent | None:
        st = self.state
        tau = st.cfg.tolerance
        if st.prev_active(s) == s - 1:
            verdict, cache = defense._verify_forward_cached(st.duplicates[s], a_dup, a_in, tau, f"{s}:{j}")
            st.recomputations += 1
            if not verdict.ok:
                return st.alert(s, j, "forward", CheckKind.DUP_BLOCK, verdict.max_abs_diff)
            self.dup_caches[(s, j)] = cache
        if st.routing == "direct" and s >= 3:
            jump = st.bus.take(s, MessageKind.FWD_JUMP, j, sender=s - 2)
            if jump is None:
                return st.alert(s, j, "forward", CheckKind.TIMEOUT, math.inf)
            verdict = defense.verify_jump(a_dup, jump.payload[0], tau)
            if not verdict.ok:
                return st.alert(s, j, "forward", CheckKind.JUMP, verdict.max_abs_diff)
        return None

    def backward(self, s: int, j: int) -> AlertEvent | None:
        st = self.state
        K = st.K
        if s == K:
            g = self.loss_grads[j]
        else:
            msg = st.bus.take(s, MessageKind.BWD_GRAD, j)
            if msg is None:
                return st.alert(s, j, "backward", CheckKind.TIMEOUT, math.inf)
            g = msg.payload[1]
            if st.robust and st.routing == "direct" and s + 2 <= K:
                # The claimer s+1 is interior; its expected output comes from s+2.
                exp = st.bus.take(s, MessageKind.BWD_JUMP, j, sender=s + 2)
                if exp is None:
                    return st.alert(s, j, "backward", CheckKind.TIMEOUT, math.inf)
                verdict = defense.compare(exp.payload[0], g, st.cfg.tolerance)
                if not verdict.ok:
                    return st.alert(s, j, "backward", CheckKind.BACKWARD_MIRROR, verdict.max_abs_diff)
        grad_in, self.acc[s] = st.stages[s].backward(self.caches[(s, j)], g, self.acc.get(s))
        if s == 1:
            return None
        c = s - 1
        if st.robust and st.prev_active(s) == c and c >= 2:
            expected = defense.expected_gradient(st.duplicates[s], self.dup_caches[(s, j)], grad_in)
            st.recomputations += 1
            receiver = c - 1 if st.routing == "direct" else SERVER
            st.send(MessageKind.BWD_JUMP, j, s, receiver, (expected,), origin=c)
        sent = grad_in
        if self._attacking(s, "backward"):
            sent = self.noise.gaussian(*grad_in.shape)
        delivery = st.send(MessageKind.BWD_GRAD, j, s, st.prev_active(s), (g, sent), origin=s)
        return delivery.alert

    def run(self) -> list[AlertEvent]:
        st = self.state
        active = st.active_stages()
        for order, step in ((active, self.forward), (active[::-1], self.backward)):
            for tick in range(len(order) + self.m - 1):
                work = [(s, tick - p) for p, s in enumerate(order) if 0 <= tick - p < self.m]
                alerts = []
                for k in st.schedule.shuffle(len(work)):
                    s, j = work[k]
                    alert = step(s, j)
                    if alert is not None:
                        alerts.append(alert)
                if alerts:
                    return sorted(alerts, key=lambda a: (a.stage, a.micro, a.check.value))
        return []

    def loss(self) -> float:
        rows = [v for block in self.row_losses for v in block]
        return math.fsum(rows) / self.state.cfg.batch_size


def run_iteration(
    state: PipelineState,
    batch,
    plan: AttackPlan | None = None,
    *,
    noise: RandomStream | None = None,
    policy: RecoveryPolicy | None = None,
    attempt: int = 0,
) -> IterationResult:
    """One attempt at one iteration: all forwards, all backwards, one update.

    On an alert the attempt stops, nothing is committed, and the recovery
    policy decides the next step (returned as ``result.action``).
    """
    policy = policy or RecoveryPolicy()
    if noise is None:
        noise = RandomStream(state.cfg.seeds.adversary, "adversary/noise")
    n = state.iteration
    state.begin_attempt(n, attempt)
    msgs0, rec0 = state.bus.total, state.recomputations
    work = _Attempt(state, batch, plan, noise)
    alerts = work.run()
    res = IterationResult(n, attempt, committed=not alerts, alerts=alerts)
    if alerts:
        for a in alerts:
            state.bus.post(PipelineMessage(MessageKind.ALERT, n, a.micro, a.stage, None, (), attempt, a.stage))
        res.action = defense.recover(state, alerts[0], policy)
    else:
        for s in state.active_stages():
            if not state.is_frozen(s):
                state.stages[s].apply_update(work.acc[s], state.cfg.lr)
        if state.robust:
            defense.sync_duplicates(state)
        res.loss = work.loss()
    res.messages = state.bus.total - msgs0
    res.recomputations = state.recomputations - rec0
    return res


def evaluate(state: PipelineState, x: np.ndarray, y) -> float:
    """Mean cross-entropy of the current active stack on ``(x, y)``."""
    h = x
    for s in state.active_stages():
        h = state.stages[s](h)
    losses, _ = cross_entropy_rows(h, y)
    return math.fsum(losses.tolist()) / len(losses)


class Dataset(Protocol):
    def batch(self, iteration: int, size: int): ...

    eval_x: np.ndarray
    eval_y: np.ndarray


@dataclass
class RunMetrics:
    losses: list[float] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)
    skips: list[str] = field(default_factory=list)
    alerts_per_iteration: list[int] = field(default_factory=list)
    attempts_per_iteration: list[int] = field(default_factory=list)
    alerts: list[AlertEvent] = field(default_factory=list)
    actions: list[RecoveryAction] = field(default_factory=list)
    attacks: list[dict] = field(default_factory=list)
    skip_events: list[dict] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    messages: Counter = field(default_factory=Counter)
    recomputations: int = 0
    restarts: int = 0
    wall_time: float = 0.0
    aborted: bool = False
    abort_reason: str = ""

    @property
    def completed(self) -> int:
        return len(self.losses)

    @property
    def final_perplexity(self) -> float:
        return math.exp(self.final_loss)

    @property
    def attacked_iterations(self) -> list[int]:
        return sorted({a["iteration"] for a in self.attacks if a["effective"]})


class AbortedRun(RuntimeError):
    def __init__(self, reason: str, metrics: RunMetrics):
        super().__init__(reason)
        self.metrics = metrics


def run_training(
    cfg: PipelineConfig,
    dataset: Dataset,
    attack: AttackConfig | None = None,
    policy: RecoveryPolicy | None = None,
    *,
    trace: bool = False,
    state: PipelineState | None = None,
) -> RunMetrics:
    """Train for ``cfg.iterations`` iterations, consulting the adversary each attempt.

    Raises :class:`AbortedRun` (carrying partial metrics) when the recovery
    policy gives up.
    """
    attack = attack or AttackConfig()
    policy = policy or RecoveryPolicy()
    state = state or build_pipeline(cfg, trace=trace)
    adversary = Adversary(attack, cfg.K, cfg.iterations)
    metrics = RunMetrics()
    t0 = time.perf_counter()
    metrics.initial_loss = evaluate(state, dataset.eval_x, dataset.eval_y)
    for n in range(cfg.iterations):
        batch = dataset.batch(n, cfg.batch_size)
        state.iteration = n
        state.retries = 0
        alerts_here = 0
        attempt = 0
        while True:
            plan = adversary.plan(n, attempt)
            effective = plan is not None and plan.target not in state.skipped
            res = run_iteration(state, batch, plan if effective else None, noise=adversary.noise, policy=policy, attempt=attempt)
            if plan is not None:
                metrics.attacks.append(
                    {
                        "iteration": n,
                        "attempt": attempt,
                        "stage": plan.target,
                        "kind": plan.kind.value,
                        "effective": effective,
                        "detected": bool(res.alerts),
                    }
                )
            metrics.alerts.extend(res.alerts)
            alerts_here += len(res.alerts)
            metrics.recomputations += res.recomputations
            if res.committed:
                break
            metrics.actions.append(res.action)
            if res.action.kind == "abort":
                metrics.aborted = True
                metrics.abort_reason = res.action.reason
                _finish(metrics, state, dataset, t0)
                raise AbortedRun(res.action.reason, metrics)
            if res.action.kind == "skip":
                metrics.skip_events.append({"iteration": n, "pair": list(res.action.skip), "frozen": res.action.frozen})
            metrics.restarts += 1
            attempt += 1
        metrics.losses.append(res.loss)
        metrics.modes.append(state.mode_label)
        metrics.skips.append("-".join(map(str, state.skip)) if state.skip else "")
        metrics.alerts_per_iteration.append(alerts_here)
        metrics.attempts_per_iteration.append(attempt + 1)
        if state.pending_central:
            state.switch_to_central()
    _finish(metrics, state, dataset, t0)
    return metrics


def _finish(metrics: RunMetrics, state: PipelineState, dataset, t0: float) -> None:
    metrics.final_loss = evaluate(state, dataset.eval_x, dataset.eval_y)
    metrics.messages = Counter(state.bus.counts)
    metrics.wall_time = time.perf_counter() - t0
