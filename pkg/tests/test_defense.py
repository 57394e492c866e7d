import math

import numpy as np
import pytest

from pipeguard.adversary import AttackConfig, AttackKind, AttackPlan
from pipeguard.defense import (
    AlertEvent,
    CheckKind,
    RecoveryPolicy,
    compare,
    duplicates_consistent,
    localize,
    recover,
    skip_pair,
    verify_backward,
    verify_forward,
    verify_jump,
)
from pipeguard.protocol import Mode, build_pipeline, run_iteration, run_training
from pipeguard.stage import ConfigError, LayerSpec, init_stage
from pipeguard.tensor import RandomStream

from conftest import small_config

LAYERS = [LayerSpec.affine(3, 3), LayerSpec.act("tanh")]


@pytest.fixture
def module():
    return init_stage(LAYERS, 2, RandomStream(0, "init"))


@pytest.fixture
def x():
    return RandomStream(5, "x").gaussian(2, 3)


def alert(stage, direction="forward", routing="direct", check=CheckKind.DUP_BLOCK, adjudicator="stage", iteration=0):
    return AlertEvent(stage, iteration, 0, 0, direction, check, (), 1.0, routing, adjudicator)


def test_compare_exact_and_tolerance():
    a = np.array([[1.0, 2.0]])
    assert compare(a, a.copy()).result == "match"
    assert compare(a, a + 1e-9).result == "mismatch"
    assert compare(a, a + 1e-9, tau=1e-8).ok


def test_compare_shape_and_nan():
    v = compare(np.zeros((1, 2)), np.zeros((2, 1)))
    assert not v.ok and v.structural and v.max_abs_diff == math.inf
    assert compare(np.zeros(2), np.array([0.0, np.nan])).max_abs_diff == math.inf


def test_verify_forward_honest(module, x):
    assert verify_forward(module.copy(), x, module(x)).result == "match"


def test_verify_forward_catches_flip(module, x):
    v = verify_forward(module.copy(), x, -module(x))
    assert not v.ok and v.max_abs_diff > 0


def test_verify_forward_catches_tiny_perturbation(module, x):
    assert not verify_forward(module.copy(), x, module(x) + 1e-9).ok


def test_verify_forward_bad_shape_is_structural(module):
    v = verify_forward(module.copy(), np.zeros((2, 5)), np.zeros((2, 3)))
    assert not v.ok and v.structural


def test_verify_jump(x):
    assert verify_jump(x, None).result == "not_applicable"
    assert verify_jump(x, None).ok
    assert verify_jump(x, x.copy()).result == "match"
    assert not verify_jump(x, x + 1e-12).ok


def test_verify_backward_honest(module, x):
    g = RandomStream(6, "g").gaussian(2, 3)
    out, cache = module.forward(x)
    true = module.backward(cache, g)[0]
    expected, v = verify_backward(module.copy(), x, g, true)
    assert v.ok and np.array_equal(expected, true)


def test_verify_backward_zero_upstream(module, x):
    zero = np.zeros((2, 3))
    expected, v = verify_backward(module.copy(), x, zero, zero)
    assert v.ok and not expected.any()


def test_verify_backward_catches_noise(module, x):
    g = RandomStream(6, "g").gaussian(2, 3)
    noise = RandomStream(7, "noise").gaussian(2, 3)
    assert not verify_backward(module.copy(), x, g, noise)[1].ok


@pytest.mark.parametrize(
    "event,K,expected",
    [
        (alert(5), 6, (3, 4, 5)),
        (alert(3), 6, (2, 3)),
        (alert(2), 6, (2,)),
        (alert(6), 6, (4, 5)),
        (alert(6, routing="central"), 6, (5,)),
        (alert(4, routing="central"), 6, (3, 4)),
        (alert(2, "backward"), 6, (2, 3, 4)),
        (alert(4, "backward"), 6, (4, 5)),
        (alert(3, "backward", "central"), 6, (4, 5)),
    ],
)
def test_localize(event, K, expected):
    assert localize(event, K) == expected


def test_localize_central_with_skip_uses_active_neighbors():
    active = [1, 2, 5, 6]
    assert localize(alert(5, routing="central"), 6, active) == (2, 5)
    assert localize(alert(5, routing="central", adjudicator="server"), 6, active) == (2,)


def test_localize_never_blames_endpoints():
    for K in range(4, 10):
        for s in range(2, K + 1):
            for direction in ("forward", "backward"):
                if direction == "backward" and s == K:
                    continue
                assert all(2 <= t <= K - 1 for t in localize(alert(s, direction), K))


def test_skip_pair():
    assert skip_pair((3, 4), 6) == (3, 4)
    assert skip_pair((4,), 6) == (3, 4)
    assert skip_pair((2,), 6) == (2, 3)
    with pytest.raises(ValueError):
        skip_pair((2, 3, 4), 6)


def test_policy_validation():
    with pytest.raises(ConfigError):
        RecoveryPolicy(retry_cap=0)


def test_recover_installs_skip_in_central():
    state = build_pipeline(small_config(mode=Mode.ROBUST_CENTRAL))
    event = AlertEvent(4, 0, 0, 0, "forward", CheckKind.DUP_BLOCK, (3, 4), 1.0, "central")
    action = recover(state, event, RecoveryPolicy())
    assert action.kind == "skip" and action.skip == (3, 4)
    assert action.frozen == ["M2@2", "M4'@5"]
    assert state.skip == (3, 4) and state.active_stages() == [1, 2, 5, 6]


def test_recover_restarts_then_escalates_in_direct():
    state = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    policy = RecoveryPolicy(retry_cap=3)
    kinds = []
    for _ in range(4):
        kinds.append(recover(state, alert(4), policy).kind)
    assert kinds == ["restart", "restart", "restart", "escalate"]
    assert state.routing == "central"


def test_recover_aborts_without_escalation():
    state = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    policy = RecoveryPolicy(retry_cap=2, escalate=False)
    kinds = [recover(state, alert(4), policy).kind for _ in range(3)]
    assert kinds == ["restart", "restart", "abort"]
    assert state.routing == "direct"


def test_distinct_alerted_iterations_trigger_central():
    state = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    for n in range(3):
        state.retries = 0
        assert recover(state, alert(4, iteration=n), RecoveryPolicy(retry_cap=3)).kind == "restart"
        assert state.pending_central == (n == 2)


def test_per_iteration_cap_escalates_within_iteration(gauss_data):
    # Every replay is attacked too, so iteration 0 exhausts its restarts.
    cfg = small_config(mode=Mode.ROBUST_DIRECT, iterations=20)
    m = run_training(cfg, gauss_data, AttackConfig(AttackKind.FORWARD_FLIP, 1.0, target=3))
    assert [a.kind for a in m.actions[:5]] == ["restart"] * 3 + ["escalate", "skip"]
    assert m.skip_events[0]["iteration"] == 0 and 3 in m.skip_events[0]["pair"]
    assert m.completed == 20


def test_distinct_iteration_cap_escalates_at_boundary(gauss_data):
    # Only first attempts are attacked; each replay succeeds.
    cfg = small_config(mode=Mode.ROBUST_DIRECT, iterations=20)
    m = run_training(cfg, gauss_data, AttackConfig(AttackKind.FORWARD_FLIP, 1.0, "exact_count", target=3))
    assert m.modes[:3] == ["robust_direct"] * 3
    assert m.modes[3] == "robust_central"
    assert m.attempts_per_iteration[:3] == [2, 2, 2]
    assert m.skip_events[0]["iteration"] == 3


def test_baseline_recover_aborts_after_cap():
    state = build_pipeline(small_config())
    kinds = [recover(state, alert(4, check=CheckKind.TIMEOUT), RecoveryPolicy(retry_cap=1)).kind for _ in range(2)]
    assert kinds == ["restart", "abort"]


def test_replay_after_restart_equals_clean_iteration(gauss_data):
    batch = gauss_data.batch(0, 4)
    clean = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    attacked = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    ref = run_iteration(clean, batch)
    first = run_iteration(attacked, batch, AttackPlan(0, 3, "backward", AttackKind.BACKWARD_GAUSS))
    assert not first.committed and first.action.kind == "restart"
    replay = run_iteration(attacked, batch, attempt=1)
    assert replay.committed and replay.loss == ref.loss
    assert all(clean.stages[s].equal_params(attacked.stages[s]) for s in clean.stages)


def test_duplicates_stay_synced(gauss_data):
    cfg = small_config(mode=Mode.ROBUST_DIRECT, iterations=25)
    state = build_pipeline(cfg)
    run_training(cfg, gauss_data, state=state)
    assert duplicates_consistent(state)


def test_frozen_modules_do_not_change(gauss_data):
    cfg = small_config(mode=Mode.ROBUST_CENTRAL, iterations=30)
    state = build_pipeline(cfg)
    state.install_skip((3, 4))
    m2 = state.stages[2].snapshot()
    m4_dup = state.duplicates[5].snapshot()
    m5_before = state.stages[5].snapshot()
    run_training(cfg, gauss_data, state=state)
    assert state.stages[2].snapshot() == m2
    assert state.duplicates[5].snapshot() == m4_dup
    assert state.stages[5].snapshot() != m5_before
