import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pipeguard.adversary import (
    Adversary,
    AttackConfig,
    AttackKind,
    exact_count_schedule,
    plan_iteration,
    tamper_backward,
    tamper_forward,
    tamper_stealthy,
)
from pipeguard.defense import verify_forward, verify_jump
from pipeguard.protocol import Mode, run_training
from pipeguard.stage import ConfigError, LayerSpec, init_stage
from pipeguard.tensor import RandomStream, ShapeError

from conftest import small_config


def plans(cfg, n, K=6, seed=0):
    s = RandomStream(seed, "adversary")
    return [plan_iteration(cfg, i, K, s) for i in range(n)]


def test_rate_zero_never_attacks():
    assert all(p is None for p in plans(AttackConfig(AttackKind.FORWARD_FLIP, 0.0), 500))


def test_rate_one_always_attacks():
    assert all(p is not None for p in plans(AttackConfig(AttackKind.FORWARD_FLIP, 1.0), 500))


def test_bernoulli_rate():
    ps = plans(AttackConfig(AttackKind.BACKWARD_GAUSS, 0.7), 10_000)
    frac = sum(p is not None for p in ps) / len(ps)
    assert 0.68 <= frac <= 0.72


def test_plan_direction_follows_kind():
    (p,) = plans(AttackConfig(AttackKind.BACKWARD_GAUSS, 1.0), 1)
    assert p.direction == "backward"
    (p,) = plans(AttackConfig(AttackKind.STEALTHY_FORWARD, 1.0), 1)
    assert p.direction == "forward"


@given(st.integers(4, 12), st.integers(0, 2**32))
def test_plans_never_target_immune_stages(K, seed):
    for p in plans(AttackConfig(AttackKind.FORWARD_FLIP, 1.0), 30, K=K, seed=seed):
        assert 2 <= p.target <= K - 1


def test_targets_cover_all_interior_stages():
    targets = {p.target for p in plans(AttackConfig(AttackKind.FORWARD_FLIP, 1.0), 200)}
    assert targets == {2, 3, 4, 5}


def test_persistent_target():
    assert {p.target for p in plans(AttackConfig(AttackKind.FORWARD_FLIP, 1.0, target=3), 50)} == {3}
    with pytest.raises(ConfigError):
        plans(AttackConfig(AttackKind.FORWARD_FLIP, 1.0, target=6), 1)


@given(st.floats(0, 1), st.integers(0, 500), st.integers(0, 2**32))
def test_exact_count_schedule(rate, n, seed):
    chosen = exact_count_schedule(rate, n, RandomStream(seed, "adversary/schedule"))
    assert len(chosen) == math.floor(rate * n)
    assert all(0 <= i < n for i in chosen)


def test_exact_count_needs_schedule():
    with pytest.raises(ValueError):
        plan_iteration(AttackConfig(AttackKind.FORWARD_FLIP, 0.5, "exact_count"), 0, 6, RandomStream(0, "a"))


def test_exact_count_adversary_spares_replays():
    adv = Adversary(AttackConfig(AttackKind.FORWARD_FLIP, 1.0, "exact_count"), 6, 10)
    assert adv.plan(3, 0) is not None
    assert adv.plan(3, 1) is None


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(AttackKind.FORWARD_FLIP, 1.5)
    with pytest.raises(ConfigError):
        AttackConfig(AttackKind.FORWARD_FLIP, float("nan"))
    with pytest.raises(ConfigError):
        AttackConfig(AttackKind.FORWARD_FLIP, 0.5, scheduling="burst")
    with pytest.raises(ValueError):
        AttackConfig("teleport", 0.5)
    with pytest.raises(ConfigError):
        plan_iteration(AttackConfig(AttackKind.FORWARD_FLIP, 1.0), 0, 3, RandomStream(0, "a"))


def test_none_kind_is_inactive():
    assert not AttackConfig(AttackKind.NONE, 1.0).active
    assert plans(AttackConfig(AttackKind.NONE, 1.0), 5) == [None] * 5


# --- tamper functions ---------------------------------------------------------------


def test_forward_flip_example():
    x = np.array([[1.0, -2.0, 0.0]])
    assert np.array_equal(tamper_forward(x), np.array([[-1.0, 2.0, 0.0]]))


def test_forward_flip_zero_fixed_point():
    assert np.array_equal(tamper_forward(np.zeros((2, 2))), np.zeros((2, 2)))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
def test_forward_flip_involution(vals):
    x = np.array([vals])
    assert tamper_forward(tamper_forward(x)).tobytes() == x.tobytes()


def test_backward_noise_shape_and_determinism():
    a = tamper_backward((3, 5), RandomStream(1, "adversary/noise"))
    b = tamper_backward((3, 5), RandomStream(1, "adversary/noise"))
    assert a.shape == (3, 5) and np.array_equal(a, b)


def test_backward_noise_ignores_true_gradient():
    # The true gradient is not an input; identical streams give identical noise
    # whether the gradient would have been zeros or ones.
    s1, s2 = RandomStream(2, "n"), RandomStream(2, "n")
    zeros, ones = np.zeros((2, 4)), np.ones((2, 4))
    assert np.array_equal(tamper_backward(zeros.shape, s1), tamper_backward(ones.shape, s2))


def test_backward_noise_moments():
    z = tamper_backward((1000, 100), RandomStream(3, "n"))
    assert abs(z.mean()) <= 0.02 and 0.98 <= z.std() <= 1.02


STAGE = [LayerSpec.affine(4, 4), LayerSpec.act("tanh")]


def test_stealthy_pair_fools_duplicate_but_not_jump():
    m = init_stage(STAGE, 3, RandomStream(0, "init"))
    true_in = RandomStream(0, "x").gaussian(2, 4)
    fake = RandomStream(0, "fake").gaussian(2, 4)
    a_dup, a_out = tamper_stealthy(m, fake)
    assert verify_forward(m.copy(), a_dup, a_out).ok
    assert not verify_jump(a_dup, true_in).ok


def test_stealthy_with_true_input_is_honest():
    m = init_stage(STAGE, 3, RandomStream(0, "init"))
    x = RandomStream(0, "x").gaussian(2, 4)
    a_dup, a_out = tamper_stealthy(m, x)
    assert verify_jump(a_dup, x).ok
    assert np.array_equal(a_out, m(x))


def test_stealthy_shape_check():
    m = init_stage(STAGE, 3, RandomStream(0, "init"))
    with pytest.raises(ShapeError):
        tamper_stealthy(m, np.zeros((2, 3)))


# --- crash faults -----------------------------------------------------------------


def test_crash_raises_timeout_at_successor(gauss_data):
    from pipeguard.protocol import build_pipeline, run_iteration
    from pipeguard.adversary import AttackPlan

    state = build_pipeline(small_config(mode=Mode.ROBUST_DIRECT))
    plan = AttackPlan(0, 3, "forward", AttackKind.CRASH)
    res = run_iteration(state, gauss_data.batch(0, 4), plan)
    assert not res.committed
    assert res.alerts[0].stage == 4
    assert res.alerts[0].check.value == "timeout"
    assert res.alerts[0].iteration == 0


def test_crash_then_skip_recovery(gauss_data):
    cfg = small_config(mode=Mode.ROBUST_CENTRAL, iterations=30)
    m = run_training(cfg, gauss_data, AttackConfig(AttackKind.CRASH, 1.0, target=3))
    assert m.skip_events[0]["pair"] in ([3, 4], [2, 3])
    assert m.completed == 30
    assert all(a == 0 for a in m.alerts_per_iteration[m.skip_events[0]["iteration"] + 1 :])


def test_no_crash_no_timeouts(gauss_data):
    cfg = small_config(mode=Mode.ROBUST_DIRECT, iterations=100)
    m = run_training(cfg, gauss_data)
    assert not any(a.check.value == "timeout" for a in m.alerts)
    assert not m.alerts
