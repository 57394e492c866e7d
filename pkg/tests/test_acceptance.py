"""One test per acceptance criterion; each prints a PASS/FAIL line."""

import copy
import json
import time

import pytest

from pipeguard.adversary import AttackConfig, AttackKind, plan_iteration
from pipeguard.harness import build_dataset, compare_runs, parse_config_dict, reference_summaries, run_experiment
from pipeguard.protocol import Mode, build_pipeline, evaluate, run_iteration, run_training
from pipeguard.selftest import gradient_check, oracle_check
from pipeguard.tensor import RandomStream

SEEDS = range(5)
SCENARIO = {"K": 6, "width": 32, "iterations": 2000, "dataset": {"task": "gauss_classify"}}


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def scenario(seed, mode="baseline", kind="none", rate=0.0, **extra):
    return parse_config_dict({**SCENARIO, "seed": seed, "mode": mode, "attack": {"kind": kind, "rate": rate}, **extra})


def final_loss(cfg):
    t0 = time.perf_counter()
    m = run_training(cfg.pipeline_config(), build_dataset(cfg), cfg.attack, cfg.defense)
    return m.final_loss, time.perf_counter() - t0


@pytest.fixture(scope="module")
def table():
    """Final eval losses for every (seed, scenario) used by criteria 5 and 6."""
    runs = {
        "clean": dict(),
        "backward@0.7": dict(kind="backward_gauss", rate=0.7),
        "forward@0.7": dict(kind="forward_flip", rate=0.7),
        "forward@0.5": dict(kind="forward_flip", rate=0.5),
        "defended@0.5": dict(mode="robust_central", kind="forward_flip", rate=0.5),
    }
    out, slowest = {}, 0.0
    for name, kw in runs.items():
        for s in SEEDS:
            out[name, s], dt = final_loss(scenario(s, **kw))
            slowest = max(slowest, dt)
    out["slowest"] = slowest
    return out


def test_criterion_1_gradient_check(verdict):
    t0 = time.perf_counter()
    rep = gradient_check(n_modules=24)
    dt = time.perf_counter() - t0
    verdict(1, rep.ok and dt < 10, f"{rep.modules} specs, max rel err {rep.max_relative_error:.2e} ({rep.worst}), {dt:.2f}s")


def test_criterion_2_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    bad = []
    for K in (4, 6):
        for m in (1, 4):
            piped, oracle = oracle_check(K, m, 200)
            if len(piped) != 200 or piped != oracle:
                bad.append((K, m))
    dt = time.perf_counter() - t0
    verdict(2, not bad and dt < 30, f"K in {{4,6}} x m in {{1,4}}, 200 iterations bitwise equal; mismatches {bad}, {dt:.2f}s")


def test_criterion_3_detection_soundness(verdict):
    modes = list(Mode)
    alerts = 0
    for k in range(10):
        cfg = parse_config_dict(
            {**SCENARIO, "iterations": 500, "seed": 100 + k, "mode": modes[k % 3].value, "micro_batch": (1, 2, 4)[k % 3]}
        )
        m = run_training(cfg.pipeline_config(), build_dataset(cfg), cfg.attack, cfg.defense)
        alerts += len(m.alerts) + m.restarts
    verdict(3, alerts == 0, f"10 attack-free runs x 500 iterations, {alerts} alerts")


def test_criterion_4_detection_completeness(verdict):
    kinds = [AttackKind.FORWARD_FLIP, AttackKind.BACKWARD_GAUSS, AttackKind.STEALTHY_FORWARD]
    cfgs = {m: parse_config_dict({**SCENARIO, "seed": 7, "mode": m.value}) for m in (Mode.ROBUST_DIRECT, Mode.ROBUST_CENTRAL)}
    ds = build_dataset(cfgs[Mode.ROBUST_DIRECT])
    states = {m: build_pipeline(c.pipeline_config()) for m, c in cfgs.items()}
    planner = RandomStream(7, "acceptance/plans")
    noise = RandomStream(7, "acceptance/noise")
    detected = localized = total = 0
    for n in range(500):
        mode = (Mode.ROBUST_DIRECT, Mode.ROBUST_CENTRAL)[n % 2]
        state = states[mode]
        state.iteration = n
        plan = plan_iteration(AttackConfig(kinds[n % 3], 1.0), n, 6, planner)
        batch = ds.batch(n, 4)
        # Attack a copy so recovery actions never leak into the next iteration.
        probe = copy.deepcopy(state)
        probe.retries = 0
        res = run_iteration(probe, batch, plan, noise=noise)
        total += 1
        detected += bool(res.alerts) and not res.committed
        localized += bool(res.alerts) and all(plan.target in a.suspects for a in res.alerts)
        clean = run_iteration(state, batch)
        assert clean.committed
    ok = detected == localized == total == 500
    verdict(4, ok, f"{total} attacked iterations, detected {detected}, true stage in suspects {localized}")


def test_criterion_5_vulnerability(verdict, table):
    holds = {}
    for kind in ("backward@0.7", "forward@0.7"):
        holds[kind] = sum(table[kind, s] >= 2 * table["clean", s] for s in SEEDS)
    ratios = {k: [round(table[k, s] / table["clean", s], 2) for s in SEEDS] for k in holds}
    ok = all(v >= 4 for v in holds.values()) and table["slowest"] < 60
    verdict(5, ok, f"attacked/clean per seed {ratios}; seeds passing {holds}; slowest run {table['slowest']:.1f}s")


def test_criterion_6_defense(verdict, table):
    per_seed = []
    for s in SEEDS:
        d, c, u = table["defended@0.5", s], table["clean", s], table["forward@0.5", s]
        per_seed.append((round(d / c, 2), round(d / u, 2), d <= 1.25 * c and d <= 0.5 * u))
    passing = sum(p[2] for p in per_seed)
    verdict(6, passing >= 4, f"(defended/clean, defended/undefended, ok) per seed {per_seed}; {passing}/5 seeds")


@pytest.mark.parametrize(
    "kind,target", [("forward_flip", 3), ("backward_gauss", 4), ("stealthy_forward", 3)]
)
def test_criterion_7_skip_recovery(verdict, kind, target):
    raw = {**SCENARIO, "iterations": 1000, "seed": 0, "mode": "robust_direct",
           "attack": {"kind": kind, "rate": 0.3, "target": target}}
    cfg = parse_config_dict(raw)
    ds = build_dataset(cfg)
    state = build_pipeline(cfg.pipeline_config())
    m = run_training(cfg.pipeline_config(), ds, cfg.attack, cfg.defense, state=state)
    event = m.skip_events[0]
    n, (i, j) = event["iteration"], event["pair"]

    # Same run cut off right after the skip iteration: the state at skip time.
    early_cfg = parse_config_dict({**raw, "iterations": n + 1})
    early = build_pipeline(early_cfg.pipeline_config())
    run_training(early_cfg.pipeline_config(), ds, early_cfg.attack, early_cfg.defense, state=early)
    loss_at_skip = evaluate(early, ds.eval_x, ds.eval_y)

    checks = {
        "escalated": m.modes[n] == "robust_central",
        "target skipped": target in (i, j),
        "no post-skip alerts": sum(m.alerts_per_iteration[n + 1 :]) == 0 and len(m.skip_events) == 1,
        "M_i-1 frozen": state.stages[i - 1].snapshot() == early.stages[i - 1].snapshot(),
        "M_j' frozen": state.duplicates[j + 1].snapshot() == early.duplicates[j + 1].snapshot(),
        "loss recovers": m.final_loss < 0.5 * loss_at_skip,
        "completed": m.completed == 1000,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed, f"{kind}@stage {target}: skip {i}-{j} at iteration {n}, loss {loss_at_skip:.3f} -> "
            f"{m.final_loss:.3f}; failed checks {failed}")


def test_criterion_8_determinism(verdict, tmp_path):
    scenarios = [
        dict(mode="baseline", kind="backward_gauss", rate=0.7),
        dict(mode="robust_direct", kind="stealthy_forward", rate=0.5),
        dict(mode="robust_central", kind="forward_flip", rate=0.5),
        dict(mode="robust_direct", kind="crash", rate=0.2),
    ]
    differing = []
    for k, kw in enumerate(scenarios):
        cfg = scenario(k, iterations=300, micro_batch=2, **kw)
        a = run_experiment(cfg, tmp_path / f"{k}a").out_dir
        b = run_experiment(cfg, tmp_path / f"{k}b").out_dir
        for name in ("metrics.csv", "alerts.jsonl", "summary.json"):
            if (a / name).read_bytes() != (b / name).read_bytes():
                differing.append(f"{k}:{name}")
    verdict(8, not differing, f"{len(scenarios)} scenarios repeated, differing files {differing}")


def test_criterion_9_reference_ratio(verdict):
    ratio = compare_runs(reference_summaries("Opt-350M", "openwebtext")).ratios["attacked/defended ppl"]
    verdict(9, abs(ratio - 102.2) <= 0.1, f"Opt-350M/openwebtext attacked/defended ppl = {ratio:.3f}")
