"""Command line: ``run``, ``compare`` and ``selftest``.

Exit codes: 0 success, 1 selftest failure, 2 config or input error,
3 aborted run (partial artifacts are still written).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .adversary import AttackKind
from .protocol import Mode
from .stage import ConfigError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipeguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its artifacts")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument("--mode", choices=[m.value for m in Mode])
    run.add_argument("--attack", choices=[k.value for k in AttackKind])
    run.add_argument("--rate", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")

    cmp_ = sub.add_parser("compare", help="compare run summaries")
    cmp_.add_argument("summaries", nargs="*", help="summary.json files or run directories")
    cmp_.add_argument("--reference", metavar="MODEL/DATASET", help="bundled table row, e.g. Opt-350M/openwebtext")
    cmp_.add_argument("--json", action="store_true", help="print the report as JSON")

    st = sub.add_parser("selftest", help="gradient and oracle-equivalence checks")
    st.add_argument("--iterations", type=int, default=200)
    return p


def _cli_overrides(args) -> dict:
    over: dict = {}
    if args.mode is not None:
        over["mode"] = args.mode
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    attack = {}
    if args.attack is not None:
        attack["kind"] = args.attack
    if args.rate is not None:
        attack["rate"] = args.rate
    if attack:
        over["attack"] = attack
    return over


def cmd_run(args) -> int:
    try:
        # Precedence: file < environment < command line.
        cfg = harness.parse_config(args.config, overrides=_cli_overrides(args))
        outcome = harness.run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    s = outcome.summary
    print(
        f"{cfg.mode} {cfg.attack.kind.value}@{cfg.attack.rate}: {s['completed']}/{cfg.iterations} iterations, "
        f"final loss {s['final_loss']}, alerts {s['alerts']}, skip {s['final_skip'] or '-'} -> {outcome.out_dir}"
    )
    if outcome.aborted:
        print(f"aborted: {s['abort_reason']}", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


def cmd_compare(args) -> int:
    items: list = list(args.summaries)
    try:
        if args.reference:
            model, _, dataset = args.reference.partition("/")
            items = harness.reference_summaries(model, dataset) + items
        report = harness.compare_runs(items)
    except harness.ComparisonError as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.to_text(), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import gradient_check, oracle_check

    ok = True
    g = gradient_check()
    print(f"gradients: {g.modules} modules, max relative error {g.max_relative_error:.3e} ({'ok' if g.ok else 'FAIL'})")
    ok &= g.ok
    for K in (4, 6):
        for b in (1, 4):
            piped, oracle = oracle_check(K, b, args.iterations)
            same = piped == oracle
            ok &= same
            print(f"oracle K={K} micro_batch={b}: {'bitwise equal' if same else 'MISMATCH'} over {len(piped)} iterations")
    return EXIT_OK if ok else EXIT_FAILED


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": cmd_run, "compare": cmd_compare, "selftest": cmd_selftest}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
