"""Experiment front-end: config parsing, the run driver and comparison reports.

Config files are JSON objects. Every key is optional::

    K               int     stages (>= 4)                         6
    iterations      int     training iterations                   2000
    seed            int     master seed; unset entries of
                            ``seeds`` derive from it               0
    mode            str     baseline | robust_direct | robust_central
    batch_size      int     B                                      4
    micro_batch     int     b, must divide B                       1
    lr              number or preset ("desk", "large_model")      "desk"
    width           int     uniform boundary width d               32 (char_lm: 64)
    hidden_per_stage int    affine+nonlinearity blocks per stage   1
    activation      str     tanh | relu                            tanh
    tolerance       float   verification threshold tau             0.0
    seeds           {init, data, adversary, schedule}              seed, seed+1, seed+2, seed+3
    attack          {kind, rate, scheduling, target, seed}         none, 0.0, bernoulli, null, seeds.adversary
    defense         {retry_cap, escalate, max_attempts}            3, true, 64
    dataset         {task, input_dim, classes, samples, eval_samples}
    out             str     output directory                       runs/default
    trace           bool    also write the message trace           false

The "desk" learning-rate preset is 0.05 for ``gauss_classify`` and 0.1 for
``char_lm``; "large_model" is 5e-6, a rate suited to fine-tuning models with
hundreds of millions of parameters. The resolved config records both the
preset name and the number it produced.

Any key can be overridden from the environment: ``PIPEGUARD_`` followed by the
upper-cased key path joined with ``__``, e.g. ``PIPEGUARD_ITERATIONS=500`` or
``PIPEGUARD_ATTACK__RATE=0.7``. Values are parsed as JSON when possible and
taken as strings otherwise.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .adversary import AttackConfig, AttackKind
from .datasets import TASKS, Dataset, DatasetSpec, generate_dataset, load_corpus
from .defense import RecoveryPolicy
from .protocol import (
    AbortedRun,
    Mode,
    PipelineConfig,
    RunMetrics,
    Seeds,
    build_pipeline,
    run_training,
    uniform_stage_specs,
)
from .stage import ConfigError

__all__ = [
    "ENV_PREFIX",
    "ConfigError",
    "LR_PRESETS",
    "ConfigKeyError",
    "UnknownKeyError",
    "RangeError",
    "DivisibilityError",
    "ComparisonError",
    "ExperimentConfig",
    "parse_config",
    "parse_config_dict",
    "env_overrides",
    "build_dataset",
    "run_experiment",
    "RunOutcome",
    "compare_runs",
    "ComparisonReport",
    "load_reference_tables",
    "reference_summaries",
]

ENV_PREFIX = "PIPEGUARD_"
LARGE_MODEL_LR = 5e-6
DESK_LR = {"gauss_classify": 0.05, "char_lm": 0.1}
DESK_WIDTH = {"gauss_classify": 32, "char_lm": 64}
LR_PRESETS = ("desk", "large_model")


class ConfigKeyError(ConfigError):
    """A config problem tied to one key; ``path`` is the dotted key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownKeyError(ConfigKeyError):
    pass


class RangeError(ConfigKeyError):
    pass


class DivisibilityError(ConfigKeyError):
    pass


class ComparisonError(ValueError):
    """Summaries that cannot be compared (different tasks or too few runs)."""


# --- schema -----------------------------------------------------------------

_TOP = {
    "K", "iterations", "seed", "mode", "batch_size", "micro_batch", "lr", "lr_preset", "width",
    "hidden_per_stage", "activation", "tolerance", "seeds", "attack", "defense", "dataset", "out", "trace",
}
_SECTIONS = {
    "seeds": {"init", "data", "adversary", "schedule"},
    "attack": {"kind", "rate", "scheduling", "target", "seed"},
    "defense": {"retry_cap", "escalate", "max_attempts"},
    "dataset": {"task", "input_dim", "classes", "samples", "eval_samples"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 6
    iterations: int = 2000
    seed: int = 0
    mode: str = "baseline"
    batch_size: int = 4
    micro_batch: int = 1
    lr: float = 0.05
    lr_preset: str | None = "desk"
    width: int = 32
    hidden_per_stage: int = 1
    activation: str = "tanh"
    tolerance: float = 0.0
    seeds: Seeds = field(default_factory=Seeds)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: RecoveryPolicy = field(default_factory=RecoveryPolicy)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    out: str = "runs/default"
    trace: bool = False

    def pipeline_config(self) -> PipelineConfig:
        specs = uniform_stage_specs(
            self.K, self.dataset.input_dim, self.width, self.dataset.classes, self.activation, self.hidden_per_stage
        )
        return PipelineConfig(
            specs,
            batch_size=self.batch_size,
            micro_batch=self.micro_batch,
            lr=self.lr,
            iterations=self.iterations,
            mode=Mode(self.mode),
            seeds=self.seeds,
            tolerance=self.tolerance,
        )

    def to_dict(self) -> dict:
        """Fully resolved form; ``parse_config_dict(cfg.to_dict()) == cfg``."""
        attack = asdict(self.attack)
        attack["kind"] = self.attack.kind.value
        dataset = asdict(self.dataset)
        dataset.pop("seed")
        return {
            "K": self.K,
            "iterations": self.iterations,
            "seed": self.seed,
            "mode": self.mode,
            "batch_size": self.batch_size,
            "micro_batch": self.micro_batch,
            "lr": self.lr,
            "lr_preset": self.lr_preset,
            "width": self.width,
            "hidden_per_stage": self.hidden_per_stage,
            "activation": self.activation,
            "tolerance": self.tolerance,
            "seeds": asdict(self.seeds),
            "attack": attack,
            "defense": asdict(self.defense),
            "dataset": dataset,
            "out": self.out,
            "trace": self.trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def task_key(self) -> dict:
        return asdict(self.dataset)


def _check_keys(raw: dict, allowed: set, prefix: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigKeyError(prefix.rstrip(".") or "<root>", "expected a JSON object")
    for key in raw:
        if key not in allowed:
            raise UnknownKeyError(prefix + key, "unknown key")


def _int(raw, path, default, lo=None):
    v = raw.get(path.rsplit(".", 1)[-1], default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigKeyError(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise RangeError(path, f"must be >= {lo}, got {v}")
    return v


def _num(raw, path, default, lo=None, hi=None):
    v = raw.get(path.rsplit(".", 1)[-1], default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
        raise ConfigKeyError(path, f"expected a number, got {v!r}")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        bounds = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise RangeError(path, f"must be in {bounds}, got {v}")
    return float(v)


def _choice(raw, path, default, options):
    v = raw.get(path.rsplit(".", 1)[-1], default)
    if v not in options:
        raise ConfigKeyError(path, f"expected one of {sorted(options)}, got {v!r}")
    return v


def _corpus_vocab() -> int:
    return len(set(load_corpus()))


def parse_config_dict(raw: dict, env=None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate ``raw`` and fill defaults.

    Precedence is ``raw`` < ``PIPEGUARD_*`` entries of ``env`` < ``overrides``.
    """
    if not isinstance(raw, dict):
        raise ConfigKeyError("<root>", "expected a JSON object")
    raw = json.loads(json.dumps(raw))  # private deep copy
    if env:
        raw = _merge(raw, env_overrides(env))
    if overrides:
        raw = _merge(raw, json.loads(json.dumps(overrides)))
    _check_keys(raw, _TOP, "")
    for name, keys in _SECTIONS.items():
        _check_keys(raw.setdefault(name, {}), keys, name + ".")

    ds_raw = raw["dataset"]
    task = _choice(ds_raw, "dataset.task", "gauss_classify", set(TASKS))
    if task == "char_lm":
        vocab = _corpus_vocab()
        for key in ("input_dim", "classes"):
            if key in ds_raw and ds_raw[key] != vocab:
                raise ConfigKeyError(f"dataset.{key}", f"char_lm uses the corpus vocabulary size {vocab}")
        ds_defaults = {"input_dim": vocab, "classes": vocab}
    else:
        ds_defaults = {"input_dim": 4, "classes": 4}

    seed = _int(raw, "seed", 0)
    derived = Seeds.from_seed(seed)
    s_raw = raw["seeds"]
    seeds = Seeds(**{k: _int(s_raw, f"seeds.{k}", getattr(derived, k)) for k in ("init", "data", "adversary", "schedule")})

    K = _int(raw, "K", 6, lo=4)
    batch_size = _int(raw, "batch_size", 4, lo=1)
    micro_batch = _int(raw, "micro_batch", 1, lo=1)
    if batch_size % micro_batch:
        raise DivisibilityError("micro_batch", f"{micro_batch} does not divide batch_size {batch_size}")

    lr_raw = raw.get("lr", "desk")
    if isinstance(lr_raw, str):
        if lr_raw not in LR_PRESETS:
            raise ConfigKeyError("lr", f"unknown preset {lr_raw!r}; expected a number or one of {list(LR_PRESETS)}")
        lr_preset = lr_raw
        lr = DESK_LR[task] if lr_raw == "desk" else LARGE_MODEL_LR
    else:
        lr = _num(raw, "lr", None, lo=0.0)
        lr_preset = raw.get("lr_preset")
        expected = {"desk": DESK_LR[task], "large_model": LARGE_MODEL_LR}
        if lr_preset is not None and expected.get(lr_preset) != lr:
            # A number overrides any preset; keep the label only when it still applies.
            lr_preset = None

    a_raw = raw["attack"]
    target = a_raw.get("target")
    if target is not None and (isinstance(target, bool) or not isinstance(target, int) or not 2 <= target <= K - 1):
        raise RangeError("attack.target", f"must be an interior stage in [2, {K - 1}] or null, got {target!r}")
    attack = AttackConfig(
        kind=AttackKind(_choice(a_raw, "attack.kind", "none", {k.value for k in AttackKind})),
        rate=_num(a_raw, "attack.rate", 0.0, lo=0.0, hi=1.0),
        scheduling=_choice(a_raw, "attack.scheduling", "bernoulli", {"bernoulli", "exact_count"}),
        seed=_int(a_raw, "attack.seed", seeds.adversary),
        target=target,
    )

    d_raw = raw["defense"]
    escalate = d_raw.get("escalate", True)
    if not isinstance(escalate, bool):
        raise ConfigKeyError("defense.escalate", f"expected true or false, got {escalate!r}")
    defense = RecoveryPolicy(
        retry_cap=_int(d_raw, "defense.retry_cap", 3, lo=1),
        escalate=escalate,
        max_attempts=_int(d_raw, "defense.max_attempts", 64, lo=1),
    )

    dataset = DatasetSpec(
        task=task,
        input_dim=_int(ds_raw, "dataset.input_dim", ds_defaults["input_dim"], lo=1),
        classes=_int(ds_raw, "dataset.classes", ds_defaults["classes"], lo=2),
        samples=_int(ds_raw, "dataset.samples", 4000, lo=1),
        eval_samples=_int(ds_raw, "dataset.eval_samples", 2000, lo=1),
        seed=seeds.data,
    )

    out = raw.get("out", "runs/default")
    if not isinstance(out, str) or not out:
        raise ConfigKeyError("out", "expected a non-empty path string")
    trace = raw.get("trace", False)
    if not isinstance(trace, bool):
        raise ConfigKeyError("trace", f"expected true or false, got {trace!r}")

    cfg = ExperimentConfig(
        K=K,
        iterations=_int(raw, "iterations", 2000, lo=0),
        seed=seed,
        mode=_choice(raw, "mode", "baseline", {m.value for m in Mode}),
        batch_size=batch_size,
        micro_batch=micro_batch,
        lr=lr,
        lr_preset=lr_preset,
        width=_int(raw, "width", DESK_WIDTH[task], lo=1),
        hidden_per_stage=_int(raw, "hidden_per_stage", 1, lo=1),
        activation=_choice(raw, "activation", "tanh", {"tanh", "relu"}),
        tolerance=_num(raw, "tolerance", 0.0, lo=0.0),
        seeds=seeds,
        attack=attack,
        defense=defense,
        dataset=dataset,
        out=out,
        trace=trace,
    )
    cfg.pipeline_config()  # remaining structural checks
    return cfg


def parse_config(path, env=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config file; ``env`` defaults to ``os.environ``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config_dict(raw, os.environ if env is None else env, overrides)


def env_overrides(env) -> dict:
    """Nested override dict from ``PIPEGUARD_*`` variables."""
    out: dict = {}
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        # "K" is the only upper-case key; everything else is snake_case.
        keys = ["K" if p == "K" else p.lower() for p in parts]
        path = ".".join(keys)
        if not all(keys):
            raise UnknownKeyError(path, f"malformed variable {name}")
        try:
            value = json.loads(env[name])
        except json.JSONDecodeError:
            value = env[name]
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def _merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


# --- running ----------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return generate_dataset(cfg.dataset)


@dataclass
class RunOutcome:
    metrics: RunMetrics
    summary: dict
    out_dir: Path

    @property
    def aborted(self) -> bool:
        return self.metrics.aborted


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(metrics: RunMetrics) -> str:
    attacked = set(metrics.attacked_iterations)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "ppl", "alerts", "mode", "skip", "attempts", "attacked"])
    for n, loss in enumerate(metrics.losses):
        w.writerow(
            [
                n,
                _fmt(loss),
                _fmt(math.exp(loss)),
                metrics.alerts_per_iteration[n],
                metrics.modes[n],
                metrics.skips[n],
                metrics.attempts_per_iteration[n],
                int(n in attacked),
            ]
        )
    return buf.getvalue()


def alerts_jsonl(metrics: RunMetrics) -> str:
    return "".join(json.dumps(a.to_dict(), sort_keys=True) + "\n" for a in metrics.alerts)


def _finite(x):
    return x if isinstance(x, float) and math.isfinite(x) else None


def summarize(cfg: ExperimentConfig, metrics: RunMetrics) -> dict:
    """Final statistics. Ratios over the training series are recomputable from metrics.csv."""
    losses = metrics.losses
    attacked = metrics.attacked_iterations
    detected = sorted({a["iteration"] for a in metrics.attacks if a["effective"] and a["detected"]})
    first, last = (losses[0], losses[-1]) if losses else (math.nan, math.nan)
    return {
        "task": cfg.task_key(),
        "mode": cfg.mode,
        "attack": {"kind": cfg.attack.kind.value, "rate": cfg.attack.rate, "scheduling": cfg.attack.scheduling},
        "K": cfg.K,
        "iterations": cfg.iterations,
        "completed": metrics.completed,
        "aborted": metrics.aborted,
        "abort_reason": metrics.abort_reason,
        "initial_loss": _finite(metrics.initial_loss),
        "final_loss": _finite(metrics.final_loss),
        "final_perplexity": _finite(math.exp(metrics.final_loss)) if math.isfinite(metrics.final_loss) else None,
        "train": {
            "first_loss": _finite(first),
            "last_loss": _finite(last),
            "last_perplexity": _finite(math.exp(last)) if losses else None,
            "last_over_first": _finite(last / first) if losses and first else None,
            "mean_loss": _finite(math.fsum(losses) / len(losses)) if losses else None,
        },
        "alerts": len(metrics.alerts),
        "restarts": metrics.restarts,
        "skip_events": metrics.skip_events,
        "actions": [a.to_dict() for a in metrics.actions],
        "final_skip": metrics.skips[-1] if metrics.skips else "",
        "attacked_iterations": attacked,
        "detected_iterations": detected,
        "detection_rate": len(detected) / len(attacked) if attacked else None,
        "messages": dict(sorted(metrics.messages.items())),
        "messages_total": sum(metrics.messages.values()),
        "recomputations": metrics.recomputations,
        "config_sha256": hashlib.sha256(cfg.to_json().encode()).hexdigest(),
    }


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> RunOutcome:
    """Run one scenario and write its artifacts.

    ``metrics.csv``, ``alerts.jsonl``, ``summary.json`` and
    ``resolved-config.json`` are byte-identical across repeats; wall time goes
    to ``timing.json``. An aborted run still writes everything, with the
    partial series and ``abort_reason`` filled in.
    """
    out_dir = Path(out if out is not None else cfg.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigKeyError("out", f"cannot create {out_dir}: {exc}") from exc
    _write(out_dir / "resolved-config.json", cfg.to_json())

    dataset = build_dataset(cfg)
    pcfg = cfg.pipeline_config()
    state = build_pipeline(pcfg, trace=cfg.trace)
    try:
        metrics = run_training(pcfg, dataset, cfg.attack, cfg.defense, state=state)
    except AbortedRun as exc:
        metrics = exc.metrics

    summary = summarize(cfg, metrics)
    _write(out_dir / "metrics.csv", metrics_csv(metrics))
    _write(out_dir / "alerts.jsonl", alerts_jsonl(metrics))
    _write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write(out_dir / "timing.json", json.dumps({"wall_time_s": metrics.wall_time}) + "\n")
    if cfg.trace:
        state.bus.dump_trace(out_dir / "trace.jsonl")
    return RunOutcome(metrics, summary, out_dir)


# --- comparison ---------------------------------------------------------------


def load_reference_tables() -> dict:
    text = resources.files("pipeguard.data").joinpath("reference_tables.json").read_text(encoding="utf-8")
    return json.loads(text)


def reference_summaries(model: str, dataset: str) -> list[dict]:
    """Summary-shaped records for one row of the bundled robust-training table.

    Only ``final_perplexity`` (and its log) is populated; these are reported
    numbers, not simulator output.
    """
    table = load_reference_tables()["table2"]
    try:
        clean, attack, defended = table["rows"][model][dataset]
    except KeyError as exc:
        raise ComparisonError(f"no reference row for {model}/{dataset}") from exc
    task = {"task": f"reference:{dataset}", "model": model}
    atk = {"kind": "forward_flip", "rate": 0.5, "scheduling": "bernoulli"}
    none = {"kind": "none", "rate": 0.0, "scheduling": "bernoulli"}
    return [
        {"label": f"{model}/{dataset}/{role}", "task": task, "mode": mode, "attack": a,
         "final_perplexity": ppl, "final_loss": math.log(ppl)}
        for role, mode, a, ppl in (
            ("clean", "baseline", none, clean),
            ("attack", "baseline", atk, attack),
            ("defended", "robust_central", atk, defended),
        )
    ]


def _role(s: dict) -> str:
    if s["attack"]["kind"] == "none" or s["attack"]["rate"] == 0:
        return "clean"
    return "attacked" if s["mode"] == "baseline" else "defended"


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


@dataclass
class ComparisonReport:
    rows: list[dict]
    ratios: dict

    def to_dict(self) -> dict:
        return {"rows": self.rows, "ratios": self.ratios}

    def to_text(self) -> str:
        cols = ["label", "role", "mode", "attack", "final_loss", "final_ppl", "rel_loss", "detection", "msg_overhead"]
        lines = ["  ".join(f"{c:>12}" for c in cols)]
        for r in self.rows:
            vals = [r["label"], r["role"], r["mode"], f'{r["attack"]}@{r["rate"]}', r["final_loss"],
                    r["final_perplexity"], r["relative_loss"], r["detection_rate"], r["message_overhead"]]
            lines.append("  ".join(f"{_cell(v):>12}" for v in vals))
        for k, v in self.ratios.items():
            lines.append(f"{k}: {_cell(v)}")
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _load_summary(item) -> dict:
    if isinstance(item, dict):
        return dict(item)
    p = Path(item)
    if p.is_dir():
        p = p / "summary.json"
    try:
        s = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ComparisonError(f"cannot read summary {p}: {exc}") from exc
    s.setdefault("label", p.parent.name or str(p))
    return s


def compare_runs(items) -> ComparisonReport:
    """Tabulate final loss/perplexity across runs of the same task.

    ``items`` are summary.json paths, run directories or summary dicts.
    ``relative_loss`` is each run's final loss over the first run's. Roles
    (clean / attacked / defended) are read from mode and attack; when present,
    the attacked/clean, attacked/defended and defended/clean ratios are
    reported for both loss and perplexity. Overhead is message and
    recomputation counts relative to the first baseline-mode run.
    """
    summaries = [_load_summary(x) for x in items]
    if len(summaries) < 2:
        raise ComparisonError("compare_runs needs at least two summaries")
    task = summaries[0]["task"]
    for s in summaries[1:]:
        if s["task"] != task:
            raise ComparisonError(f"task mismatch: {s['task']} vs {task}")

    base = next((s for s in summaries if s["mode"] == "baseline"), summaries[0])
    ref_loss = summaries[0].get("final_loss")
    rows = []
    for k, s in enumerate(summaries):
        rows.append(
            {
                "label": s.get("label", f"run{k}"),
                "role": _role(s),
                "mode": s["mode"],
                "attack": s["attack"]["kind"],
                "rate": s["attack"]["rate"],
                "final_loss": s.get("final_loss"),
                "final_perplexity": s.get("final_perplexity"),
                "relative_loss": _ratio(s.get("final_loss"), ref_loss),
                "alerts": s.get("alerts"),
                "detection_rate": s.get("detection_rate"),
                "message_overhead": _ratio(s.get("messages_total"), base.get("messages_total")),
                "recomputation_overhead": s.get("recomputations", 0) - base.get("recomputations", 0)
                if "recomputations" in s
                else None,
            }
        )

    by_role = {}
    for r in rows:
        by_role.setdefault(r["role"], r)
    ratios = {}
    for num, den in (("attacked", "clean"), ("attacked", "defended"), ("defended", "clean")):
        if num in by_role and den in by_role:
            a, b = by_role[num], by_role[den]
            ratios[f"{num}/{den} loss"] = _ratio(a["final_loss"], b["final_loss"])
            ratios[f"{num}/{den} ppl"] = _ratio(a["final_perplexity"], b["final_perplexity"])
    return ComparisonReport(rows, ratios)
