"""
Routing around a persistent attacker
====================================

A stage that keeps attacking eventually exhausts the restart budget. The
pipeline then switches to central routing, which narrows the suspects to an
adjacent pair, and bypasses that pair for the rest of training.
"""

from pipeguard.harness import build_dataset, parse_config_dict
from pipeguard.protocol import build_pipeline, run_training

cfg = parse_config_dict(
    {
        "K": 6,
        "width": 32,
        "iterations": 600,
        "mode": "robust_direct",
        "attack": {"kind": "forward_flip", "rate": 0.3, "target": 3},
        "defense": {"retry_cap": 3, "escalate": True},
    }
)
data = build_dataset(cfg)
state = build_pipeline(cfg.pipeline_config())
m = run_training(cfg.pipeline_config(), data, cfg.attack, cfg.defense, state=state)

# Timeline of recovery actions.
for act in m.actions:
    extra = f" {act.skip}, frozen {act.frozen}" if act.kind == "skip" else ""
    print(f"iteration {act.iteration:4d}: {act.kind}{extra}")

n = m.skip_events[0]["iteration"]
print(f"\nactive stages after the skip: {state.active_stages()}")
print(f"alerts after iteration {n}: {sum(m.alerts_per_iteration[n + 1:])}")
print(f"attacks on the bypassed stage after the skip: "
      f"{sum(1 for a in m.attacks if a['iteration'] > n)} (all inert)")
print(f"eval loss {m.initial_loss:.3f} -> {m.final_loss:.3f}")
