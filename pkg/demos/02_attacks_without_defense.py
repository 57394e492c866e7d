"""
What an unprotected pipeline suffers
====================================

One interior stage at a time misbehaves: it negates its activations on the
way forward, or replaces its gradient with noise on the way back. With no
verification the corrupted values are simply trained on.
"""

from pipeguard.harness import build_dataset, parse_config_dict
from pipeguard.protocol import run_training

base = {"K": 6, "width": 32, "iterations": 1000, "seed": 0}


def final_loss(**attack):
    cfg = parse_config_dict({**base, "attack": attack})
    m = run_training(cfg.pipeline_config(), build_dataset(cfg), cfg.attack, cfg.defense)
    return m.final_loss


clean = final_loss()
print(f"clean run: final eval loss {clean:.3f}")

for kind in ("forward_flip", "backward_gauss"):
    for rate in (0.3, 0.7):
        loss = final_loss(kind=kind, rate=rate)
        print(f"{kind:>15} @ {rate}: {loss:.3f}  ({loss / clean:.1f}x clean)")
