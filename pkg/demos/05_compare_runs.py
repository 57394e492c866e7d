"""
Artifacts and comparison reports
================================

``run_experiment`` writes the resolved config, a per-iteration CSV, an alert
log and a summary. ``compare_runs`` lines summaries up and reports how much
the attack hurt and how much the defense recovered.
"""

import tempfile
from pathlib import Path

from pipeguard.harness import compare_runs, parse_config_dict, reference_summaries, run_experiment

root = Path(tempfile.mkdtemp(prefix="pipeguard-demo-"))
base = {"K": 6, "width": 32, "iterations": 800, "seed": 1}
runs = {
    "clean": {},
    "attacked": {"attack": {"kind": "forward_flip", "rate": 0.5}},
    "defended": {"mode": "robust_central", "attack": {"kind": "forward_flip", "rate": 0.5}},
}
dirs = []
for name, over in runs.items():
    out = run_experiment(parse_config_dict({**base, **over}), root / name)
    dirs.append(out.out_dir)
    print(f"{name:>9}: wrote {sorted(p.name for p in out.out_dir.iterdir())}")

print()
print(compare_runs(dirs).to_text())

# The bundled reference numbers go through the same report.
print(compare_runs(reference_summaries("Opt-350M", "openwebtext")).to_text())
