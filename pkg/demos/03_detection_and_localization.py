"""
Catching a tampering stage
==========================

Every stage holds a copy of its predecessor's layers, and receives its
grand-predecessor's output over a jumping connection. Here we attack a single
iteration in each routing mode and look at who raises the alert and which
stages end up under suspicion.
"""

from pipeguard.adversary import AttackKind, AttackPlan
from pipeguard.datasets import DatasetSpec, generate_dataset
from pipeguard.protocol import Mode, PipelineConfig, build_pipeline, run_iteration, uniform_stage_specs

data = generate_dataset(DatasetSpec(seed=1))
specs = uniform_stage_specs(K=6, input_dim=4, width=32, classes=4)
batch = data.batch(0, 4)

attacks = [
    AttackPlan(0, 3, "forward", AttackKind.FORWARD_FLIP),
    AttackPlan(0, 3, "forward", AttackKind.STEALTHY_FORWARD),
    AttackPlan(0, 4, "backward", AttackKind.BACKWARD_GAUSS),
]

for mode in (Mode.ROBUST_DIRECT, Mode.ROBUST_CENTRAL):
    print(f"\n--- {mode.value} ---")
    for plan in attacks:
        # A fresh pipeline each time so a recovery action does not carry over.
        state = build_pipeline(PipelineConfig(specs, mode=mode))
        res = run_iteration(state, batch, plan)
        a = res.alerts[0]
        print(
            f"{plan.kind.value:>16} at stage {plan.target}: alert at stage {a.stage} "
            f"via {a.check.value}, suspects {list(a.suspects)}, next step: {res.action.kind}"
        )

# The stealthy variant sends an input/output pair that is internally
# consistent, so the duplicate recomputation alone would be fooled; the
# jumping connection (direct) or the server's own record (central) is what
# exposes it.
