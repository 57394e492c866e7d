"""
A clean six-stage pipeline
==========================

Split a small classifier across six stages, train it with micro-batches,
and check that the loss series is the same, bit for bit, as training the
unsplit network in one piece.
"""

from pipeguard.datasets import DatasetSpec, generate_dataset
from pipeguard.oracle import MonolithicTrainer
from pipeguard.protocol import Mode, PipelineConfig, Seeds, run_training, uniform_stage_specs

# Four Gaussian blobs in four dimensions.
data = generate_dataset(DatasetSpec(seed=1))

# Stage 1 maps 4 -> 32, stages 2..5 map 32 -> 32, stage 6 maps 32 -> 4.
specs = uniform_stage_specs(K=6, input_dim=4, width=32, classes=4)
for s, layers in enumerate(specs, start=1):
    print(f"stage {s}: " + ", ".join(f"{l.kind}{(l.in_dim, l.out_dim) if l.kind == 'affine' else ''}" for l in layers))

# Batch of 4 cut into micro-batches of 1, as in a GPipe schedule.
cfg = PipelineConfig(specs, batch_size=4, micro_batch=1, lr=0.05, iterations=300, mode=Mode.BASELINE, seeds=Seeds())
metrics = run_training(cfg, data)

# The same layers, initialized from the same stream, trained without a pipeline.
oracle = MonolithicTrainer(specs, cfg.seeds.init, cfg.lr).train(data, cfg.iterations, cfg.batch_size)

print(f"\neval loss {metrics.initial_loss:.4f} -> {metrics.final_loss:.4f}")
print("pipeline and monolithic loss series identical:", metrics.losses == oracle)
print("messages sent:", dict(metrics.messages))
