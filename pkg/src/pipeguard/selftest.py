"""Built-in correctness checks shared by the CLI ``selftest`` and the test suite.

``gradient_check`` compares every analytic gradient of randomly drawn stage
modules with central finite differences. ``oracle_check`` trains a clean
pipeline next to the monolithic trainer and compares the loss series bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DatasetSpec, generate_dataset
from .oracle import MonolithicTrainer
from .protocol import Mode, PipelineConfig, Seeds, run_training, uniform_stage_specs
from .stage import LayerSpec, StageModule, init_stage
from .tensor import RandomStream

__all__ = ["random_specs", "relative_error", "gradient_check", "oracle_check", "GradientReport"]


def random_specs(stream: RandomStream, max_layers: int = 3, max_width: int = 6) -> list[LayerSpec]:
    """A random affine/nonlinearity stack with chaining widths."""
    n_affine = 1 + stream.randbelow(max_layers)
    width = 1 + stream.randbelow(max_width)
    specs = []
    for k in range(n_affine):
        out = 1 + stream.randbelow(max_width)
        specs.append(LayerSpec.affine(width, out))
        if k < n_affine - 1 or stream.bernoulli(0.5):
            specs.append(LayerSpec.act(("tanh", "relu")[stream.randbelow(2)]))
        width = out
    return specs


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(analytic - numeric) / scale)


def _objective(m: StageModule, x: np.ndarray, r: np.ndarray) -> float:
    return float(np.sum(m(x) * r))


def _numeric(f, arr: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@dataclass
class GradientReport:
    modules: int
    max_relative_error: float
    worst: str

    @property
    def ok(self) -> bool:
        return self.max_relative_error <= 1e-5


def _nudge_relu_inputs(m: StageModule, x: np.ndarray, h: float) -> np.ndarray:
    # Keep every relu input away from the kink so central differences are valid.
    while True:
        _, cache = m.forward(x)
        near = [
            np.min(np.abs(inp))
            for spec, inp in zip(m.specs, cache.inputs)
            if spec.kind == "nonlinearity" and spec.activation == "relu"
        ]
        if not near or min(near) > 100 * h:
            return x
        x = x + 10 * h


def gradient_check(n_modules: int = 20, seed: int = 0, h: float = 1e-5, rows: int = 3) -> GradientReport:
    stream = RandomStream(seed, "gradcheck")
    worst, where = 0.0, ""
    for k in range(n_modules):
        specs = random_specs(stream)
        m = init_stage(specs, k, stream)
        for p in m.params:
            if p is not None:
                p[1][...] = 0.1 * stream.gaussian(*p[1].shape)
        x = _nudge_relu_inputs(m, stream.gaussian(rows, m.in_width), h)
        r = stream.gaussian(rows, m.out_width)
        out, cache = m.forward(x)
        g_in, grads = m.backward(cache, r)
        checks = [("input", g_in, _numeric(lambda: _objective(m, x, r), x, h))]
        for li, (p, g) in enumerate(zip(m.params, grads)):
            if p is None:
                continue
            for name, arr, ga in (("W", p[0], g[0]), ("b", p[1], g[1])):
                checks.append((f"layer{li}.{name}", ga, _numeric(lambda: _objective(m, x, r), arr, h)))
        for name, a, n in checks:
            err = relative_error(a, n)
            if err > worst:
                worst, where = err, f"module {k} {name}"
    return GradientReport(n_modules, worst, where)


def oracle_check(K: int = 4, micro_batch: int = 1, iterations: int = 200, seed: int = 0, batch_size: int = 4):
    """Return ``(pipeline_losses, oracle_losses)`` for a clean gauss_classify run."""
    ds = generate_dataset(DatasetSpec(seed=seed + 1))
    specs = uniform_stage_specs(K, ds.input_dim, 32, ds.num_classes)
    cfg = PipelineConfig(
        specs,
        batch_size=batch_size,
        micro_batch=micro_batch,
        lr=0.05,
        iterations=iterations,
        mode=Mode.BASELINE,
        seeds=Seeds.from_seed(seed),
    )
    piped = run_training(cfg, ds).losses
    oracle = MonolithicTrainer(specs, cfg.seeds.init, cfg.lr).train(ds, iterations, batch_size)
    return piped, oracle
