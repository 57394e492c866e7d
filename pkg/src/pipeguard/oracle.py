"""Monolithic trainer used as the sequential oracle for pipelined runs.

The whole layer stack lives in one module and each iteration is a single
full-batch forward/backward/update. No messages, no micro-batches, no
scheduler. Clean pipelined training must reproduce its loss series exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .stage import StageModule, init_stage
from .tensor import RandomStream, cross_entropy_rows, softmax_cross_entropy


class MonolithicTrainer:
    def __init__(self, stage_specs, init_seed: int, lr: float):
        layers = [layer for stage in stage_specs for layer in stage]
        self.model: StageModule = init_stage(layers, 1, RandomStream(init_seed, "init"))
        self.lr = lr

    def step(self, x: np.ndarray, y) -> float:
        out, cache = self.model.forward(x)
        losses, _ = cross_entropy_rows(out, y)
        _, grad = softmax_cross_entropy(out, y)
        _, grads = self.model.backward(cache, grad)
        self.model.apply_update(grads, self.lr)
        return math.fsum(losses.tolist()) / x.shape[0]

    def train(self, dataset, iterations: int, batch_size: int) -> list[float]:
        return [self.step(*dataset.batch(n, batch_size)) for n in range(iterations)]

    def evaluate(self, x: np.ndarray, y) -> float:
        losses, _ = cross_entropy_rows(self.model(x), y)
        return math.fsum(losses.tolist()) / len(losses)
