"""Synthetic desk-scale datasets.

``gauss_classify``: ``C`` class centers drawn from N(0, 4 I) in
``input_dim`` dimensions; each sample is its center plus N(0, I) noise. Class
of sample ``k`` is ``k % C`` so classes are balanced.

``char_lm``: next-character prediction over the bundled corpus. The input is
the one-hot code of the current character and the label is the next one. The
last 10% of the text is held out for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .stage import ConfigError
from .tensor import RandomStream

__all__ = ["Dataset", "DatasetSpec", "generate_dataset", "load_corpus"]

TASKS = ("gauss_classify", "char_lm")


@dataclass(frozen=True)
class DatasetSpec:
    task: str = "gauss_classify"
    input_dim: int = 4
    classes: int = 4
    samples: int = 4000
    eval_samples: int = 2000
    seed: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "gauss_classify" and (self.input_dim < 1 or self.classes < 2):
            raise ConfigError("gauss_classify needs input_dim >= 1 and classes >= 2")
        if self.samples < 1 or self.eval_samples < 1:
            raise ConfigError("samples and eval_samples must be positive")


@dataclass
class Dataset:
    task: str
    x: np.ndarray
    y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    seed: int
    vocab: str = ""
    _epochs: dict = field(default_factory=dict, repr=False)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.vocab) if self.vocab else int(max(self.y.max(), self.eval_y.max())) + 1

    def _order(self, epoch: int) -> list[int]:
        if epoch not in self._epochs:
            self._epochs[epoch] = RandomStream(self.seed, f"batches/{epoch}").shuffle(len(self.y))
        return self._epochs[epoch]

    def batch(self, iteration: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch for ``iteration``; a pure function of the index, so replays match."""
        n = len(self.y)
        idx = []
        for pos in range(iteration * size, (iteration + 1) * size):
            idx.append(self._order(pos // n)[pos % n])
        return self.x[idx], self.y[idx]

    def to_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.x, self.y, self.eval_x, self.eval_y))


def _gauss_classify(spec: DatasetSpec, stream: RandomStream) -> Dataset:
    centers = 2.0 * stream.gaussian(spec.classes, spec.input_dim)

    def draw(count, s):
        y = np.arange(count, dtype=np.int64) % spec.classes
        return centers[y] + s.gaussian(count, spec.input_dim), y

    x, y = draw(spec.samples, stream.child("train"))
    ex, ey = draw(spec.eval_samples, stream.child("eval"))
    return Dataset("gauss_classify", x, y, ex, ey, spec.seed)


def load_corpus() -> str:
    return resources.files("pipeguard.data").joinpath("corpus.txt").read_text(encoding="utf-8")


def _char_lm(spec: DatasetSpec, stream: RandomStream) -> Dataset:
    text = load_corpus()
    vocab = "".join(sorted(set(text)))
    code = {ch: k for k, ch in enumerate(vocab)}
    ids = np.array([code[ch] for ch in text], dtype=np.int64)
    split = int(len(ids) * 0.9)
    eye = np.eye(len(vocab))

    def pairs(lo, hi, count, s):
        starts = s.uniform(count) * (hi - lo - 1)
        pos = lo + np.minimum(starts.astype(np.int64), hi - lo - 2)
        return eye[ids[pos]], ids[pos + 1]

    x, y = pairs(0, split, spec.samples, stream.child("train"))
    ex, ey = pairs(split, len(ids), spec.eval_samples, stream.child("eval"))
    return Dataset("char_lm", x, y, ex, ey, spec.seed, vocab=vocab)


def generate_dataset(spec: DatasetSpec, stream: RandomStream | None = None) -> Dataset:
    stream = stream or RandomStream(spec.seed, "data")
    if spec.task == "gauss_classify":
        return _gauss_classify(spec, stream)
    return _char_lm(spec, stream)
