"""Deterministic dense-math kernel.

Tensors are plain 2-D ``numpy.float64`` arrays. Every reduction in this module
runs in a fixed sequential order (``cumsum`` along the reduced axis) rather than
through BLAS or numpy's pairwise summation, so results are bit-reproducible and
independent of how a batch is split into row blocks. That property is what lets
a pipelined run match a monolithic run exactly.

Gaussian samples use the Marsaglia polar method on top of PCG64 uniform
doubles; see :meth:`RandomStream.gaussian`.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "RandomStream",
    "as_tensor",
    "matmul",
    "column_sums",
    "gaussian",
    "activation_apply",
    "activation_grad",
    "cross_entropy_rows",
    "softmax_cross_entropy",
    "ACTIVATIONS",
]

ACTIVATIONS = ("tanh", "relu")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    return arr


class RandomStream:
    """Seeded, single-owner random stream.

    A stream is identified by ``(seed, stream_id)``. The label is hashed with
    CRC-32 (stable across platforms and interpreter runs) and mixed with the
    seed through ``numpy.random.SeedSequence`` into a PCG64 generator. Only
    ``Generator.random`` is used to pull bits, so every derived draw
    (Gaussian, Bernoulli, shuffles) goes through transforms defined here.
    """

    def __init__(self, seed: int, stream_id: str):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        label = zlib.crc32(self.stream_id.encode("utf-8"))
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, label]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.draws = 0

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id!r}, draws={self.draws})"

    def child(self, suffix: str) -> "RandomStream":
        return RandomStream(self.seed, f"{self.stream_id}/{suffix}")

    def uniform(self, size: int | None = None):
        """Uniform doubles in [0, 1) with 53 random bits each."""
        if size is None:
            self.draws += 1
            return float(self._gen.random())
        self.draws += size
        return self._gen.random(size)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n < 1:
            raise ValueError("n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, n: int) -> list[int]:
        """Fisher-Yates permutation of ``range(n)``."""
        order = list(range(n))
        u = self.uniform(max(n - 1, 0))
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[pos] * (i + 1)), i)
            order[i], order[j] = order[j], order[i]
        return order

    def gaussian(self, rows: int, cols: int) -> np.ndarray:
        """Standard normal ``rows x cols`` tensor via the Marsaglia polar method.

        Uniform pairs ``(u, v)`` on [-1, 1)^2 are drawn in blocks; pairs with
        ``0 < s = u^2 + v^2 < 1`` are kept and each yields the two normals
        ``u * sqrt(-2 ln s / s)`` and ``v * sqrt(-2 ln s / s)`` (in that order).
        Samples left over from the last block are discarded.
        """
        if rows < 1 or cols < 1:
            raise ShapeError(f"gaussian shape must be positive, got ({rows}, {cols})")
        n = rows * cols
        out = np.empty(n, dtype=np.float64)
        have = 0
        while have < n:
            pairs = max(8, int((n - have) * 0.7) + 4)
            uv = 2.0 * self.uniform(2 * pairs) - 1.0
            u, v = uv[0::2], uv[1::2]
            s = u * u + v * v
            keep = (s > 0.0) & (s < 1.0)
            u, v, s = u[keep], v[keep], s[keep]
            f = np.sqrt(-2.0 * np.log(s) / s)
            z = np.empty(2 * len(s), dtype=np.float64)
            z[0::2] = u * f
            z[1::2] = v * f
            take = min(len(z), n - have)
            out[have : have + take] = z[:take]
            have += take
        return out.reshape(rows, cols)


def gaussian(stream: RandomStream, rows: int, cols: int) -> np.ndarray:
    return stream.gaussian(rows, cols)


def matmul(a: np.ndarray, b: np.ndarray, initial: np.ndarray | None = None) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``out[i, j] = ((a[i,0] b[0,j] + a[i,1] b[1,j]) + a[i,2] b[2,j]) + ...``,
    each product and each sum rounded separately (no FMA, no blocking).
    With ``initial`` the products are added onto it in the same order, so
    ``matmul(a2, b2, initial=matmul(a1, b1))`` equals the product of the
    concatenated operands exactly.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    prods = a[:, :, None] * b[None, :, :]
    if initial is not None:
        if initial.shape != (a.shape[0], b.shape[1]):
            raise ShapeError(f"accumulator shape {initial.shape} != {(a.shape[0], b.shape[1])}")
        prods = np.concatenate([initial[:, None, :], prods], axis=1)
    return np.ascontiguousarray(np.cumsum(prods, axis=1)[:, -1, :])


def column_sums(x: np.ndarray, initial: np.ndarray | None = None) -> np.ndarray:
    """Sum over rows, in row order, as a ``1 x cols`` tensor."""
    if initial is not None:
        x = np.concatenate([initial, x], axis=0)
    return np.ascontiguousarray(np.cumsum(x, axis=0)[-1:, :])


def _row_sums(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x, axis=1)[:, -1]


def activation_apply(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.where(x > 0.0, x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """``upstream * f'(x)`` where ``x`` is the pre-activation input."""
    if x.shape != upstream.shape:
        raise ShapeError(f"activation grad shape mismatch: {x.shape} vs {upstream.shape}")
    if kind == "tanh":
        t = np.tanh(x)
        return upstream * (1.0 - t * t)
    if kind == "relu":
        return np.where(x > 0.0, upstream, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label out of range for {logits.shape[1]} classes")
    return labels


def cross_entropy_rows(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy losses and softmax probabilities.

    Rows are computed independently, so splitting ``logits`` into row blocks
    gives bit-identical per-row results.
    """
    labels = _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = _row_sums(e)
    probs = e / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(z) - shifted[rows, labels]
    return losses, probs


def softmax_cross_entropy(
    logits: np.ndarray, labels: Sequence[int], normalizer: int | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``.

    ``normalizer`` defaults to the row count. A pipeline stage that sees one
    micro-batch of a larger batch passes the full batch size so that its
    gradient block equals the matching rows of the full-batch gradient.
    """
    labels = _check_labels(logits, labels)
    n = logits.shape[0] if normalizer is None else normalizer
    losses, probs = cross_entropy_rows(logits, labels)
    grad = probs.copy()
    grad[np.arange(logits.shape[0]), labels] -= 1.0
    return math.fsum(losses.tolist()) / n, grad / n
