"""Per-stage sub-models: affine/nonlinearity stacks with exact reverse mode.

A :class:`StageModule` holds the layers of one pipeline stage. The same class
is used for a stage's own layers and for the duplicated copy of its
predecessor that the stage keeps for verification.

Parameter blobs (``ParamBlob``) are little-endian byte strings::

    b"PGPB"                     magic
    u16  version (=1)
    u32  layer count
    per layer:
        u8  kind   0=affine 1=tanh 2=relu
        u32 in_dim, u32 out_dim          (affine only)
    per affine layer, in order:
        f64[in_dim*out_dim] weight, row-major
        f64[out_dim]        bias
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .tensor import (
    ACTIVATIONS,
    RandomStream,
    ShapeError,
    activation_apply,
    activation_grad,
    column_sums,
    matmul,
)

__all__ = [
    "ConfigError",
    "StructureError",
    "LayerSpec",
    "ForwardCache",
    "StageModule",
    "init_stage",
    "sum_grads",
    "BLOB_MAGIC",
    "BLOB_VERSION",
]

BLOB_MAGIC = b"PGPB"
BLOB_VERSION = 1
_KIND_CODES = {"affine": 0, "tanh": 1, "relu": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class ConfigError(ValueError):
    """Invalid model or pipeline configuration."""


class StructureError(ValueError):
    """A parameter blob does not match the module it is loaded into."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.kind == "affine":
            if not (self.in_dim and self.out_dim and self.in_dim >= 1 and self.out_dim >= 1):
                raise ConfigError(f"affine layer needs positive dims, got {self.in_dim}->{self.out_dim}")
        elif self.kind == "nonlinearity":
            if self.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {self.activation!r}")
        else:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def affine(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("affine", in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def act(cls, activation: str = "tanh") -> "LayerSpec":
        return cls("nonlinearity", activation=activation)

    @property
    def code(self) -> int:
        return _KIND_CODES["affine" if self.kind == "affine" else self.activation]


@dataclass
class ForwardCache:
    """Inputs seen by each layer during one forward call."""

    inputs: list[np.ndarray] = field(default_factory=list)


def _widths(specs) -> tuple[int, int]:
    dims = [(s.in_dim, s.out_dim) for s in specs if s.kind == "affine"]
    if not dims:
        raise ConfigError("a stage needs at least one affine layer")
    for (_, prev_out), (nxt_in, _) in zip(dims, dims[1:]):
        if prev_out != nxt_in:
            raise ConfigError(f"layer widths do not chain: {prev_out} -> {nxt_in}")
    return dims[0][0], dims[-1][1]


class StageModule:
    """An ordered layer stack with its parameters."""

    def __init__(self, specs, stage_index: int, params):
        self.specs = tuple(specs)
        self.stage_index = stage_index
        self.in_width, self.out_width = _widths(self.specs)
        # params[k] is (W, b) for affine layers, None otherwise.
        self.params: list[tuple[np.ndarray, np.ndarray] | None] = list(params)
        if len(self.params) != len(self.specs):
            raise StructureError("parameter list does not match layer list")

    def __repr__(self) -> str:
        return f"StageModule(stage={self.stage_index}, {self.in_width}->{self.out_width}, layers={len(self.specs)})"

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for p in self.params if p is not None for w, b in [p])

    def copy(self) -> "StageModule":
        params = [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]
        return StageModule(self.specs, self.stage_index, params)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"stage {self.stage_index} expects width {self.in_width}, got {x.shape}")
        cache = ForwardCache()
        for spec, p in zip(self.specs, self.params):
            cache.inputs.append(x)
            if spec.kind == "affine":
                w, b = p
                x = matmul(x, w) + b
            else:
                x = activation_apply(spec.activation, x)
        return x, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray, accumulate=None):
        """Return ``(grad_in, param_grads)`` for one cached forward call.

        ``accumulate`` is a running parameter-gradient list from earlier
        micro-batches; the new rows are summed onto it in row order, which
        keeps micro-batched accumulation bit-identical to one full batch.
        """
        if len(cache.inputs) != len(self.specs):
            raise StructureError(
                f"stale cache: {len(cache.inputs)} cached layers, module has {len(self.specs)}"
            )
        rows = cache.inputs[0].shape[0]
        if grad_out.shape != (rows, self.out_width):
            raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(rows, self.out_width)}")
        grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(self.specs)
        g = grad_out
        for k in range(len(self.specs) - 1, -1, -1):
            spec, x = self.specs[k], cache.inputs[k]
            if spec.kind == "affine":
                w, _ = self.params[k]
                acc = None if accumulate is None else accumulate[k]
                grads[k] = (
                    matmul(x.T, g, None if acc is None else acc[0]),
                    column_sums(g, None if acc is None else acc[1]),
                )
                g = matmul(g, w.T)
            else:
                g = activation_grad(spec.activation, x, g)
        return g, grads

    def apply_update(self, grads, lr: float) -> None:
        """Plain SGD step ``p <- p - lr * g``."""
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        new = []
        for p, g in zip(self.params, grads):
            if p is None:
                new.append(None)
                continue
            if g is None or g[0].shape != p[0].shape or g[1].shape != p[1].shape:
                raise ShapeError("gradient shapes do not match parameters")
            new.append((p[0] - lr * g[0], p[1] - lr * g[1]))
        self.params = new

    def snapshot(self) -> bytes:
        parts = [BLOB_MAGIC, struct.pack("<HI", BLOB_VERSION, len(self.specs))]
        for spec in self.specs:
            parts.append(struct.pack("<B", spec.code))
            if spec.kind == "affine":
                parts.append(struct.pack("<II", spec.in_dim, spec.out_dim))
        for p in self.params:
            if p is not None:
                parts.append(p[0].astype("<f8").tobytes())
                parts.append(p[1].astype("<f8").tobytes())
        return b"".join(parts)

    def load(self, blob: bytes) -> None:
        specs, params = parse_blob(blob)
        if tuple(specs) != self.specs:
            raise StructureError(f"blob describes a different module ({len(specs)} layers)")
        self.params = params

    def equal_params(self, other: "StageModule") -> bool:
        return self.snapshot() == other.snapshot()


def parse_blob(blob: bytes) -> tuple[list[LayerSpec], list]:
    if blob[:4] != BLOB_MAGIC:
        raise StructureError("not a parameter blob")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != BLOB_VERSION:
            raise StructureError(f"unsupported blob version {version}")
        off = 10
        specs = []
        for _ in range(count):
            (code,) = struct.unpack_from("<B", blob, off)
            off += 1
            kind = _CODE_KINDS[code]
            if kind == "affine":
                i, o = struct.unpack_from("<II", blob, off)
                off += 8
                specs.append(LayerSpec.affine(i, o))
            else:
                specs.append(LayerSpec.act(kind))
        params = []
        for spec in specs:
            if spec.kind != "affine":
                params.append(None)
                continue
            nw, nb = spec.in_dim * spec.out_dim, spec.out_dim
            w = np.frombuffer(blob, "<f8", nw, off).astype(np.float64).reshape(spec.in_dim, spec.out_dim)
            off += 8 * nw
            b = np.frombuffer(blob, "<f8", nb, off).astype(np.float64).reshape(1, nb)
            off += 8 * nb
            params.append((w, b))
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, StructureError):
            raise
        raise StructureError(f"malformed blob: {exc}") from exc
    if off != len(blob):
        raise StructureError(f"blob has {len(blob) - off} trailing bytes")
    return specs, params


def blob_header_size(specs) -> int:
    return 10 + sum(9 if s.kind == "affine" else 1 for s in specs)


def init_stage(specs, stage_index: int, stream: RandomStream, *, in_width=None, out_width=None) -> StageModule:
    """Create a stage with weights ~ N(0, 1/in_dim) and zero biases.

    Weights are drawn layer by layer from ``stream``, so initializing stages
    1..K in order from one stream gives the same numbers as initializing the
    concatenated stack as one module.
    """
    specs = list(specs)
    first, last = _widths(specs)
    if in_width is not None and first != in_width:
        raise ConfigError(f"stage {stage_index} input width {first}, expected {in_width}")
    if out_width is not None and last != out_width:
        raise ConfigError(f"stage {stage_index} output width {last}, expected {out_width}")
    params = []
    for spec in specs:
        if spec.kind == "affine":
            w = stream.gaussian(spec.in_dim, spec.out_dim) * (1.0 / np.sqrt(spec.in_dim))
            params.append((w, np.zeros((1, spec.out_dim))))
        else:
            params.append(None)
    return StageModule(specs, stage_index, params)


def sum_grads(grad_list):
    """Elementwise sum of several parameter-gradient lists, in list order."""

    def add(a, b):
        return [None if x is None else (x[0] + y[0], x[1] + y[1]) for x, y in zip(a, b)]

    return reduce(add, grad_list)
