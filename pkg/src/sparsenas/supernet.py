"""Cell-based search space.

Five candidate operations per edge, a 4-node/6-edge cell whose edges are
probability-weighted mixtures of the candidates, a small NAS-Bench-201-style
macro skeleton (stem, three stages, residual downsampling between stages),
genotype discretization and instantiation of the derived discrete network.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import List, Optional, Union

import numpy as np

from . import simplex
from . import tensor as T
from .errors import DimensionError, ValidationError
from .simplex import AnnealSchedule
from .tensor import Tensor


class OpKind(IntEnum):
    """The fixed 5-operation candidate set; index order is the tie-break order."""

    ZEROISE = 0
    SKIP_CONNECT = 1
    CONV_1X1 = 2
    CONV_3X3 = 3
    AVG_POOL_3X3 = 4


OP_NAMES = {
    OpKind.ZEROISE: "Zeroise",
    OpKind.SKIP_CONNECT: "SkipConnect",
    OpKind.CONV_1X1: "Conv1x1",
    OpKind.CONV_3X3: "Conv3x3",
    OpKind.AVG_POOL_3X3: "AvgPool3x3",
}
OP_BY_NAME = {v: k for k, v in OP_NAMES.items()}

NUM_OPS = len(OpKind)

# Edges (i, j) of the 4-node cell, in canonical order.
EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
NUM_EDGES = len(EDGES)


class Mixing(Enum):
    SOFTMAX_TAU = "softmax_tau"
    SPARSEMAX = "sparsemax"
    ANNEALED_SPARSEMAX = "annealed_sparsemax"


# ---------------------------------------------------------------------------
# Minimal module system
# ---------------------------------------------------------------------------

class Module:
    """Base class: parameter/buffer traversal over attributes and lists."""

    def __init__(self):
        self.training = True

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item
                    elif isinstance(item, (list, tuple)):
                        for sub in item:
                            if isinstance(sub, Module):
                                yield sub

    def modules(self):
        yield self
        for child in self._children():
            yield from child.modules()

    def parameters(self) -> List[Tensor]:
        params = []
        for mod in self.modules():
            for value in vars(mod).values():
                if isinstance(value, Tensor) and value.requires_grad:
                    params.append(value)
        return params

    def buffers(self) -> List[np.ndarray]:
        bufs = []
        for mod in self.modules():
            for value in vars(mod).values():
                if isinstance(value, np.ndarray):
                    bufs.append(value)
        return bufs

    def train(self, mode: bool = True):
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def snapshot(self) -> List[np.ndarray]:
        """Copy of all parameter values and buffers (running stats included)."""
        return [a.copy() for a in
                [p.data for p in self.parameters()] + self.buffers()]

    def restore(self, snap: List[np.ndarray]) -> None:
        arrays = [p.data for p in self.parameters()] + self.buffers()
        if len(arrays) != len(snap):
            raise ValidationError("snapshot does not match module structure")
        for dst, src in zip(arrays, snap):
            dst[...] = src


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator):
        super().__init__()
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.standard_normal((cout, cin, k, k)) * std,
                             requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float64)
        self.running_var = np.ones(c, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(rng.standard_normal((din, dout)) / np.sqrt(din),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ReLUConvBN(Module):
    """ReLU -> Conv -> BatchNorm, the candidate-convolution triplet."""

    def __init__(self, cin: int, cout: int, k: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, (k - 1) // 2, rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn.forward(self.conv.forward(T.relu(x)))


class Zero(Module):
    def forward(self, x: Tensor) -> Tensor:
        return Tensor(np.zeros_like(x.data))


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class AvgPool3x3(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(x, k=3, stride=1, padding=1)


def make_op(kind: OpKind, channels: int, rng: np.random.Generator) -> Module:
    if kind == OpKind.ZEROISE:
        return Zero()
    if kind == OpKind.SKIP_CONNECT:
        return Identity()
    if kind == OpKind.CONV_1X1:
        return ReLUConvBN(channels, channels, 1, 1, rng)
    if kind == OpKind.CONV_3X3:
        return ReLUConvBN(channels, channels, 3, 1, rng)
    if kind == OpKind.AVG_POOL_3X3:
        return AvgPool3x3()
    raise ValidationError(f"unknown op kind {kind!r}")


def apply_op(kind: OpKind, x: Tensor, channels: int,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """One-shot candidate-op application (fresh weights for conv kinds)."""
    if x.data.shape[1] != channels:
        raise DimensionError(
            f"expected {channels} channels, got {x.data.shape[1]}")
    op = make_op(kind, channels, rng or np.random.default_rng(0))
    return op.forward(x)


# ---------------------------------------------------------------------------
# Genotype
# ---------------------------------------------------------------------------

_EDGE_RE = re.compile(r"edge\((\d),(\d)\)=(\w+)")


@dataclass(frozen=True)
class Genotype:
    """One chosen operation per cell edge, in canonical edge order."""

    edge_ops: tuple

    def __post_init__(self):
        if len(self.edge_ops) != NUM_EDGES:
            raise ValidationError(f"genotype needs {NUM_EDGES} edges, got {len(self.edge_ops)}")
        object.__setattr__(self, "edge_ops", tuple(OpKind(o) for o in self.edge_ops))

    def to_string(self) -> str:
        return "|".join(f"edge({i},{j})={OP_NAMES[op]}"
                        for (i, j), op in zip(EDGES, self.edge_ops))

    @classmethod
    def from_string(cls, s: str) -> "Genotype":
        parts = s.strip().split("|")
        if len(parts) != NUM_EDGES:
            raise ValidationError(f"genotype string has {len(parts)} edges, expected {NUM_EDGES}")
        ops = []
        for k, part in enumerate(parts):
            m = _EDGE_RE.fullmatch(part.strip())
            if not m:
                raise ValidationError(f"cannot parse edge {EDGES[k]}: {part!r}")
            i, j, name = int(m.group(1)), int(m.group(2)), m.group(3)
            if (i, j) != EDGES[k]:
                raise ValidationError(f"edge {k} out of order: got ({i},{j}), expected {EDGES[k]}")
            if name not in OP_BY_NAME:
                raise ValidationError(f"edge ({i},{j}): unknown operation {name!r}")
            ops.append(OP_BY_NAME[name])
        return cls(tuple(ops))

    def to_json(self) -> dict:
        return {f"edge({i},{j})": OP_NAMES[op]
                for (i, j), op in zip(EDGES, self.edge_ops)}


def discretize(alpha: np.ndarray) -> Genotype:
    """Per-edge argmax; ties break to the lowest op index."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (NUM_EDGES, NUM_OPS):
        raise DimensionError(f"alpha must have shape ({NUM_EDGES},{NUM_OPS}), got {alpha.shape}")
    return Genotype(tuple(OpKind(int(i)) for i in alpha.argmax(axis=1)))


# ---------------------------------------------------------------------------
# Mixing weights on the gradient tape
# ---------------------------------------------------------------------------

def softmax_row_op(alpha_row: Tensor, tau: float) -> Tensor:
    """Tape-recorded softmax_tau of one alpha row."""
    p = simplex.softmax_tau(alpha_row.data, tau)
    out = Tensor(p)

    def bwd():
        if out.grad is not None:
            alpha_row._accum(
                simplex.softmax_tau_jacobian_vec(alpha_row.data, tau, out.grad))

    return T._record("softmax_row", (alpha_row,), out, bwd, mixing=True)


def sparsemax_row_op(alpha_row: Tensor, temperature: float) -> Tensor:
    """Tape-recorded sparsemax of alpha_row / temperature."""
    scaled = alpha_row.data / temperature
    out = Tensor(simplex.sparsemax(scaled))

    def bwd():
        if out.grad is not None:
            alpha_row._accum(
                simplex.sparsemax_jacobian_vec(scaled, out.grad) / temperature)

    return T._record("sparsemax_row", (alpha_row,), out, bwd, mixing=True)


# ---------------------------------------------------------------------------
# Cells and networks
# ---------------------------------------------------------------------------

def mixed_edge(ops: List[Module], x: Tensor, p: Tensor) -> Tensor:
    """Probability-weighted sum of candidate ops; zero-weight ops are skipped."""
    xs = [op.forward(x) if p.data[k] != 0.0 else None for k, op in enumerate(ops)]
    return T.weighted_sum(p, xs)


class Cell(Module):
    """4-node DAG; every edge carries all 5 candidate operations."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.edges = [[make_op(kind, channels, rng) for kind in OpKind]
                      for _ in range(NUM_EDGES)]

    def forward(self, x: Tensor, edge_probs: List[Tensor]) -> Tensor:
        nodes = [x]
        for j in range(1, 4):
            acc = None
            for i in range(j):
                e = EDGES.index((i, j))
                y = mixed_edge(self.edges[e], nodes[i], edge_probs[e])
                acc = y if acc is None else T.add(acc, y)
            nodes.append(acc)
        return nodes[3]


class FixedCell(Module):
    """Cell with exactly one operation per edge (a discretized architecture)."""

    def __init__(self, genotype: Genotype, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.ops = [make_op(kind, channels, rng) for kind in genotype.edge_ops]

    def forward(self, x: Tensor) -> Tensor:
        nodes = [x]
        for j in range(1, 4):
            acc = None
            for i in range(j):
                e = EDGES.index((i, j))
                y = self.ops[e].forward(nodes[i])
                acc = y if acc is None else T.add(acc, y)
            nodes.append(acc)
        return nodes[3]


class DownsampleBlock(Module):
    """Stride-2 residual block doubling the channel count between stages."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.main = ReLUConvBN(cin, cout, 3, 2, rng)
        self.short_conv = Conv2d(cin, cout, 1, 2, 0, rng)
        self.short_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(self.main.forward(x),
                     self.short_bn.forward(self.short_conv.forward(x)))


@dataclass
class SupernetConfig:
    stem_channels: int = 8
    cells_per_stage: int = 1
    num_stages: int = 3
    num_classes: int = 4
    image_channels: int = 1
    mixing: Mixing = Mixing.ANNEALED_SPARSEMAX
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)

    def __post_init__(self):
        if isinstance(self.mixing, str):
            self.mixing = Mixing(self.mixing)
        for name in ("stem_channels", "cells_per_stage", "num_stages",
                     "num_classes", "image_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")


class _Skeleton(Module):
    """Shared stem / downsample / head structure of both network variants."""

    def __init__(self, config: SupernetConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config.stem_channels
        self.stem_conv = Conv2d(config.image_channels, c, 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(c)
        self.downsamples = []
        channels = [c * 2 ** s for s in range(config.num_stages)]
        for s in range(config.num_stages - 1):
            self.downsamples.append(DownsampleBlock(channels[s], channels[s + 1], rng))
        self.classifier = Linear(channels[-1], config.num_classes, rng)
        self.stage_channels = channels

    def _head(self, x: Tensor) -> Tensor:
        return self.classifier.forward(T.global_avg_pool(x))

    def _stem(self, x: Tensor) -> Tensor:
        return self.stem_bn.forward(self.stem_conv.forward(x))


class Supernet(_Skeleton):
    """All-candidates network; forward is parameterized by alpha.

    ``alpha`` may be a Tensor (mixing weights join the gradient tape, needed
    for first-order architecture steps) or a plain ndarray (weights are
    constants, the zeroth-order path).
    """

    def __init__(self, config: SupernetConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.stages = [[Cell(self.stage_channels[s], rng)
                        for _ in range(config.cells_per_stage)]
                       for s in range(config.num_stages)]

    def edge_probs(self, alpha: Union[Tensor, np.ndarray], epoch: int) -> List[Tensor]:
        cfg = self.config
        if cfg.mixing is Mixing.ANNEALED_SPARSEMAX:
            temp = cfg.schedule.temperature_at(epoch)
        else:
            temp = 1.0
        probs = []
        for e in range(NUM_EDGES):
            if isinstance(alpha, Tensor):
                arow = T.row(alpha, e)
                if cfg.mixing is Mixing.SOFTMAX_TAU:
                    probs.append(softmax_row_op(arow, 1.0))
                else:
                    probs.append(sparsemax_row_op(arow, temp))
            else:
                if cfg.mixing is Mixing.SOFTMAX_TAU:
                    p = simplex.softmax_tau(alpha[e], 1.0)
                else:
                    p = simplex.sparsemax(alpha[e] / temp)
                probs.append(Tensor(p))
        return probs

    def forward(self, x: Tensor, alpha: Union[Tensor, np.ndarray], epoch: int = 0) -> Tensor:
        probs = self.edge_probs(alpha, epoch)
        h = self._stem(x)
        for s, stage in enumerate(self.stages):
            for cell in stage:
                h = cell.forward(h, probs)
            if s < len(self.downsamples):
                h = self.downsamples[s].forward(h)
        return self._head(h)

    def mixing_probs(self, alpha: np.ndarray, epoch: int) -> np.ndarray:
        """[6,5] matrix of current mixing probabilities (numpy, off-tape)."""
        return np.stack([p.data for p in self.edge_probs(np.asarray(alpha), epoch)])


class DerivedNet(_Skeleton):
    """Discrete network instantiated from a genotype; same macro skeleton."""

    def __init__(self, genotype: Genotype, config: SupernetConfig,
                 rng: np.random.Generator):
        super().__init__(config, rng)
        self.genotype = genotype
        self.stages = [[FixedCell(genotype, self.stage_channels[s], rng)
                        for _ in range(config.cells_per_stage)]
                       for s in range(config.num_stages)]

    def forward(self, x: Tensor) -> Tensor:
        h = self._stem(x)
        for s, stage in enumerate(self.stages):
            for cell in stage:
                h = cell.forward(h)
            if s < len(self.downsamples):
                h = self.downsamples[s].forward(h)
        return self._head(h)


def instantiate(genotype: Genotype, config: SupernetConfig,
                rng: Optional[np.random.Generator] = None) -> DerivedNet:
    return DerivedNet(genotype, config, rng or np.random.default_rng(0))
