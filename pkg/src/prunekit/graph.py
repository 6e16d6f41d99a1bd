"""Model graph: an ordered node list with conv-chain edges and residual joins.

Execution is sequential: node i consumes the output of node i-1, except
``Add`` nodes, which also consume the output of an earlier node.  The
``conv_chain`` map records, for each conv node, which conv feeds it; this
is the dependency the prune planner walks.  ``protected`` marks convs that
participate in residual joins or downsampling and must not be pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ShapeError, StructureError
from .layers import (
    Add,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    layer_params,
    layers_equal,
)


@dataclass(frozen=True)
class ModelMeta:
    name: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    class_count: int
    metrics: dict = field(default_factory=dict)


@dataclass(eq=False)
class ModelGraph:
    nodes: tuple[Layer, ...]
    conv_chain: dict[int, int]  # conv node index -> feeding conv node index
    protected: frozenset[int] = frozenset()
    meta: ModelMeta = ModelMeta("model", (1, 1, 1), 1)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.conv_chain = dict(self.conv_chain)
        self.protected = frozenset(self.protected)
        self._validate()

    def _validate(self) -> None:
        n = len(self.nodes)
        if n == 0:
            raise StructureError("model has no nodes")
        conv_idx = set(self.conv_indices())
        for i, node in enumerate(self.nodes):
            if isinstance(node, Add) and not node.other < i:
                raise StructureError(f"Add at node {i} references node {node.other}, not an earlier node")
        for dst, src in self.conv_chain.items():
            if dst not in conv_idx or src not in conv_idx:
                raise StructureError(f"conv_chain entry {dst}->{src} references a non-conv node")
            if not src < dst:
                raise StructureError(f"conv_chain entry {dst}->{src} must point backwards")
        for p in self.protected:
            if p not in conv_idx:
                raise StructureError(f"protected set contains non-conv node {p}")

    def conv_indices(self) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if isinstance(nd, Conv2d)]

    @property
    def conv_depth(self) -> int:
        return len(self.conv_indices())

    def with_meta(self, **changes) -> "ModelGraph":
        return ModelGraph(self.nodes, self.conv_chain, self.protected, replace(self.meta, **changes))


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Field-by-field structural equality, including all tensor payloads."""
    if len(a.nodes) != len(b.nodes):
        return False
    if any(not layers_equal(x, y) for x, y in zip(a.nodes, b.nodes)):
        return False
    if a.conv_chain != b.conv_chain or a.protected != b.protected:
        return False
    ma, mb = a.meta, b.meta
    return (
        ma.name == mb.name
        and tuple(ma.input_shape) == tuple(mb.input_shape)
        and ma.class_count == mb.class_count
        and ma.metrics == mb.metrics
    )


def param_count(model: ModelGraph) -> int:
    """All weight and bias entries (conv/linear weight+bias, BN gamma+beta)."""
    return sum(int(p.size) for nd in model.nodes for p in layer_params(nd))


def nonzero_count(model: ModelGraph) -> int:
    return sum(int(np.count_nonzero(p)) for nd in model.nodes for p in layer_params(nd))


def _out_shape(node: Layer, idx: int, shape: tuple, shapes: list) -> tuple:
    """Shape produced by `node` given its input shape(s); raises ShapeError."""
    if isinstance(node, Conv2d):
        if len(shape) != 4:
            raise ShapeError(idx, f"Conv2d expects 4-D input, got {shape}")
        n, c, h, w = shape
        if c != node.in_channels:
            raise ShapeError(idx, f"Conv2d expects {node.in_channels} input channels, got {c}")
        oh, ow = kernels.conv2d_out_hw(
            h, w, node.weight.shape[2], node.weight.shape[3], node.stride, node.padding
        )
        if oh < 1 or ow < 1:
            raise ShapeError(idx, f"Conv2d output would be empty for input {shape}")
        return (n, node.out_channels, oh, ow)
    if isinstance(node, BatchNorm2d):
        if len(shape) != 4 or shape[1] != node.channels:
            raise ShapeError(idx, f"BatchNorm2d expects [n, {node.channels}, h, w], got {shape}")
        return shape
    if isinstance(node, (MaxPool2d, AvgPool2d)):
        if len(shape) != 4:
            raise ShapeError(idx, f"pool expects 4-D input, got {shape}")
        n, c, h, w = shape
        k, s = node.kernel_size, node.stride
        if h < k or w < k:
            raise ShapeError(idx, f"pool window {k} larger than input {shape}")
        return (n, c, (h - k) // s + 1, (w - k) // s + 1)
    if isinstance(node, Flatten):
        n = shape[0]
        feat = 1
        for d in shape[1:]:
            feat *= d
        return (n, feat)
    if isinstance(node, Linear):
        if len(shape) != 2:
            raise ShapeError(idx, f"Linear expects 2-D input, got {shape}")
        if shape[1] != node.in_features:
            raise ShapeError(idx, f"Linear expects {node.in_features} features, got {shape[1]}")
        return (shape[0], node.out_features)
    if isinstance(node, ReLU):
        return shape
    if isinstance(node, Add):
        other = shapes[node.other]
        if tuple(other) != tuple(shape):
            raise ShapeError(idx, f"Add operands differ: {shape} vs {other}")
        return shape
    raise ShapeError(idx, f"unknown layer kind {type(node).__name__}")


def infer_shapes(model: ModelGraph, batch_shape: tuple) -> list[tuple]:
    """Output shape of every node for the given input batch shape."""
    shapes: list[tuple] = []
    cur = tuple(batch_shape)
    for i, node in enumerate(model.nodes):
        cur = _out_shape(node, i, cur, shapes)
        shapes.append(cur)
    return shapes


def forward(model: ModelGraph, batch: np.ndarray) -> np.ndarray:
    """Run the model on a batch [n, c, h, w]; returns logits [n, class_count].

    Pure function: neither the model nor the batch is modified.  BatchNorm
    uses running statistics (inference mode).
    """
    x = np.ascontiguousarray(batch, dtype=np.float32)
    expect = (x.shape[0],) + tuple(model.meta.input_shape)
    if x.ndim != 4 or x.shape != expect:
        raise ShapeError(0, f"batch shape {x.shape} does not match model input {expect}")
    outputs: list[np.ndarray] = []
    cur = x
    for i, node in enumerate(model.nodes):
        _out_shape(node, i, cur.shape, [o.shape for o in outputs])  # shape check names the node
        if isinstance(node, Conv2d):
            cur = kernels.conv2d_forward(cur, node.weight, node.bias, node.stride, node.padding)
        elif isinstance(node, BatchNorm2d):
            scale = node.gamma / np.sqrt(node.running_var + np.float32(node.eps))
            cur = cur * scale[None, :, None, None] + (node.beta - node.running_mean * scale)[None, :, None, None]
            cur = cur.astype(np.float32)
        elif isinstance(node, ReLU):
            cur = np.maximum(cur, np.float32(0.0))
        elif isinstance(node, MaxPool2d):
            cur, _ = kernels.maxpool_forward(cur, node.kernel_size, node.stride)
        elif isinstance(node, AvgPool2d):
            cur = kernels.avgpool_forward(cur, node.kernel_size, node.stride)
        elif isinstance(node, Flatten):
            cur = cur.reshape(cur.shape[0], -1)
        elif isinstance(node, Linear):
            cur = kernels.linear_forward(cur, node.weight, node.bias)
        elif isinstance(node, Add):
            cur = cur + outputs[node.other]
        outputs.append(cur)
    return cur


def peak_memory_bytes(model: ModelGraph, batch_shape: tuple) -> int:
    """Analytic peak memory: all stored tensors plus the largest
    simultaneous input+output activation footprint of any node (float32)."""
    from .layers import layer_tensors

    param_bytes = sum(p.nbytes for nd in model.nodes for _, p in layer_tensors(nd))
    shapes = infer_shapes(model, batch_shape)
    peak_act = 0
    prev = tuple(batch_shape)
    for i, node in enumerate(model.nodes):
        in_elems = int(np.prod(prev))
        if isinstance(node, Add):
            in_elems += int(np.prod(shapes[node.other]))
        out_elems = int(np.prod(shapes[i]))
        peak_act = max(peak_act, (in_elems + out_elems) * 4)
        prev = shapes[i]
    return param_bytes + peak_act
