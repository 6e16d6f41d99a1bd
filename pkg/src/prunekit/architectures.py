"""Builders for the fixed toy CNN families the trainer supports.

All builders are deterministic per seed.  Conv layers in batch-norm
configurations carry no bias (the BN affine absorbs it); bias-free zero
channels stay exactly zero through ReLU, which is what makes them safely
removable later.
"""

from __future__ import annotations

import numpy as np

from .errors import StructureError
from .graph import ModelGraph, ModelMeta
from .layers import Add, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU

VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
VGG_SLIM_PLAN = (4, 4, "M", 8, 8, "M", 16, 16, "M", 16, 16)


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


def _identity_bn(ch: int) -> BatchNorm2d:
    return BatchNorm2d(np.ones(ch, np.float32), np.zeros(ch, np.float32),
                       np.zeros(ch, np.float32), np.ones(ch, np.float32))


def _plan_cnn(name: str, plan: tuple, *, classes: int, in_channels: int, size: int,
              batchnorm: bool, seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    nodes: list = []
    chain: dict[int, int] = {}
    prev_conv = None
    ch, spatial = in_channels, size
    for item in plan:
        if item == "M":
            nodes.append(MaxPool2d(2, 2))
            spatial //= 2
            continue
        w = _he_conv(rng, item, ch, 3)
        bias = None if batchnorm else np.zeros(item, np.float32)
        nodes.append(Conv2d(w, bias, stride=1, padding=1))
        idx = len(nodes) - 1
        if prev_conv is not None:
            chain[idx] = prev_conv
        prev_conv = idx
        if batchnorm:
            nodes.append(_identity_bn(item))
        nodes.append(ReLU())
        ch = item
    nodes.append(Flatten())
    feat = ch * spatial * spatial
    lw = (rng.standard_normal((classes, feat)) * np.sqrt(1.0 / feat)).astype(np.float32)
    nodes.append(Linear(lw, np.zeros(classes, np.float32)))
    meta = ModelMeta(name, (in_channels, size, size), classes)
    return ModelGraph(tuple(nodes), chain, frozenset(), meta)


def toy_cnn(classes: int = 8, in_channels: int = 3, size: int = 32,
            channels: tuple[int, ...] = (8, 16), batchnorm: bool = True, seed: int = 0) -> ModelGraph:
    """Small conv/pool stack for fast desk-scale training."""
    plan: list = []
    for c in channels:
        plan += [c, "M"]
    return _plan_cnn("toy_cnn", tuple(plan), classes=classes, in_channels=in_channels,
                     size=size, batchnorm=batchnorm, seed=seed)


def vgg_slim(width: int = 8, classes: int = 8, in_channels: int = 3, size: int = 32,
             batchnorm: bool = True, seed: int = 0) -> ModelGraph:
    """Eight-conv VGG-style stack; parameter count scales ~quadratically with width."""
    plan = tuple(c * width if c != "M" else "M" for c in VGG_SLIM_PLAN)
    return _plan_cnn(f"vgg_slim_w{width}", plan, classes=classes, in_channels=in_channels,
                     size=size, batchnorm=batchnorm, seed=seed)


def vgg16(classes: int = 10, in_channels: int = 3, size: int = 32,
          batchnorm: bool = True, seed: int = 0) -> ModelGraph:
    """Full-scale 13-conv VGG-16 with a single linear classifier head."""
    return _plan_cnn("vgg16", VGG16_PLAN, classes=classes, in_channels=in_channels,
                     size=size, batchnorm=batchnorm, seed=seed)


def _producing_convs(nodes: list, idx: int) -> set[int]:
    """Conv nodes whose output channel count the activation at `idx` carries."""
    node = nodes[idx]
    if isinstance(node, Conv2d):
        return {idx}
    if isinstance(node, Add):
        return _producing_convs(nodes, idx - 1) | _producing_convs(nodes, node.other)
    if idx == 0:
        return set()
    return _producing_convs(nodes, idx - 1)


def infer_protected(nodes: list) -> frozenset[int]:
    """Convs that feed a residual join, plus downsampling (strided) convs."""
    protected: set[int] = set()
    for i, node in enumerate(nodes):
        if isinstance(node, Add):
            protected |= _producing_convs(nodes, i - 1)
            protected |= _producing_convs(nodes, node.other)
        elif isinstance(node, Conv2d) and node.stride > 1:
            protected.add(i)
    return frozenset(protected)


def residual_cnn(classes: int = 8, in_channels: int = 3, size: int = 16,
                 width: int = 8, seed: int = 0) -> ModelGraph:
    """Residual toy model: identity-shortcut blocks joined by ``Add``,
    downsampling between blocks via a protected strided conv.  Convs
    feeding a join and the strided conv are protected; the block-interior
    convs stay prunable."""
    rng = np.random.default_rng(seed)
    nodes: list = []
    chain: dict[int, int] = {}

    def conv(out_ch, in_ch, k=3, stride=1, pad=1, pred=None):
        nodes.append(Conv2d(_he_conv(rng, out_ch, in_ch, k), None, stride=stride, padding=pad))
        idx = len(nodes) - 1
        if pred is not None:
            chain[idx] = pred
        return idx

    def block(width_in: int, pred: int) -> int:
        entry = len(nodes) - 1  # join operand: activation entering the block
        a = conv(width_in, width_in, pred=pred)
        nodes.append(_identity_bn(width_in))
        nodes.append(ReLU())
        b = conv(width_in, width_in, pred=a)
        nodes.append(_identity_bn(width_in))
        nodes.append(Add(entry))
        nodes.append(ReLU())
        return b

    stem = conv(width, in_channels)
    nodes.append(_identity_bn(width))
    nodes.append(ReLU())
    last = block(width, pred=stem)

    down = conv(2 * width, width, stride=2, pred=last)
    nodes.append(_identity_bn(2 * width))
    nodes.append(ReLU())
    block(2 * width, pred=down)

    nodes.append(Flatten())
    feat = 2 * width * (size // 2) * (size // 2)
    lw = (rng.standard_normal((classes, feat)) * np.sqrt(1.0 / feat)).astype(np.float32)
    nodes.append(Linear(lw, np.zeros(classes, np.float32)))
    meta = ModelMeta("residual_cnn", (in_channels, size, size), classes)
    return ModelGraph(tuple(nodes), chain, infer_protected(nodes), meta)


_BUILDERS = {
    "toy": toy_cnn,
    "vgg_slim": vgg_slim,
    "vgg16": vgg16,
    "residual": residual_cnn,
}


def build(name: str, **kwargs) -> ModelGraph:
    if name not in _BUILDERS:
        raise StructureError(f"unknown architecture {name!r}; choose from {sorted(_BUILDERS)}")
    return _BUILDERS[name](**kwargs)
