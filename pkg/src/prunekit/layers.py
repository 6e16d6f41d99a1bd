"""Layer node types.

All tensors are float32 numpy arrays with 1-4 dimensions, frozen
(non-writeable) once attached to a layer.  Layers themselves are frozen
dataclasses; a model is rebuilt rather than mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import StructureError

KINDS = ("Conv2d", "BatchNorm2d", "Linear", "ReLU", "MaxPool2d", "AvgPool2d", "Flatten", "Add")


def freeze(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate and freeze an array as a model tensor (float32, 1-4 dims).

    Copies unless the input is already a frozen tensor, so callers keep
    ownership of writable arrays they pass in.
    """
    a = np.asarray(a)
    if not 1 <= a.ndim <= 4:
        raise StructureError(f"{name}: tensors must have 1-4 dimensions, got {a.ndim}")
    if a.dtype == np.float32 and a.flags.c_contiguous and not a.flags.writeable:
        return a
    a = np.array(a, dtype=np.float32, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # [out_ch, in_ch, kh, kw]
    bias: np.ndarray | None = None  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight", freeze(self.weight, "Conv2d.weight"))
        if self.weight.ndim != 4:
            raise StructureError("Conv2d.weight must be [out_ch, in_ch, kh, kw]")
        if self.bias is not None:
            bias = freeze(self.bias, "Conv2d.bias")
            if bias.shape != (self.out_channels,):
                raise StructureError(
                    f"Conv2d.bias length {bias.shape[0]} != out_ch {self.out_channels}"
                )
            object.__setattr__(self, "bias", bias)
        if self.stride < 1 or self.padding < 0:
            raise StructureError("Conv2d: stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class BatchNorm2d:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        ch = None
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = freeze(getattr(self, name), f"BatchNorm2d.{name}")
            if arr.ndim != 1:
                raise StructureError(f"BatchNorm2d.{name} must be 1-D")
            if ch is None:
                ch = arr.shape[0]
            elif arr.shape[0] != ch:
                raise StructureError("BatchNorm2d parameter lengths disagree")
            object.__setattr__(self, name, arr)
        if np.any(self.running_var < 0):
            raise StructureError("BatchNorm2d.running_var entries must be >= 0")
        # eps is stored as f32 on disk; coerce now so round-trips are exact
        object.__setattr__(self, "eps", float(np.float32(self.eps)))
        if not self.eps > 0:
            raise StructureError("BatchNorm2d.eps must be > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True, eq=False)
class Linear:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "weight", freeze(self.weight, "Linear.weight"))
        if self.weight.ndim != 2:
            raise StructureError("Linear.weight must be [out_features, in_features]")
        if self.bias is not None:
            bias = freeze(self.bias, "Linear.bias")
            if bias.shape != (self.weight.shape[0],):
                raise StructureError("Linear.bias length != out_features")
            object.__setattr__(self, "bias", bias)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel_size: int
    stride: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise StructureError("MaxPool2d: kernel_size and stride must be >= 1")


@dataclass(frozen=True)
class AvgPool2d:
    kernel_size: int
    stride: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise StructureError("AvgPool2d: kernel_size and stride must be >= 1")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Add:
    other: int  # index of the second input node; must precede this node

    def __post_init__(self):
        if self.other < 0:
            raise StructureError("Add.other must be a non-negative node index")


Layer = Conv2d | BatchNorm2d | Linear | ReLU | MaxPool2d | AvgPool2d | Flatten | Add


def kind_of(layer: Layer) -> str:
    return type(layer).__name__


def layer_tensors(layer: Layer) -> list[tuple[str, np.ndarray]]:
    """Named tensors of a layer, in a fixed order (weights, then bias/BN stats)."""
    if isinstance(layer, Conv2d) or isinstance(layer, Linear):
        out = [("weight", layer.weight)]
        if layer.bias is not None:
            out.append(("bias", layer.bias))
        return out
    if isinstance(layer, BatchNorm2d):
        return [
            ("gamma", layer.gamma),
            ("beta", layer.beta),
            ("running_mean", layer.running_mean),
            ("running_var", layer.running_var),
        ]
    return []


def layer_params(layer: Layer) -> list[np.ndarray]:
    """Learnable parameters: conv/linear weight+bias, BN gamma+beta."""
    if isinstance(layer, (Conv2d, Linear)):
        return [layer.weight] + ([layer.bias] if layer.bias is not None else [])
    if isinstance(layer, BatchNorm2d):
        return [layer.gamma, layer.beta]
    return []


def layers_equal(a: Layer, b: Layer) -> bool:
    """Structural equality: same kind, hyperparameters, and bit-equal tensors."""
    if type(a) is not type(b):
        return False
    for f in fields(a):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
            if va is None or vb is None:
                return False
            if va.shape != vb.shape or not np.array_equal(va, vb):
                return False
        elif va != vb:
            return False
    return True
