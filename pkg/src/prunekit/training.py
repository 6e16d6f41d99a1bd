"""SGD training for the fixed toy architectures.

The trainer keeps its own mutable copies of all parameters (model graphs
are immutable) and implements forward/backward per layer kind.  Only
plain sequential models are trainable; residual graphs are inference-only.
Sparsity masks are re-applied after every optimiser step, so masked
weights are exactly zero in every snapshot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DivergenceError, StructureError
from .graph import ModelGraph, forward as graph_forward
from .layers import (
    Add,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    layer_tensors,
)
from .data import Dataset

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    milestone_steps: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    portfolio_depth: int = 4  # number of pruning iterations (n)
    rewind_epoch: int = 1  # checkpoint epoch (k) used for weight rewinding
    seed: int = 0

    def __post_init__(self):
        if self.portfolio_depth < 1:
            raise ValueError("portfolio_depth must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        # rewind epoch 0 (init weights) is always valid, even for 0-epoch runs
        if not 0 <= self.rewind_epoch <= max(self.epochs - 1, 0):
            raise ValueError("rewind_epoch must satisfy 0 <= k < epochs")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestone_steps if m <= epoch)
        return self.learning_rate * self.gamma**drops


Snapshot = list[dict[str, np.ndarray]]


@dataclass
class Checkpoint:
    epoch: int
    weights: Snapshot


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), y] + 1e-300).mean())
    d = p
    d[np.arange(n), y] -= 1.0
    return loss, (d / n).astype(np.float32)


class _Node:
    """Mutable training-time counterpart of one graph node."""

    def __init__(self, layer):
        self.layer = layer
        self.params: dict[str, np.ndarray] = {
            name: tensor.copy() for name, tensor in layer_tensors(layer)
        }
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def learnable(self) -> list[str]:
        if isinstance(self.layer, (Conv2d, Linear)):
            return [k for k in ("weight", "bias") if k in self.params]
        if isinstance(self.layer, BatchNorm2d):
            return ["gamma", "beta"]
        return []

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        lay = self.layer
        if isinstance(lay, Conv2d):
            self.cache = x
            return kernels.conv2d_forward(x, self.params["weight"], self.params.get("bias"),
                                          lay.stride, lay.padding)
        if isinstance(lay, Linear):
            self.cache = x
            return kernels.linear_forward(x, self.params["weight"], self.params.get("bias"))
        if isinstance(lay, BatchNorm2d):
            return self._bn_forward(x, training)
        if isinstance(lay, ReLU):
            out = np.maximum(x, np.float32(0.0))
            self.cache = out
            return out
        if isinstance(lay, MaxPool2d):
            out, arg = kernels.maxpool_forward(x, lay.kernel_size, lay.stride)
            self.cache = (arg, x.shape[2:])
            return out
        if isinstance(lay, AvgPool2d):
            self.cache = x.shape[2:]
            return kernels.avgpool_forward(x, lay.kernel_size, lay.stride)
        if isinstance(lay, Flatten):
            self.cache = x.shape
            return x.reshape(x.shape[0], -1)
        raise StructureError(f"layer kind {type(lay).__name__} is not trainable")

    def _bn_forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        p = self.params
        eps = np.float32(self.layer.eps)
        if not training:
            scale = p["gamma"] / np.sqrt(p["running_var"] + eps)
            return (x * scale[None, :, None, None]
                    + (p["beta"] - p["running_mean"] * scale)[None, :, None, None]).astype(np.float32)
        axes = (0, 2, 3)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes, dtype=np.float64)
        var = x.astype(np.float64).var(axis=axes)
        inv_std = (1.0 / np.sqrt(var + float(eps))).astype(np.float32)
        xhat = ((x - mu[None, :, None, None].astype(np.float32))
                * inv_std[None, :, None, None]).astype(np.float32)
        out = p["gamma"][None, :, None, None] * xhat + p["beta"][None, :, None, None]
        unbiased = var * (n / max(n - 1, 1))
        p["running_mean"][:] = (1 - BN_MOMENTUM) * p["running_mean"] + BN_MOMENTUM * mu
        p["running_var"][:] = (1 - BN_MOMENTUM) * p["running_var"] + BN_MOMENTUM * unbiased
        self.cache = (xhat, inv_std)
        return out.astype(np.float32)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        lay = self.layer
        if isinstance(lay, Conv2d):
            dx, dw, db = kernels.conv2d_backward(self.cache, self.params["weight"], dout,
                                                 lay.stride, lay.padding)
            self.grads["weight"] = dw
            if "bias" in self.params:
                self.grads["bias"] = db
            return dx
        if isinstance(lay, Linear):
            dx, dw, db = kernels.linear_backward(self.cache, self.params["weight"], dout)
            self.grads["weight"] = dw
            if "bias" in self.params:
                self.grads["bias"] = db
            return dx
        if isinstance(lay, BatchNorm2d):
            xhat, inv_std = self.cache
            axes = (0, 2, 3)
            n = dout.shape[0] * dout.shape[2] * dout.shape[3]
            self.grads["gamma"] = (dout * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32)
            self.grads["beta"] = dout.sum(axis=axes, dtype=np.float64).astype(np.float32)
            dxhat = dout * self.params["gamma"][None, :, None, None]
            s1 = dxhat.sum(axis=axes, dtype=np.float64).astype(np.float32)
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32)
            dx = (inv_std[None, :, None, None] / n) * (
                n * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
            )
            return dx.astype(np.float32)
        if isinstance(lay, ReLU):
            return np.where(self.cache > 0, dout, np.float32(0.0))
        if isinstance(lay, MaxPool2d):
            arg, in_hw = self.cache
            return kernels.maxpool_backward(dout, arg, lay.kernel_size, lay.stride, in_hw)
        if isinstance(lay, AvgPool2d):
            return kernels.avgpool_backward(dout, lay.kernel_size, lay.stride, self.cache)
        if isinstance(lay, Flatten):
            return dout.reshape(self.cache)
        raise StructureError(f"layer kind {type(lay).__name__} is not trainable")


class Trainer:
    def __init__(self, model: ModelGraph):
        if any(isinstance(nd, Add) for nd in model.nodes):
            raise StructureError("trainer supports plain sequential models only (no residual joins)")
        self.model = model
        self.nodes = [_Node(nd) for nd in model.nodes]
        self.velocity = [
            {k: np.zeros_like(n.params[k]) for k in n.learnable()} for n in self.nodes
        ]

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        for node in self.nodes:
            x = node.forward(x, training)
        return x

    def backward(self, dout: np.ndarray) -> None:
        for node in reversed(self.nodes):
            dout = node.backward(dout)

    def step(self, lr: float, momentum: float, weight_decay: float) -> None:
        for node, vel in zip(self.nodes, self.velocity):
            for k in node.learnable():
                g = node.grads[k] + np.float32(weight_decay) * node.params[k]
                vel[k] = np.float32(momentum) * vel[k] + g
                node.params[k] -= np.float32(lr) * vel[k]

    def apply_mask(self, mask: dict[int, np.ndarray]) -> None:
        for idx, m in mask.items():
            self.nodes[idx].params["weight"] *= m

    def snapshot(self) -> Snapshot:
        return [{k: v.copy() for k, v in n.params.items()} for n in self.nodes]

    def restore(self, snap: Snapshot) -> None:
        for node, entry in zip(self.nodes, snap):
            for k, v in entry.items():
                node.params[k] = v.copy()

    def materialize(self) -> ModelGraph:
        """Build an immutable graph from the current parameters."""
        nodes = []
        for n in self.nodes:
            lay = n.layer
            if isinstance(lay, Conv2d):
                nodes.append(Conv2d(n.params["weight"], n.params.get("bias"),
                                    stride=lay.stride, padding=lay.padding))
            elif isinstance(lay, Linear):
                nodes.append(Linear(n.params["weight"], n.params.get("bias")))
            elif isinstance(lay, BatchNorm2d):
                nodes.append(BatchNorm2d(n.params["gamma"], n.params["beta"],
                                         n.params["running_mean"], n.params["running_var"],
                                         eps=lay.eps))
            else:
                nodes.append(lay)
        return ModelGraph(tuple(nodes), self.model.conv_chain, self.model.protected, self.model.meta)


def evaluate(model: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 128) -> float:
    """Top-1 accuracy of the inference-mode forward pass."""
    hits = 0
    for lo in range(0, len(x), batch_size):
        logits = graph_forward(model, x[lo : lo + batch_size])
        hits += int((logits.argmax(axis=1) == y[lo : lo + batch_size]).sum())
    return hits / len(x)


def train(
    model: ModelGraph,
    data: Dataset,
    cfg: TrainConfig,
    mask: dict[int, np.ndarray] | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelGraph, list[Checkpoint]]:
    """SGD with momentum, weight decay, and milestone LR decay.

    Returns the trained model and the checkpoint list (always containing
    the rewind epoch k; epoch 0 means the pre-training weights).
    """
    trainer = Trainer(model)
    mask = mask or {}
    trainer.apply_mask(mask)

    checkpoints: list[Checkpoint] = []
    if cfg.rewind_epoch == 0:
        checkpoints.append(Checkpoint(0, trainer.snapshot()))

    log_rows = []
    rng = np.random.default_rng(cfg.seed)
    n_train = len(data.train_x)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            logits = trainer.forward(data.train_x[sel], training=True)
            loss, dlogits = softmax_xent(logits, data.train_y[sel])
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            losses.append(loss)
            trainer.backward(dlogits)
            trainer.step(lr, cfg.momentum, cfg.weight_decay)
            trainer.apply_mask(mask)
        if epoch + 1 == cfg.rewind_epoch:
            checkpoints.append(Checkpoint(epoch + 1, trainer.snapshot()))
        test_acc = evaluate(trainer.materialize(), data.test_x, data.test_y)
        log_rows.append((epoch, float(np.mean(losses)), test_acc))

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "test_accuracy"])
            writer.writerows(log_rows)

    return trainer.materialize(), checkpoints


def train_from_snapshot(
    model: ModelGraph,
    snap: Snapshot,
    data: Dataset,
    cfg: TrainConfig,
    mask: dict[int, np.ndarray],
    log_path: str | Path | None = None,
) -> tuple[ModelGraph, list[Checkpoint]]:
    """Rewind all parameters to `snap`, then train under `mask`."""
    trainer = Trainer(model)
    trainer.restore(snap)
    return train(trainer.materialize(), data, cfg, mask, log_path)
