"""Iterative magnitude pruning with weight rewinding.

Each iteration halves the surviving weight count (so variant i sits at
compression ratio ~2^i), rewinds all parameters to the epoch-k checkpoint
of the first run, and retrains under the new mask.  Variant 0 is the
dense model.  Test accuracy and the measured compression ratio of every
variant are recorded in its metadata.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .data import Dataset
from .graph import ModelGraph
from .masks import (
    SparsityMask,
    full_mask,
    prunable_nonzero_count,
    prunable_param_count,
    rank_and_mask,
)
from .training import Checkpoint, TrainConfig, evaluate, train, train_from_snapshot

log = logging.getLogger(__name__)

KEEP_PER_ITERATION = 0.5  # the 2^n portfolio schedule fixes 50% per iteration


def _with_metrics(model: ModelGraph, variant: int, data: Dataset, base_name: str) -> ModelGraph:
    total = prunable_param_count(model)
    nonzero = prunable_nonzero_count(model)
    acc = evaluate(model, data.test_x, data.test_y)
    metrics = {
        "variant": variant,
        "test_accuracy": acc,
        "compression_ratio": total / max(nonzero, 1),
        "nonzero_fraction": nonzero / total,
    }
    return model.with_meta(name=f"{base_name}-v{variant}", metrics=metrics)


def imp_portfolio(
    arch: ModelGraph,
    data: Dataset,
    cfg: TrainConfig,
    log_dir: str | Path | None = None,
    scope: str = "global",
) -> list[tuple[ModelGraph, SparsityMask]]:
    """Train the dense model once, then iterate mask/rewind/retrain.

    Returns n+1 (model, mask) pairs ordered dense-first.
    """
    base_name = arch.meta.name

    def log_path(i: int):
        if log_dir is None:
            return None
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        return Path(log_dir) / f"variant_{i:02d}_train.csv"

    mask = full_mask(arch)
    model, ckpts = train(arch, data, cfg, mask, log_path(0))
    rewind = _checkpoint_at(ckpts, cfg.rewind_epoch)
    model = _with_metrics(model, 0, data, base_name)
    variants: list[tuple[ModelGraph, SparsityMask]] = [(model, mask)]

    for i in range(1, cfg.portfolio_depth + 1):
        mask = rank_and_mask(model, mask, KEEP_PER_ITERATION, scope=scope)
        model, _ = train_from_snapshot(model, rewind.weights, data, cfg, mask, log_path(i))
        model = _with_metrics(model, i, data, base_name)
        log.info("variant %d: ratio %.1f, accuracy %.4f", i,
                 model.meta.metrics["compression_ratio"], model.meta.metrics["test_accuracy"])
        variants.append((model, mask))
    return variants


def _checkpoint_at(ckpts: list[Checkpoint], epoch: int) -> Checkpoint:
    for c in ckpts:
        if c.epoch == epoch:
            return c
    raise RuntimeError(f"no checkpoint recorded for rewind epoch {epoch}")
