"""Sparsity masks and magnitude ranking.

A mask maps a prunable node index (conv or linear) to a float32 0/1 array
shaped like that node's weight.  Biases and batch-norm parameters are
never masked.  Ranking is global across layers by default, with a
per-layer option; ties break on ascending flat parameter index, so masks
are fully deterministic.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, StructureError
from .graph import ModelGraph
from .layers import Conv2d, Linear

log = logging.getLogger(__name__)

SparsityMask = dict[int, np.ndarray]

MASK_MAGIC = b"DMSK"


def prunable_nodes(model: ModelGraph) -> list[int]:
    return [i for i, nd in enumerate(model.nodes) if isinstance(nd, (Conv2d, Linear))]


def full_mask(model: ModelGraph) -> SparsityMask:
    return {i: np.ones_like(model.nodes[i].weight) for i in prunable_nodes(model)}


def check_mask(model: ModelGraph, mask: SparsityMask) -> None:
    for idx, m in mask.items():
        if idx not in prunable_nodes(model):
            raise StructureError(f"mask entry for non-prunable node {idx}")
        if m.shape != model.nodes[idx].weight.shape:
            raise StructureError(
                f"mask shape {m.shape} != weight shape {model.nodes[idx].weight.shape} at node {idx}"
            )


def prunable_param_count(model: ModelGraph) -> int:
    """Entries in maskable tensors (conv/linear weights, biases excluded)."""
    return sum(int(model.nodes[i].weight.size) for i in prunable_nodes(model))


def prunable_nonzero_count(model: ModelGraph) -> int:
    return sum(int(np.count_nonzero(model.nodes[i].weight)) for i in prunable_nodes(model))


def kept_count(mask: SparsityMask) -> int:
    return sum(int(m.sum()) for m in mask.values())


def masks_equal(a: SparsityMask, b: SparsityMask) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _rank_subset(vals: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Indices (into vals) to newly mask: the lowest (1-keep) by magnitude,
    ties broken by ascending position via the stable sort."""
    n_unmasked = vals.size
    n_keep = int(round(keep_fraction * n_unmasked))
    n_prune = n_unmasked - n_keep
    order = np.argsort(vals, kind="stable")
    return order[:n_prune]


def rank_and_mask(
    model: ModelGraph,
    current: SparsityMask,
    keep_fraction: float,
    scope: str = "global",
) -> SparsityMask:
    """Magnitude-rank the currently unmasked conv/linear weights and mask
    the lowest (1 - keep_fraction) of them.  Masks are monotone: anything
    already masked stays masked."""
    if not 0 < keep_fraction < 1:
        raise ValueError("keep_fraction must be in (0, 1)")
    if scope not in ("global", "layer"):
        raise ValueError("scope must be 'global' or 'layer'")
    check_mask(model, current)
    nodes = sorted(current.keys())
    flat_w = [np.abs(model.nodes[i].weight.reshape(-1)) for i in nodes]
    flat_m = [current[i].reshape(-1).astype(bool) for i in nodes]

    new_mask = {i: current[i].copy() for i in nodes}
    if scope == "global":
        unmasked = np.concatenate([np.flatnonzero(m) + off for m, off in
                                   zip(flat_m, np.cumsum([0] + [w.size for w in flat_w[:-1]]))])
        vals = np.concatenate(flat_w)[unmasked]
        doomed = unmasked[_rank_subset(vals, keep_fraction)]
        offsets = np.cumsum([0] + [w.size for w in flat_w])
        for pos, i in enumerate(nodes):
            local = doomed[(doomed >= offsets[pos]) & (doomed < offsets[pos + 1])] - offsets[pos]
            flat = new_mask[i].reshape(-1)
            flat[local] = 0.0
    else:
        for pos, i in enumerate(nodes):
            unmasked = np.flatnonzero(flat_m[pos])
            doomed = unmasked[_rank_subset(flat_w[pos][unmasked], keep_fraction)]
            flat = new_mask[i].reshape(-1)
            flat[doomed] = 0.0

    for i in nodes:
        if new_mask[i].sum() == 0:
            log.warning("layer collapse: mask for node %d keeps zero weights", i)
    return new_mask


def apply_mask(model: ModelGraph, mask: SparsityMask) -> ModelGraph:
    """Return a copy of the model with masked weights set to exactly zero."""
    check_mask(model, mask)
    nodes = list(model.nodes)
    for idx, m in mask.items():
        nd = nodes[idx]
        w = nd.weight * m
        if isinstance(nd, Conv2d):
            nodes[idx] = Conv2d(w, nd.bias, stride=nd.stride, padding=nd.padding)
        else:
            nodes[idx] = Linear(w, nd.bias)
    return ModelGraph(tuple(nodes), model.conv_chain, model.protected, model.meta)


def save_mask(mask: SparsityMask, path: str | Path) -> None:
    """Bit-packed sidecar: magic, count, then (node, numel, packed bits) per entry."""
    parts = [MASK_MAGIC, struct.pack("<HI", 1, len(mask))]
    for idx in sorted(mask):
        m = mask[idx]
        bits = np.packbits(m.reshape(-1).astype(np.uint8))
        parts.append(struct.pack("<IQ", idx, m.size))
        parts.append(bits.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_mask(path: str | Path, model: ModelGraph) -> SparsityMask:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise FormatError("bad magic; not a mask sidecar", offset=0)
    pos = 4
    (version, count) = struct.unpack_from("<HI", data, pos)
    pos += 6
    if version != 1:
        raise FormatError(f"unsupported mask version {version}", offset=4)
    mask: SparsityMask = {}
    for _ in range(count):
        if pos + 12 > len(data):
            raise FormatError("truncated mask entry header", offset=pos)
        idx, numel = struct.unpack_from("<IQ", data, pos)
        pos += 12
        nbytes = (numel + 7) // 8
        if pos + nbytes > len(data):
            raise FormatError("truncated mask bits", offset=pos)
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos))[:numel]
        pos += nbytes
        shape = model.nodes[idx].weight.shape
        mask[idx] = bits.reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes in mask sidecar", offset=pos)
    check_mask(model, mask)
    return mask
