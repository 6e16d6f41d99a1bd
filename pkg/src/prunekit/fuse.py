"""Conv + batch-norm fusion.

Folds each BatchNorm2d into the conv immediately preceding it:

    scale_o = gamma_o / sqrt(var_o + eps)
    W'[o]   = W[o] * scale_o
    b'_o    = (b_o - mean_o) * scale_o + beta_o

The fused conv always carries a bias.  Node indices shift when BN nodes
drop out; conv-chain edges, the protected set, and Add references are
remapped accordingly.
"""

from __future__ import annotations

import numpy as np

from .errors import StructureError
from .graph import ModelGraph
from .layers import Add, BatchNorm2d, Conv2d


def fuse_conv_bn(model: ModelGraph) -> ModelGraph:
    nodes = model.nodes
    follows_bn = {i for i in range(len(nodes) - 1) if isinstance(nodes[i + 1], BatchNorm2d)}
    for i, nd in enumerate(nodes):
        if isinstance(nd, Add) and nd.other in follows_bn:
            raise StructureError(
                f"Add at node {i} taps the pre-BN output of node {nd.other}; cannot fuse"
            )

    new_nodes: list = []
    index_map: dict[int, int] = {}
    for i, nd in enumerate(nodes):
        if isinstance(nd, BatchNorm2d):
            if not new_nodes or not isinstance(new_nodes[-1], Conv2d) or i - 1 not in index_map \
                    or index_map[i - 1] != len(new_nodes) - 1:
                raise StructureError(f"BatchNorm2d at node {i} does not follow a Conv2d")
            conv: Conv2d = new_nodes[-1]
            if conv.out_channels != nd.channels:
                raise StructureError(
                    f"BatchNorm2d at node {i} has {nd.channels} channels, conv has {conv.out_channels}"
                )
            scale = (nd.gamma.astype(np.float64)
                     / np.sqrt(nd.running_var.astype(np.float64) + nd.eps))
            w = conv.weight.astype(np.float64) * scale[:, None, None, None]
            b0 = conv.bias.astype(np.float64) if conv.bias is not None else np.zeros(conv.out_channels)
            b = (b0 - nd.running_mean.astype(np.float64)) * scale + nd.beta.astype(np.float64)
            new_nodes[-1] = Conv2d(w.astype(np.float32), b.astype(np.float32),
                                   stride=conv.stride, padding=conv.padding)
            # the BN output is now the fused conv's output
            index_map[i] = len(new_nodes) - 1
            continue
        if isinstance(nd, Add):
            nd = Add(index_map[nd.other])
        new_nodes.append(nd)
        index_map[i] = len(new_nodes) - 1

    chain = {index_map[dst]: index_map[src] for dst, src in model.conv_chain.items()}
    protected = frozenset(index_map[p] for p in model.protected)
    return ModelGraph(tuple(new_nodes), chain, protected, model.meta)
