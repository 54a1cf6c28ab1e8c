"""Multi-head GATv2 layer over fusion graphs.

Only CLS nodes receive edges, so only CLS nodes are updated. For a CLS node k
with in-neighbours x, each head computes

    score(x -> k) = A . leaky_relu(W1 x + W2 k)
    alpha         = softmax of scores over the in-neighbours of k
    k'            = elu(sum_x alpha(x -> k) * W1 x)

Head outputs are concatenated and passed through an output affine map.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DimensionError
from .numerics import (
    concat,
    dropout,
    elu,
    gather_rows,
    leaky_relu,
    linear,
    matmul,
    mul,
    reshape,
    segment_softmax,
    segment_sum,
)


@dataclass
class GatHead:
    W1: object  # Tensor (d', d)
    W2: object  # Tensor (d', d)
    A: object  # Tensor (d',)

    def __post_init__(self):
        if self.W1.shape != self.W2.shape or self.A.shape != (self.W1.shape[0],):
            raise DimensionError(
                f"inconsistent head shapes W1={self.W1.shape} W2={self.W2.shape} A={self.A.shape}"
            )


@dataclass
class GatLayer:
    heads: list
    out_weight: object  # Tensor (d_out, H * d')
    out_bias: object = None
    slope: float = 0.2


def _check(head, graph):
    if graph.nodes.shape[1] != head.W1.shape[1]:
        raise DimensionError(f"node dim {graph.nodes.shape[1]} != head input dim {head.W1.shape[1]}")


def edge_scores(head, graph, slope=0.2, transformed=None):
    """One score per edge. ``transformed`` may pass a precomputed ``nodes @ W1.T``."""
    _check(head, graph)
    wx = transformed if transformed is not None else linear(graph.nodes, head.W1)
    wk = linear(graph.nodes, head.W2)
    z = gather_rows(wx, graph.src) + gather_rows(wk, graph.dst)
    a = reshape(head.A, (head.A.shape[0], 1))
    return reshape(matmul(leaky_relu(z, slope), a), (graph.n_edges,))


def attention_normalize(scores, graph):
    return segment_softmax(scores, graph.edge_segment, graph.n_cls)


def node_update(head, alpha, graph, transformed=None):
    """Updated CLS rows, ordered item-major then model."""
    wx = transformed if transformed is not None else linear(graph.nodes, head.W1)
    msg = mul(reshape(alpha, (graph.n_edges, 1)), gather_rows(wx, graph.src))
    return elu(segment_sum(msg, graph.edge_segment, graph.n_cls))


def head_forward(head, graph, slope=0.2):
    wx = linear(graph.nodes, head.W1)
    alpha = attention_normalize(edge_scores(head, graph, slope, transformed=wx), graph)
    return node_update(head, alpha, graph, transformed=wx)


def multi_head_forward(layer, graph, rng=None, p=0.0):
    """Return a (n_cls, d_out) Tensor; row ``b * n_models + j`` is model j's CLS of item b."""
    outs = [head_forward(h, graph, layer.slope) for h in layer.heads]
    cat = concat(outs, axis=1) if len(outs) > 1 else outs[0]
    return dropout(linear(cat, layer.out_weight, layer.out_bias), p, rng)


def cls_outputs(graph, out):
    """Split a single-item layer output into ``{model_id: vector}``."""
    return {m: out.values[j] for j, m in enumerate(graph.model_ids)}
