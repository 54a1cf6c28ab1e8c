"""Token projection and the directed token-to-CLS fusion graph.

Within one item, the nodes are the projected token rows of every upstream
model, concatenated in model order. Every node sends an edge to the CLS node
(row 0) of every model, itself included, and there are no other edges. Batched
graphs are disjoint unions with an item offset table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StructuralError
from .numerics import Tensor, concat, dropout, gather_rows, linear


@dataclass
class ProjectionParams:
    """Affine maps into the shared node space, keyed by (model id, modality)."""

    maps: dict  # (model_id, modality) -> (weight Tensor [d_shared, d_tok], bias Tensor | None)

    def get(self, model_id, modality):
        try:
            return self.maps[(model_id, modality)]
        except KeyError:
            raise ConfigError(f"no projection for model {model_id!r} ({modality})") from None


def project_tokens(record, params, rng=None, p=0.0):
    weight, bias = params.get(record.model_id, record.modality)
    if record.tokens.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"{record.model_id}: token dim {record.tokens.shape[1]} != projection input {weight.shape[1]}"
        )
    return dropout(linear(Tensor(record.tokens), weight, bias), p, rng)


@dataclass
class FusionGraph:
    nodes: Tensor  # (n_nodes, d_shared)
    src: np.ndarray  # (E,) node index
    dst: np.ndarray  # (E,) node index, always a CLS node
    cls_nodes: np.ndarray  # (n_items, n_models) node index of each model's CLS
    model_ids: tuple
    item_offsets: np.ndarray  # (n_items + 1,) node offsets

    @property
    def n_items(self):
        return self.cls_nodes.shape[0]

    @property
    def n_cls(self):
        return self.cls_nodes.size

    @property
    def n_edges(self):
        return self.src.shape[0]

    @property
    def edge_segment(self):
        """Destination of each edge as a CLS slot (item-major, model-minor)."""
        slot = np.full(self.nodes.shape[0], -1, dtype=np.int64)
        slot[self.cls_nodes.ravel()] = np.arange(self.n_cls)
        seg = slot[self.dst]
        if np.any(seg < 0):
            raise StructuralError("edge points at a non-CLS node")
        return seg

    @property
    def cls_index(self):
        if self.n_items != 1:
            raise StructuralError("cls_index is defined for single-item graphs; use cls_nodes")
        return {m: int(i) for m, i in zip(self.model_ids, self.cls_nodes[0])}


def _item_edges(sizes, offset):
    """Edges for one item whose models contribute ``sizes`` rows, starting at ``offset``."""
    starts = offset + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    n = int(np.sum(sizes))
    nodes = np.arange(offset, offset + n, dtype=np.int64)
    src = np.tile(nodes, len(sizes))
    dst = np.repeat(starts, n)
    return src, dst, starts


def build_graph(projected):
    """Build the fusion graph for one item from ``{model_id: (N+1, d) Tensor}``."""
    if not projected:
        raise StructuralError("fusion graph needs at least one model")
    model_ids = tuple(projected)
    mats = [projected[m] for m in model_ids]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise DimensionError(f"projected features disagree on shared dim: {sorted(dims)}")
    sizes = [m.shape[0] for m in mats]
    src, dst, cls = _item_edges(sizes, 0)
    return FusionGraph(
        nodes=concat(mats, axis=0) if len(mats) > 1 else mats[0],
        src=src,
        dst=dst,
        cls_nodes=cls[None, :],
        model_ids=model_ids,
        item_offsets=np.array([0, sum(sizes)], dtype=np.int64),
    )


def batch_graphs(graphs):
    """Disjoint union of item graphs; indices are shifted by each item's offset."""
    if not graphs:
        raise StructuralError("cannot batch an empty list of graphs")
    model_ids = graphs[0].model_ids
    dims = {g.nodes.shape[1] for g in graphs}
    if len(dims) != 1:
        raise DimensionError(f"graphs disagree on shared dim: {sorted(dims)}")
    offsets = [0]
    for g in graphs:
        if g.model_ids != model_ids:
            raise StructuralError("graphs in a batch must use the same models")
        offsets.append(offsets[-1] + g.nodes.shape[0])
    shift = np.asarray(offsets[:-1], dtype=np.int64)
    return FusionGraph(
        nodes=concat([g.nodes for g in graphs], axis=0) if len(graphs) > 1 else graphs[0].nodes,
        src=np.concatenate([g.src + s for g, s in zip(graphs, shift)]),
        dst=np.concatenate([g.dst + s for g, s in zip(graphs, shift)]),
        cls_nodes=np.concatenate([g.cls_nodes + s for g, s in zip(graphs, shift)]),
        model_ids=model_ids,
        item_offsets=np.asarray(offsets, dtype=np.int64),
    )


def build_batch(items, params, model_ids, modality, rng=None, p=0.0):
    """Project and batch many items at once.

    ``items`` is a list of ``{model_id: FeatureRecord}``. Produces the same
    graph as ``batch_graphs([build_graph(...) for each item])`` but runs one
    projection per model over the stacked tokens.
    """
    if not model_ids:
        raise StructuralError("fusion graph needs at least one model")
    sizes = np.array([[it[m].tokens.shape[0] for m in model_ids] for it in items], dtype=np.int64)
    stacks = []
    for j, m in enumerate(model_ids):
        weight, bias = params.get(m, modality)
        tokens = np.concatenate([it[m].tokens for it in items], axis=0)
        if tokens.shape[1] != weight.shape[1]:
            raise DimensionError(f"{m}: token dim {tokens.shape[1]} != projection input {weight.shape[1]}")
        stacks.append(dropout(linear(Tensor(tokens), weight, bias), p, rng))
    # stacked order is model-major; graph order is item-major
    model_base = np.concatenate([[0], np.cumsum(sizes.sum(axis=0))[:-1]])
    row_start = np.vstack([np.zeros(len(model_ids), dtype=np.int64), np.cumsum(sizes, axis=0)[:-1]])
    perm = np.concatenate([
        np.arange(sizes[b, j], dtype=np.int64) + model_base[j] + row_start[b, j]
        for b in range(len(items)) for j in range(len(model_ids))
    ])
    allrows = concat(stacks, axis=0) if len(stacks) > 1 else stacks[0]
    nodes = gather_rows(allrows, perm)
    item_sizes = sizes.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(item_sizes)]).astype(np.int64)
    src, dst, cls = zip(*(_item_edges(sizes[b], offsets[b]) for b in range(len(items))))
    return FusionGraph(
        nodes=nodes,
        src=np.concatenate(src),
        dst=np.concatenate(dst),
        cls_nodes=np.stack(cls),
        model_ids=tuple(model_ids),
        item_offsets=offsets,
    )
