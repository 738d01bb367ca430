"""Relational graph convolution over a knowledge graph or sub-KG.

One layer computes, for every entity ``i``::

    e_i' = relu( sum_r sum_{j in N_i^r} c_ir * e_j W_r  +  e_i W_0 )

with ``N_i^r`` the tails of facts ``(i, r, j)`` and ``c_ir = 1`` (``"none"``)
or ``1 / |N_i^r|`` (``"mean"``). Embeddings are row vectors.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .numerics import ParameterSet, ShapeError, Tensor, add_n, gather_rows, matmul, relu, spmm

NORMALIZATIONS = ("none", "mean")


class GraphView:
    """Fixed entity ordering plus per-relation adjacency for one graph.

    ``graph`` is anything exposing ``entity_ids`` and ``edges_by_relation()``
    (a :class:`~slak.kg.KnowledgeGraph` or :class:`~slak.metapath.SubKG`).
    ``extra_entities`` become isolated nodes, e.g. regions that lie on no
    meta-path instance.
    """

    def __init__(self, graph, extra_entities: Iterable[str] = (), order: Sequence[str] | None = None):
        ids = set(graph.entity_ids) | set(extra_entities)
        if order is not None:
            if set(order) != ids or len(order) != len(ids):
                raise ValueError("order must be a permutation of the graph's entities")
            self.ids = list(order)
        else:
            self.ids = sorted(ids)
        self.index = {e: i for i, e in enumerate(self.ids)}
        self._edges = graph.edges_by_relation()
        self._cache: dict[tuple[str, str], tuple[sparse.csr_matrix, sparse.csr_matrix]] = {}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def relations(self) -> list[str]:
        return sorted(self._edges)

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[e] for e in ids], dtype=np.int64)

    def aggregator(self, relation: str, normalization: str):
        """``(expand, gather)`` with ``expand @ (gather @ H)`` equal to the normalized ``A_r @ H``.

        ``gather`` only has rows for heads of ``relation``, which keeps the
        dense per-relation product small.
        """
        key = (relation, normalization)
        if key not in self._cache:
            edges = self._edges.get(relation, [])
            heads = sorted({self.index[h] for h, _ in edges})
            pos = {h: k for k, h in enumerate(heads)}
            rows = [pos[self.index[h]] for h, _ in edges]
            cols = [self.index[t] for _, t in edges]
            vals = np.ones(len(edges))
            gather = sparse.csr_matrix((vals, (rows, cols)), shape=(len(heads), len(self.ids)))
            gather.sum_duplicates()
            if normalization == "mean":
                deg = np.asarray(gather.sum(axis=1)).ravel()
                gather = sparse.diags(1.0 / deg) @ gather
            expand = sparse.csr_matrix(
                (np.ones(len(heads)), (heads, np.arange(len(heads)))), shape=(len(self.ids), len(heads))
            )
            self._cache[key] = (expand, gather.tocsr())
        return self._cache[key]

    def dense_adjacency(self, relation: str) -> np.ndarray:
        A = np.zeros((len(self.ids), len(self.ids)))
        for h, t in self._edges.get(relation, []):
            A[self.index[h], self.index[t]] = 1.0
        return A


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class RGCNLayer:
    def __init__(
        self,
        relations: Iterable[str],
        d_in: int,
        d_out: int,
        params: ParameterSet,
        prefix: str,
        rng: np.random.Generator,
        normalization: str = "mean",
    ):
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
        self.relations = tuple(sorted(relations))
        self.d_in, self.d_out = d_in, d_out
        self.normalization = normalization
        self.W = {r: params.add(f"{prefix}.W[{r}]", _glorot(rng, d_in, d_out)) for r in self.relations}
        self.W0 = params.add(f"{prefix}.W0", _glorot(rng, d_in, d_out))


def layer_forward(layer: RGCNLayer, view: GraphView, H: Tensor) -> Tensor:
    if H.shape != (len(view), layer.d_in):
        raise ShapeError(f"layer expects embeddings of shape {(len(view), layer.d_in)}, got {H.shape}")
    terms = [matmul(H, layer.W0)]
    for r in layer.relations:
        expand, gather = view.aggregator(r, layer.normalization)
        if gather.shape[0] == 0:
            continue
        terms.append(spmm(expand, matmul(spmm(gather, H), layer.W[r])))
    return relu(add_n(terms))


class RGCNEncoder:
    """Stack of R-GCN layers reading its input rows from a (possibly shared) embedding table."""

    def __init__(
        self,
        relations: Iterable[str],
        table: Tensor,
        table_index: dict[str, int],
        dims: Sequence[int],
        params: ParameterSet,
        prefix: str,
        rng: np.random.Generator,
        normalization: str = "mean",
    ):
        if len(dims) < 2:
            raise ValueError("an encoder needs at least one layer")
        if dims[0] != table.shape[1]:
            raise ShapeError(f"first layer width {dims[0]} != embedding width {table.shape[1]}")
        relations = tuple(sorted(relations))
        self.table = table
        self.table_index = table_index
        self.layers = [
            RGCNLayer(relations, dims[k], dims[k + 1], params, f"{prefix}.layer{k}", rng, normalization)
            for k in range(len(dims) - 1)
        ]

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out


def encode(encoder: RGCNEncoder, view: GraphView, table: Tensor | None = None) -> Tensor:
    """Run the stack on ``view``. ``table`` overrides the encoder's own e^(0) table (same row layout)."""
    table = encoder.table if table is None else table
    if table.shape != encoder.table.shape:
        raise ShapeError(f"embedding table shape {table.shape} != {encoder.table.shape}")
    try:
        rows = [encoder.table_index[e] for e in view.ids]
    except KeyError as exc:
        raise KeyError(f"entity {exc.args[0]!r} missing from the embedding table") from None
    H = gather_rows(table, rows)
    for layer in encoder.layers:
        H = layer_forward(layer, view, H)
    return H
