"""Atom featurization (47 fixed slots + atom-count column) and graph batching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .chem import AROMATIC, DOUBLE, TRIPLE, Atom, MolGraph


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    categories: tuple
    kind: str = "onehot"  # "onehot" or "flag"
    other: bool = False   # unknown values go to the last slot if True, else clamp

    @property
    def width(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class FeatureSchema:
    blocks: tuple[Block, ...]

    @property
    def total_width(self) -> int:
        return sum(b.width for b in self.blocks)

    def offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for b in self.blocks:
            out[b.name] = pos
            pos += b.width
        return out

    def to_dict(self) -> dict:
        return {
            "total_width": self.total_width,
            "count_feature": "atoms in molecule, appended as the last column, unnormalized",
            "blocks": [{"name": b.name, "kind": b.kind, "categories": list(b.categories)}
                       for b in self.blocks],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_SCHEMA = FeatureSchema((
    Block("element", ("H", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Br", "I", "B",
                      "Na", "K", "Se", "other"), other=True),
    Block("degree", tuple(range(7))),
    Block("formal_charge", (-2, -1, 0, 1, 2)),
    Block("total_h", tuple(range(6))),
    Block("aromatic", (True,), kind="flag"),
    Block("ring", (True,), kind="flag"),
    Block("hybridization", ("sp", "sp2", "sp3", "none", "other"), other=True),
    Block("valence", tuple(range(6))),
))
FEATURE_WIDTH = DEFAULT_SCHEMA.total_width + 1  # + atom count


def hybridization(g: MolGraph, i: int) -> str:
    atom = g.atoms[i]
    orders = [g.bonds[k].order for _, k in g.neighbors(i)]
    if TRIPLE in orders or orders.count(DOUBLE) >= 2:
        return "sp"
    if DOUBLE in orders or AROMATIC in orders:
        return "sp2"
    if atom.degree + atom.total_h > 0:
        return "sp3"
    return "none"


def atom_properties(a: Atom, g: MolGraph, index: int) -> dict:
    return {
        "element": a.element,
        "degree": a.degree,
        "formal_charge": a.formal_charge,
        "total_h": a.total_h,
        "aromatic": a.aromatic,
        "ring": a.ring_member,
        "hybridization": hybridization(g, index),
        "valence": int(g.bond_order_sum(index)) + a.total_h,
    }


def featurize_atom(a: Atom, g: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA,
                   index: int | None = None) -> np.ndarray:
    if index is None:
        index = next(k for k, other in enumerate(g.atoms) if other is a)
    props = atom_properties(a, g, index)
    vec = np.zeros(schema.total_width)
    pos = 0
    for block in schema.blocks:
        value = props[block.name]
        if block.kind == "flag":
            vec[pos] = float(bool(value))
        elif value in block.categories:
            vec[pos + block.categories.index(value)] = 1.0
        elif block.other:
            vec[pos + block.width - 1] = 1.0
        else:
            # ordinal blocks clamp to their end slots
            vec[pos + (0 if value < block.categories[0] else block.width - 1)] = 1.0
        pos += block.width
    return vec


@dataclass(frozen=True)
class GraphBatch:
    node_features: np.ndarray   # (nodes, 48), last column = atom count
    edge_index: np.ndarray      # (2, directed edges): rows are (source, target)
    graph_index: np.ndarray     # (nodes,)
    graph_count: int
    node_counts: np.ndarray     # (graph_count,)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def edge_list(self) -> list[tuple[int, int]]:
        return [tuple(p) for p in self.edge_index.T.tolist()]


def featurize_graph(g: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA) -> GraphBatch:
    n = len(g.atoms)
    x = np.empty((n, schema.total_width + 1))
    for i, a in enumerate(g.atoms):
        x[i, :-1] = featurize_atom(a, g, schema, index=i)
    x[:, -1] = float(n)
    if g.bonds:
        pairs = np.array([(b.begin, b.end) for b in g.bonds], dtype=np.int64)
        edge_index = np.concatenate([pairs, pairs[:, ::-1]]).T.copy()
    else:
        edge_index = np.zeros((2, 0), dtype=np.int64)
    return GraphBatch(x, edge_index, np.zeros(n, dtype=np.int64), 1, np.array([n]))


def batch_graphs(graphs: list[GraphBatch]) -> GraphBatch:
    if not graphs:
        raise EmptyBatch("cannot batch an empty list of graphs")
    widths = {gb.node_features.shape[1] for gb in graphs}
    if len(widths) != 1:
        raise ValueError(f"feature widths differ: {sorted(widths)}")
    if len(graphs) == 1:
        return graphs[0]
    node_counts = np.concatenate([gb.node_counts for gb in graphs])
    offsets = np.concatenate([[0], np.cumsum([gb.num_nodes for gb in graphs])[:-1]])
    graph_offsets = np.concatenate([[0], np.cumsum([gb.graph_count for gb in graphs])[:-1]])
    return GraphBatch(
        node_features=np.concatenate([gb.node_features for gb in graphs]),
        edge_index=np.concatenate([gb.edge_index + off for gb, off in zip(graphs, offsets)], axis=1),
        graph_index=np.concatenate([gb.graph_index + off for gb, off in zip(graphs, graph_offsets)]),
        graph_count=int(node_counts.size),
        node_counts=node_counts,
    )
