"""Incremental binary semantic tree over gist-leaf hidden vectors.

Leaves arrive one at a time; pairing uses a binary-counter carry (at most
one pending subtree per height), which reproduces exactly the batch
level-by-level left-to-right pairing with odd leftovers deferred upward
unchanged. Aggregation of a pair is a single-layer bidirectional
self-attention followed by averaging; a deferred singleton passes through
untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, concat, matmul, mha


@dataclass
class Aggregator:
    """Pair-combiner: self-attention over two child vectors, then average.

    wq/wk/wv map d_model -> d_inner, wo maps d_inner -> d_model. d_inner is
    kept small so the combiner stays tiny next to the backbone.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    _avg: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        d = self.wq.data.shape[0]
        d_inner = self.wq.data.shape[1]
        if self.wk.data.shape != (d, d_inner) or self.wv.data.shape != (d, d_inner):
            raise ValueError("aggregator q/k/v projections must share one shape")
        if self.wo.data.shape[0] != d_inner:
            raise ValueError("aggregator output projection width mismatch")
        self._avg = Tensor([[0.5, 0.5]])

    @property
    def d_model(self) -> int:
        return self.wq.data.shape[0]

    def param_count(self) -> int:
        return sum(t.data.size for t in (self.wq, self.wk, self.wv, self.wo))

    def tensors(self) -> dict[str, Tensor]:
        return {"agg.wq": self.wq, "agg.wk": self.wk, "agg.wv": self.wv, "agg.wo": self.wo}

    def combine_pair(self, left: Tensor, right: Tensor) -> Tensor:
        x = concat([left, right], axis=0)
        q = matmul(x, self.wq)
        k = matmul(x, self.wk)
        v = matmul(x, self.wv)
        att = mha(q, k, v, np.zeros((2, 2)), n_heads=1)
        out = matmul(att, self.wo)
        return matmul(self._avg, out)


def aggregate(agg: Aggregator, children: list[Tensor]) -> Tensor:
    """Combine 1 or 2 child vectors; a singleton is the identity (deferral)."""
    if len(children) == 1:
        return children[0]
    if len(children) == 2:
        return agg.combine_pair(children[0], children[1])
    raise ValueError(f"aggregate takes 1 or 2 children, got {len(children)}")


@dataclass
class TreeNode:
    id: int
    kind: str                      # "leaf" | "internal"
    hidden: Tensor                 # shape (1, d_model)
    children: tuple[int, ...]      # () for leaves, (left, right) otherwise
    height: int
    span: tuple[int, int]          # inclusive leaf-index range
    cached_kv: Optional[list] = None  # per-layer (k, v) rows captured at encode time


class SemanticTree:
    """Append-only binary tree with at most one pending subtree per height."""

    def __init__(self, agg: Aggregator):
        self.agg = agg
        self.nodes: dict[int, TreeNode] = {}
        self.leaf_ids: list[int] = []
        self.pending: dict[int, int] = {}   # height -> node id
        self.seal_ids: list[int] = []
        self.root_id: Optional[int] = None
        self._next_id = 0

    # -- introspection ------------------------------------------------------

    @property
    def sealed(self) -> bool:
        return self.root_id is not None

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_ids)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def internal_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == "internal")

    # -- construction -------------------------------------------------------

    def _new_node(self, kind, hidden, children, height, span, cached_kv=None) -> TreeNode:
        node = TreeNode(self._next_id, kind, hidden, children, height, span, cached_kv)
        self._next_id += 1
        self.nodes[node.id] = node
        return node

    def _merge(self, left: TreeNode, right: TreeNode) -> TreeNode:
        hidden = self.agg.combine_pair(left.hidden, right.hidden)
        height = 1 + max(left.height, right.height)
        return self._new_node("internal", hidden, (left.id, right.id), height,
                              (left.span[0], right.span[1]))

    def append_leaf(self, hidden: Tensor, cached_kv=None) -> TreeNode:
        """Add one leaf; carry-merge equal-height subtrees like a binary counter.

        Completed subtrees are never recomputed: at most ceil(log2 M)
        aggregations happen per append.
        """
        if self.sealed:
            raise RuntimeError("cannot append to a sealed tree")
        idx = len(self.leaf_ids)
        leaf = self._new_node("leaf", hidden, (), 0, (idx, idx), cached_kv)
        self.leaf_ids.append(leaf.id)
        cur = leaf
        h = 0
        while h in self.pending:
            left = self.nodes[self.pending.pop(h)]
            cur = self._merge(left, cur)
            h = cur.height
        self.pending[cur.height] = cur.id
        return leaf

    def seal(self) -> TreeNode:
        """Merge remaining carries (lowest first) into a single root."""
        if self.sealed:
            return self.nodes[self.root_id]
        if not self.pending:
            raise RuntimeError("cannot seal an empty tree")
        order = sorted(self.pending)
        cur = self.nodes[self.pending[order[0]]]
        for h in order[1:]:
            left = self.nodes[self.pending[h]]
            merged = self._merge(left, cur)
            self.seal_ids.append(merged.id)
            cur = merged
        self.root_id = cur.id
        return cur

    def unseal(self) -> None:
        """Drop the seal-time merge chain; pending carries are untouched."""
        for nid in self.seal_ids:
            del self.nodes[nid]
        self.seal_ids = []
        self.root_id = None

    # -- views ---------------------------------------------------------------

    def flatten(self) -> list[TreeNode]:
        """All nodes in left-to-right, bottom-to-top order.

        Sorted by (height, span start): every leaf precedes every internal
        node, and children always precede their parents.
        """
        return sorted(self.nodes.values(), key=lambda n: (n.height, n.span[0]))

    def to_dict(self, include_hidden: bool = False) -> dict:
        nodes = []
        for n in self.flatten():
            entry = {"id": n.id, "kind": n.kind, "height": n.height,
                     "span": list(n.span), "children": list(n.children)}
            if include_hidden:
                entry["hidden"] = n.hidden.data.reshape(-1).tolist()
            nodes.append(entry)
        return {"leaves": self.leaf_count, "nodes": nodes,
                "root": self.root_id, "seal_nodes": list(self.seal_ids)}


def build_batch(leaves: list[Tensor], agg: Aggregator) -> SemanticTree:
    """Level-by-level bottom-up construction (the batch counterpart of append).

    Pairs left to right within each level; an odd leftover joins the next
    level unchanged. Produces M-1 internal nodes and a sealed root.
    """
    if not leaves:
        raise ValueError("build_batch needs at least one leaf")
    tree = SemanticTree(agg)
    level: list[TreeNode] = []
    for i, h in enumerate(leaves):
        leaf = tree._new_node("leaf", h, (), 0, (i, i))
        tree.leaf_ids.append(leaf.id)
        level.append(leaf)
    while len(level) > 1:
        nxt: list[TreeNode] = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(tree._merge(level[i], level[i + 1]))
        if len(level) % 2 == 1:
            nxt.append(level[-1])
        level = nxt
    tree.root_id = level[0].id
    # Reconstruct the carry state so un-sealing and appending behave exactly
    # like an append-built tree. The carries are the maximal complete
    # subtrees, whose spans follow the binary decomposition of M; every
    # node above them was created by the seal-time merge chain.
    m = tree.leaf_count
    counter_spans = {}
    start = 0
    for h in range(m.bit_length() - 1, -1, -1):
        if (m >> h) & 1:
            counter_spans[(start, start + (1 << h) - 1)] = h
            start += 1 << h
    by_span = {n.span: n for n in tree.nodes.values()}
    tree.pending = {h: by_span[span].id for span, h in counter_spans.items()}
    seal_ids = []
    node = tree.nodes[tree.root_id]
    while node.span not in counter_spans:
        seal_ids.append(node.id)
        node = tree.nodes[node.children[1]]
    tree.seal_ids = seal_ids
    return tree


def retrieve_top_nodes(nodes: list[TreeNode], scores, keep_fraction: float) -> list[TreeNode]:
    """Keep the ceil(fraction * N) best-scored nodes, flatten order preserved.

    Ties break toward the earlier flatten index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    sc = np.asarray(scores, dtype=np.float64)
    if sc.shape != (len(nodes),):
        raise ValueError(f"got {sc.shape[0] if sc.ndim else 0} scores for {len(nodes)} nodes")
    keep = int(np.ceil(keep_fraction * len(nodes)))
    order = np.argsort(-sc, kind="stable")[:keep]
    picked = np.sort(order)
    return [nodes[i] for i in picked]
