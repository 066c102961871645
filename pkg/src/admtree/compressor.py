"""Per-document compression sessions: plan, encode sub-segments against the
growing tree, and generate conditioned on the flattened nodes.

A session owns one semantic tree and a queue of planned sub-segments.
Multi-turn streams append new plans onto the same tree; completed subtrees
are never recomputed (the seal-time merge chain is discarded and rebuilt on
reopen, the carries stay bitwise intact).
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor, no_grad, slice_rows
from .model import (GIST, TEXT, AttentionLayout, NodeContext, ParameterSet,
                    causal_layout, encode_window)
from .segmenter import ScoringConfig, SegmentPlan, SubSegment, build_plan
from .tree import SemanticTree, TreeNode, retrieve_top_nodes

SESSION_VERSION = 1


class SessionStateError(RuntimeError):
    """A session was driven past its planned work or out of order."""


@dataclass
class CompressConfig(ScoringConfig):
    keep_fraction: Optional[float] = None

    def to_dict(self) -> dict:
        return {"lambda_ent": self.lambda_ent, "tau": self.tau,
                "segment_len": self.segment_len, "keep_fraction": self.keep_fraction}


@dataclass
class StepResult:
    k: int                      # global sub-segment index that was encoded
    window_ids: list[int]       # sub-segment tokens plus the trailing gist id
    logits: Tensor              # one row per text token
    hidden: Tensor              # final hidden states for the whole window
    leaf_id: int
    n_context: int


@dataclass
class Turn:
    tokens: np.ndarray
    plan: SegmentPlan
    base_leaf: int


class CompressionSession:
    """Incremental state tying a token stream to its growing tree."""

    def __init__(self, model: ParameterSet, config: CompressConfig):
        self.config = config
        self.model_config = model.config
        self.tree = SemanticTree(model.aggregator)
        self.turns: list[Turn] = []
        self.tasks: list[np.ndarray] = []   # one entry per planned sub-segment
        self.cursor = 0
        self.tokens_done = 0

    @property
    def planned_leaves(self) -> int:
        return len(self.tasks)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.tasks)

    @property
    def achieved_ratio(self) -> float:
        return achieved_ratio(self)

    def plan_turn(self, tokens, model: ParameterSet, plan: SegmentPlan | None = None) -> Turn:
        """Plan a new stretch of tokens and queue its sub-segments."""
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size == 0:
            raise ValueError("cannot plan an empty turn")
        if arr.size and arr.max() >= self.model_config.gist_id:
            raise ValueError("input tokens must not contain the reserved gist id")
        if self.config.segment_len > self.model_config.max_window:
            raise ValueError(
                f"segment length {self.config.segment_len} exceeds the model window "
                f"{self.model_config.max_window}")
        if plan is None:
            plan = build_plan(arr, self.config, model)
        turn = Turn(arr, plan, base_leaf=len(self.tasks))
        self.turns.append(turn)
        for sub in plan.subsegments:
            self.tasks.append(arr[sub.start:sub.end])
        return turn


def _tree_context(tree: SemanticTree, use_cached: bool) -> list[NodeContext]:
    nodes = tree.flatten()
    return [NodeContext(n.id, n.hidden, position=i,
                        cached_kv=n.cached_kv if use_cached else None)
            for i, n in enumerate(nodes)]


def compress_step(session: CompressionSession, model: ParameterSet) -> StepResult:
    """Encode the next sub-segment with the current tree as context and
    append the resulting gist state as a new leaf."""
    if session.exhausted:
        raise SessionStateError("no sub-segments left to compress")
    if session.tree.sealed:
        raise SessionStateError("tree is sealed; reopen before compressing more")
    cfg = model.config
    sub = session.tasks[session.cursor]
    use_cached = cfg.leaf_ctx == "cached"
    tree_ctx = _tree_context(session.tree, use_cached)
    w = len(sub)
    ids = sub.tolist() + [cfg.gist_id]
    kinds = [TEXT] * w + [GIST]
    layout = causal_layout(ids, kinds, n_context=len(tree_ctx))
    kv_capture: list | None = [] if use_cached else None
    hidden, logits = encode_window(model, layout, tree_ctx, kv_capture=kv_capture)
    leaf_vec = slice_rows(hidden, w, w + 1)
    leaf = session.tree.append_leaf(leaf_vec, cached_kv=kv_capture)
    k = session.cursor
    session.cursor += 1
    session.tokens_done += w
    return StepResult(k, ids, logits, hidden, leaf.id, len(tree_ctx))


def compress_document(tokens, model: ParameterSet, config: CompressConfig,
                      plan: SegmentPlan | None = None) -> CompressionSession:
    """Plan and fully compress one document into a sealed tree."""
    session = CompressionSession(model, config)
    session.plan_turn(tokens, model, plan=plan)
    with no_grad():
        while not session.exhausted:
            compress_step(session, model)
        session.tree.seal()
    return session


def append_turn(session: CompressionSession, new_tokens, model: ParameterSet,
                plan: SegmentPlan | None = None) -> CompressionSession:
    """Compress an additional turn onto the existing tree.

    Prior leaves and completed subtrees are reused untouched; only the
    seal-time merge chain is rebuilt.
    """
    before = {nid: node.hidden.data.tobytes()
              for nid, node in session.tree.nodes.items()
              if nid not in session.tree.seal_ids}
    if session.tree.sealed:
        session.tree.unseal()
    session.plan_turn(new_tokens, model, plan=plan)
    with no_grad():
        while not session.exhausted:
            compress_step(session, model)
        session.tree.seal()
    for nid, raw in before.items():
        if session.tree.nodes[nid].hidden.data.tobytes() != raw:
            raise AssertionError(f"prior node {nid} was recomputed during append_turn")
    return session


def context_attention_scores(model: ParameterSet, nodes: list[TreeNode],
                             probe_tokens) -> np.ndarray:
    """Mean attention weight from the probe's last token to each tree node,
    averaged over layers and heads of one forward."""
    ids = [int(t) for t in probe_tokens]
    if not ids:
        raise ValueError("attention probe needs at least one token")
    with no_grad():
        ctx = [NodeContext(n.id, Tensor(n.hidden.data), position=i)
               for i, n in enumerate(nodes)]
        layout = causal_layout(ids, [TEXT] * len(ids), n_context=len(ctx))
        sink: list = []
        encode_window(model, layout, ctx, attn_sink=sink)
    last = len(ids) - 1
    per_layer = [p[:, last, :len(nodes)] for p in sink]   # (heads, nodes) each
    return np.stack(per_layer).mean(axis=(0, 1))


def generate(session: CompressionSession, prompt_tokens, max_new: int,
             model: ParameterSet, keep_fraction: Optional[float] = None) -> list[int]:
    """Greedy decoding conditioned on the flattened tree plus the prompt.

    With a keep fraction, one probe forward scores the nodes from the last
    prompt token and only the top-scored subset stays in context; kept nodes
    keep their original flatten positions.

    The decode window holds at most max_window recent tokens (the model's
    per-forward limit); the tree carries everything older. The window always
    occupies positions just after the tree block, mirroring how windows are
    placed during compression.
    """
    if max_new <= 0:
        raise ValueError(f"max_new must be positive, got {max_new}")
    prompt = [int(t) for t in prompt_tokens]
    if not prompt:
        raise ValueError("generation needs at least one prompt token")
    cfg = model.config
    nodes = session.tree.flatten()
    base = len(nodes)
    kf = session.config.keep_fraction if keep_fraction is None else keep_fraction
    with no_grad():
        if nodes and kf is not None:
            scores = context_attention_scores(model, nodes,
                                              prompt[-cfg.max_window:])
            kept = retrieve_top_nodes(nodes, scores, kf)
        else:
            kept = nodes
        pos_of = {n.id: i for i, n in enumerate(nodes)}
        ctx = [NodeContext(n.id, Tensor(n.hidden.data), position=pos_of[n.id])
               for n in kept]
        ctx_positions = [pos_of[n.id] for n in kept]
        out: list[int] = []
        for _ in range(max_new):
            ids = (prompt + out)[-cfg.max_window:]
            layout = causal_layout(ids, [TEXT] * len(ids), n_context=len(ctx),
                                   context_positions=ctx_positions,
                                   base_position=base)
            _, logits = encode_window(model, layout, ctx)
            out.append(int(np.argmax(logits.data[-1])))
    return out


def achieved_ratio(session: CompressionSession) -> float:
    """Tokens consumed so far divided by the flattened node count."""
    n = session.tree.node_count
    if n < 1:
        raise ValueError("ratio is undefined before the first leaf exists")
    return session.tokens_done / n


# ---------------------------------------------------------------------------
# session export


def save_session(session: CompressionSession, path) -> None:
    if not session.exhausted:
        raise SessionStateError("only fully compressed sessions can be exported")
    meta = {
        "version": SESSION_VERSION,
        "config": session.config.to_dict(),
        "cursor": session.cursor,
        "tokens_done": session.tokens_done,
        "turns": [{"plan": t.plan.to_dict(),
                   "tokens_b64": base64.b64encode(
                       t.tokens.astype(np.uint8).tobytes()).decode("ascii"),
                   "base_leaf": t.base_leaf} for t in session.turns],
        "tree": session.tree.to_dict(),
    }
    tensors: dict[str, np.ndarray] = {}
    for nid, node in session.tree.nodes.items():
        tensors[f"node/{nid}"] = node.hidden.data
        if node.cached_kv:
            for l, (k, v) in enumerate(node.cached_kv):
                tensors[f"nodekv/{nid}/l{l}/k"] = k.data
                tensors[f"nodekv/{nid}/l{l}/v"] = v.data
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ckpt.MAGIC_SESSION)
        fh.write(struct.pack("<IQ", SESSION_VERSION, len(blob)))
        fh.write(blob)
        fh.write(ckpt.pack_tensors(tensors))


def load_session(path, model: ParameterSet) -> CompressionSession:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != ckpt.MAGIC_SESSION:
        raise ckpt.FormatError(f"bad session magic {raw[:4]!r}", 0)
    version, json_len = struct.unpack_from("<IQ", raw, 4)
    if version != SESSION_VERSION:
        raise ckpt.FormatError(f"unsupported session version {version}", 4)
    end = 16 + json_len
    if end > len(raw):
        raise ckpt.FormatError("session metadata runs past end of file", 16)
    try:
        meta = json.loads(raw[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ckpt.FormatError(f"unreadable session metadata: {exc}", 16) from None
    tensors = ckpt.unpack_tensors(raw[end:])

    config = CompressConfig(**meta["config"])
    session = CompressionSession(model, config)
    session.cursor = meta["cursor"]
    session.tokens_done = meta["tokens_done"]
    n_layers = model.config.n_layers
    tree = session.tree
    for entry in meta["tree"]["nodes"]:
        nid = entry["id"]
        hidden = Tensor(tensors[f"node/{nid}"])
        cached = None
        if f"nodekv/{nid}/l0/k" in tensors:
            cached = [(Tensor(tensors[f"nodekv/{nid}/l{l}/k"]),
                       Tensor(tensors[f"nodekv/{nid}/l{l}/v"]))
                      for l in range(n_layers)]
        tree.nodes[nid] = TreeNode(nid, entry["kind"], hidden,
                                   tuple(entry["children"]), entry["height"],
                                   tuple(entry["span"]), cached)
    leaves = sorted((n for n in tree.nodes.values() if n.kind == "leaf"),
                    key=lambda n: n.span[0])
    tree.leaf_ids = [n.id for n in leaves]
    tree.seal_ids = list(meta["tree"]["seal_nodes"])
    tree.root_id = meta["tree"]["root"]
    tree._next_id = 1 + max(tree.nodes) if tree.nodes else 0
    # rebuild the carry state from the binary decomposition of the leaf count
    m = tree.leaf_count
    by_span = {n.span: n for n in tree.nodes.values()}
    start = 0
    tree.pending = {}
    for h in range(m.bit_length() - 1, -1, -1):
        if (m >> h) & 1:
            span = (start, start + (1 << h) - 1)
            tree.pending[h] = by_span[span].id
            start += 1 << h
    for turn_meta in meta["turns"]:
        tokens = np.frombuffer(base64.b64decode(turn_meta["tokens_b64"]),
                               dtype=np.uint8).astype(np.int64)
        plan_d = turn_meta["plan"]
        plan = SegmentPlan(
            segments=[tuple(s) for s in plan_d["segments"]],
            scores=plan_d["scores"], tiers=plan_d["tiers"], budgets=plan_d["budgets"],
            subsegments=[SubSegment(**s) for s in plan_d["subsegments"]])
        turn = Turn(tokens, plan, turn_meta["base_leaf"])
        session.turns.append(turn)
        for sub in plan.subsegments:
            session.tasks.append(tokens[sub.start:sub.end])
    return session
