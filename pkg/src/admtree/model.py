"""Miniature causal decoder with dual text/gist attention branches.

Per layer, text tokens project q/k/v through the frozen backbone matrices
while gist tokens use their own trainable branch; flattened tree nodes are
injected as extra keys/values ahead of the window. Rotary rotation encodes
positions: tree nodes sit at 0..C-1 in flatten order, window tokens
continue from C.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .autodiff import (Tensor, add, concat, embedding, matmul, mha, rms_norm,
                       rope, rope_spread, rope_tables, silu, slice_rows)
from .tree import Aggregator

TEXT = "text"
GIST = "gist"


class LayoutError(ValueError):
    """An attention layout violates its structural contract."""


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 257          # 256 byte ids + one gist-token id
    max_window: int = 128          # longest window a single forward accepts
    d_agg: int = 16                # aggregator inner width
    leaf_ctx: str = "projected"    # "projected" | "cached"
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head width must be even for rotary rotation")
        if self.vocab_size < 2:
            raise ValueError("vocab must hold at least one byte id plus the gist id")
        if self.leaf_ctx not in ("projected", "cached"):
            raise ValueError(f"unknown leaf_ctx mode {self.leaf_ctx!r}")

    @property
    def gist_id(self) -> int:
        return self.vocab_size - 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "vocab_size": self.vocab_size,
                "max_window": self.max_window, "d_agg": self.d_agg,
                "leaf_ctx": self.leaf_ctx, "rope_base": self.rope_base,
                "norm_eps": self.norm_eps, "ffn_mult": self.ffn_mult}


@dataclass
class NodeContext:
    """One tree node offered as attention context."""

    node_id: int
    vector: Tensor                      # (1, d_model)
    position: int                       # rotary position (flatten index)
    cached_kv: Optional[list] = None    # per-layer (k, v) rows, pre-rotation


@dataclass
class AttentionLayout:
    """Which keys each window query may attend to.

    allow covers [context block | window block]; the context block must be
    fully open and the window block causal (lower-triangular).
    """

    context_keys: list[tuple[int, int]]      # (node id, rotary position)
    window_tokens: list[tuple[int, str]]     # (token id, TEXT | GIST)
    window_positions: list[int]
    allow: np.ndarray

    def validate(self) -> None:
        c = len(self.context_keys)
        w = len(self.window_tokens)
        if w == 0:
            raise LayoutError("window must contain at least one token")
        if len(self.window_positions) != w:
            raise LayoutError("one position per window token required")
        if self.allow.shape != (w, c + w):
            raise LayoutError(f"allow shape {self.allow.shape} != ({w}, {c + w})")
        if c and not self.allow[:, :c].all():
            raise LayoutError("every query must see every context key")
        win = self.allow[:, c:]
        if np.triu(win, 1).any():
            raise LayoutError("window block must be causal (no future keys)")
        if not win.diagonal().all():
            raise LayoutError("every window token must see itself")


def causal_layout(token_ids, kinds, n_context: int, context_positions=None,
                  base_position: Optional[int] = None) -> AttentionLayout:
    """Standard layout: full view of the context, causal window."""
    w = len(token_ids)
    if context_positions is None:
        context_positions = list(range(n_context))
    base = n_context if base_position is None else base_position
    allow = np.ones((w, n_context + w), dtype=bool)
    allow[:, n_context:] = np.tril(np.ones((w, w), dtype=bool))
    return AttentionLayout(
        context_keys=[(-1, p) for p in context_positions],
        window_tokens=list(zip(token_ids, kinds)),
        window_positions=[base + i for i in range(w)],
        allow=allow,
    )


class ParameterSet:
    """Frozen backbone weights plus the trainable gist-side set."""

    def __init__(self, config: BackboneConfig, frozen: dict[str, Tensor],
                 trainable: dict[str, Tensor]):
        self.config = config
        self.frozen = frozen
        self.trainable = trainable
        self.aggregator = Aggregator(trainable["agg.wq"], trainable["agg.wk"],
                                     trainable["agg.wv"], trainable["agg.wo"])
        ratio = self.aggregator.param_count() / self.frozen_param_count()
        if ratio >= 0.05:
            raise ValueError(
                f"aggregator holds {ratio:.1%} of the backbone size; keep it under 5% "
                f"(shrink d_agg or grow the backbone)")

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "ParameterSet":
        rng = np.random.default_rng(seed)
        d = config.d_model
        hidden = config.ffn_mult * d
        p_std = d ** -0.5
        o_std = p_std / np.sqrt(2 * config.n_layers)

        def mat(rows, cols, std):
            return Tensor(rng.normal(0.0, std, size=(rows, cols)))

        frozen: dict[str, Tensor] = {
            "tok_emb": mat(config.vocab_size - 1, d, 0.05),
            "head": mat(d, config.vocab_size, p_std),
            "final_norm": Tensor(np.ones(d)),
        }
        for l in range(config.n_layers):
            frozen[f"l{l}.att_norm"] = Tensor(np.ones(d))
            frozen[f"l{l}.ffn_norm"] = Tensor(np.ones(d))
            frozen[f"l{l}.wq_tt"] = mat(d, d, p_std)
            frozen[f"l{l}.wk_tt"] = mat(d, d, p_std)
            frozen[f"l{l}.wv_tt"] = mat(d, d, p_std)
            frozen[f"l{l}.wo"] = mat(d, d, o_std)
            frozen[f"l{l}.w1"] = mat(d, hidden, p_std)
            frozen[f"l{l}.w2"] = mat(hidden, d, o_std)

        trainable: dict[str, Tensor] = {"gt_emb": mat(1, d, 0.05)}
        for l in range(config.n_layers):
            # warm-start the gist branch and node projections from the text
            # branch so early gist training starts from sane attention
            trainable[f"l{l}.wq_gt"] = Tensor(frozen[f"l{l}.wq_tt"].data)
            trainable[f"l{l}.wk_gt"] = Tensor(frozen[f"l{l}.wk_tt"].data)
            trainable[f"l{l}.wv_gt"] = Tensor(frozen[f"l{l}.wv_tt"].data)
            trainable[f"l{l}.wk_node"] = Tensor(frozen[f"l{l}.wk_tt"].data)
            trainable[f"l{l}.wv_node"] = Tensor(frozen[f"l{l}.wv_tt"].data)
        trainable["agg.wq"] = mat(d, config.d_agg, p_std)
        trainable["agg.wk"] = mat(d, config.d_agg, p_std)
        trainable["agg.wv"] = mat(d, config.d_agg, p_std)
        trainable["agg.wo"] = mat(config.d_agg, d, config.d_agg ** -0.5)

        model = cls(config, frozen, trainable)
        model.set_phase("gist")
        return model

    def set_phase(self, phase: str) -> None:
        """Select which partition receives gradients.

        Backbone pre-training updates the (eventually frozen) backbone set;
        gist training updates only the gist-side set.
        """
        if phase not in ("backbone", "gist"):
            raise ValueError(f"unknown phase {phase!r}")
        train_frozen = phase == "backbone"
        for t in self.frozen.values():
            t.requires_grad = train_frozen
            t.grad = np.zeros_like(t.data) if train_frozen else None
        for t in self.trainable.values():
            t.requires_grad = not train_frozen
            t.grad = np.zeros_like(t.data) if not train_frozen else None

    # -- bookkeeping ---------------------------------------------------------

    def frozen_param_count(self) -> int:
        return sum(t.data.size for t in self.frozen.values())

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen):
            h.update(name.encode())
            h.update(self.frozen[name].data.tobytes())
        return h.hexdigest()

    def zero_grads(self) -> None:
        for t in list(self.frozen.values()) + list(self.trainable.values()):
            t.zero_grad()

    # -- persistence ---------------------------------------------------------

    def _meta_array(self) -> np.ndarray:
        leaf_flag = 0.0 if self.config.leaf_ctx == "projected" else 1.0
        return np.array([self.config.d_model, self.config.n_layers,
                         self.config.n_heads, self.config.vocab_size,
                         self.config.max_window, self.config.d_agg, leaf_flag,
                         self.config.rope_base, self.config.norm_eps,
                         self.config.ffn_mult], dtype=np.float64)

    @staticmethod
    def _config_from_meta(meta: np.ndarray) -> BackboneConfig:
        return BackboneConfig(
            d_model=int(meta[0]), n_layers=int(meta[1]), n_heads=int(meta[2]),
            vocab_size=int(meta[3]), max_window=int(meta[4]), d_agg=int(meta[5]),
            leaf_ctx="cached" if meta[6] else "projected", rope_base=float(meta[7]),
            norm_eps=float(meta[8]), ffn_mult=int(meta[9]))

    def save(self, path, include_trainable: bool = True) -> None:
        tensors = {"meta/config": self._meta_array()}
        for name, t in self.frozen.items():
            tensors[f"frozen/{name}"] = t.data
        if include_trainable:
            for name, t in self.trainable.items():
                tensors[f"trainable/{name}"] = t.data
        ckpt.write_container(path, tensors)

    @classmethod
    def load(cls, path, seed: int = 0) -> "ParameterSet":
        tensors = ckpt.read_container(path)
        if "meta/config" not in tensors:
            raise ckpt.FormatError("checkpoint is missing its config entry", 0)
        config = cls._config_from_meta(tensors["meta/config"])
        model = cls.init(config, seed=seed)
        for name, arr in tensors.items():
            if name.startswith("frozen/"):
                model.frozen[name[len("frozen/"):]].data[...] = arr
            elif name.startswith("trainable/"):
                model.trainable[name[len("trainable/"):]].data[...] = arr
        return model


# ---------------------------------------------------------------------------
# forward


def _kind_runs(kinds: list[str]) -> list[tuple[str, int, int]]:
    runs = []
    start = 0
    for i in range(1, len(kinds) + 1):
        if i == len(kinds) or kinds[i] != kinds[start]:
            runs.append((kinds[start], start, i))
            start = i
    return runs


def _branch_project(h: Tensor, runs, w_tt: Tensor, w_gt: Tensor) -> Tensor:
    """Project each contiguous kind-run through its branch and reassemble."""
    if len(runs) == 1:
        kind = runs[0][0]
        return matmul(h, w_tt if kind == TEXT else w_gt)
    parts = []
    for kind, s, e in runs:
        block = slice_rows(h, s, e)
        parts.append(matmul(block, w_tt if kind == TEXT else w_gt))
    return concat(parts, axis=0)


def project_tree_context(model: ParameterSet, nodes, layer: int) -> tuple[Tensor, Tensor]:
    """Per-layer trainable key/value projections of tree-node vectors.

    Accepts a list of (1, d) vectors or one stacked (n, d) tensor; rows stay
    in node order. No rotary rotation is applied here.
    """
    if isinstance(nodes, (list, tuple)):
        if not nodes:
            raise ValueError("project_tree_context needs at least one node")
        stacked = concat(list(nodes), axis=0) if len(nodes) > 1 else nodes[0]
    else:
        stacked = nodes
    d = model.config.d_model
    if stacked.data.ndim != 2 or stacked.data.shape[1] != d:
        raise ValueError(f"node vectors must be rows of width {d}, got {stacked.data.shape}")
    k = matmul(stacked, model.trainable[f"l{layer}.wk_node"])
    v = matmul(stacked, model.trainable[f"l{layer}.wv_node"])
    return k, v


def lm_logits(model: ParameterSet, hidden: Tensor) -> Tensor:
    """Frozen output head over (already normalized) hidden states."""
    return matmul(hidden, model.frozen["head"])


def _embed_window(model: ParameterSet, ids: list[int], runs) -> Tensor:
    parts = []
    for kind, s, e in runs:
        if kind == TEXT:
            parts.append(embedding(model.frozen["tok_emb"], np.asarray(ids[s:e])))
        else:
            parts.extend([model.trainable["gt_emb"]] * (e - s))
    return concat(parts, axis=0) if len(parts) > 1 else parts[0]


def _context_kv(model: ParameterSet, tree_ctx: list[NodeContext], layer: int,
                ctx_mat: Tensor) -> tuple[Tensor, Tensor]:
    cached = model.config.leaf_ctx == "cached"
    if not cached or all(nc.cached_kv is None for nc in tree_ctx):
        return project_tree_context(model, ctx_mat, layer)
    k_parts, v_parts = [], []
    for nc in tree_ctx:
        if nc.cached_kv is not None:
            k_parts.append(nc.cached_kv[layer][0])
            v_parts.append(nc.cached_kv[layer][1])
        else:
            k, v = project_tree_context(model, nc.vector, layer)
            k_parts.append(k)
            v_parts.append(v)
    return concat(k_parts, axis=0), concat(v_parts, axis=0)


def encode_window(model: ParameterSet, layout: AttentionLayout,
                  tree_ctx: list[NodeContext], *, trace: dict | None = None,
                  attn_sink: list | None = None, kv_capture: list | None = None,
                  _validate: bool = True) -> tuple[Tensor, Tensor]:
    """Run one window through the decoder with injected tree context.

    Returns (final hidden states for all window tokens, logits for the text
    positions). tree_ctx order must match layout.context_keys. kv_capture,
    when given, receives the gist token's per-layer (k, v) rows before
    rotation, for the cached leaf-context variant. _validate exists so the
    fault-injection probe can run a deliberately broken layout.
    """
    if _validate:
        layout.validate()
    if len(tree_ctx) != len(layout.context_keys):
        raise LayoutError(f"{len(tree_ctx)} context vectors for "
                          f"{len(layout.context_keys)} context keys")
    cfg = model.config
    n_ctx = len(tree_ctx)
    ids = [t for t, _ in layout.window_tokens]
    kinds = [k for _, k in layout.window_tokens]
    runs = _kind_runs(kinds)

    for nc in tree_ctx:
        if nc.vector.data.shape != (1, cfg.d_model):
            raise ValueError(f"context vector shape {nc.vector.data.shape} != (1, {cfg.d_model})")

    cos_w, sin_w = rope_spread(
        *rope_tables(np.asarray(layout.window_positions), cfg.d_head, cfg.rope_base),
        cfg.d_model)
    if n_ctx:
        ctx_pos = np.asarray([p for _, p in layout.context_keys])
        cos_c, sin_c = rope_spread(
            *rope_tables(ctx_pos, cfg.d_head, cfg.rope_base), cfg.d_model)
        ctx_mat = (concat([nc.vector for nc in tree_ctx], axis=0)
                   if n_ctx > 1 else tree_ctx[0].vector)
    else:
        ctx_mat = None
    mask_add = np.where(layout.allow, 0.0, -np.inf)

    h = _embed_window(model, ids, runs)
    for l in range(cfg.n_layers):
        a = rms_norm(h, model.frozen[f"l{l}.att_norm"], cfg.norm_eps)
        q = _branch_project(a, runs, model.frozen[f"l{l}.wq_tt"], model.trainable[f"l{l}.wq_gt"])
        k_win = _branch_project(a, runs, model.frozen[f"l{l}.wk_tt"], model.trainable[f"l{l}.wk_gt"])
        v_win = _branch_project(a, runs, model.frozen[f"l{l}.wv_tt"], model.trainable[f"l{l}.wv_gt"])
        if trace is not None:
            trace[f"l{l}.k_win"] = k_win.data.copy()
            trace[f"l{l}.v_win"] = v_win.data.copy()
        if kv_capture is not None:
            gist_rows = [(s, e) for kind, s, e in runs if kind == GIST]
            if len(gist_rows) != 1 or gist_rows[0][1] - gist_rows[0][0] != 1:
                raise LayoutError("kv capture expects exactly one gist token")
            s = gist_rows[0][0]
            kv_capture.append((slice_rows(k_win, s, s + 1), slice_rows(v_win, s, s + 1)))
        q = rope(q, cos_w, sin_w, cfg.d_head)
        k_win = rope(k_win, cos_w, sin_w, cfg.d_head)
        if n_ctx:
            k_ctx, v_ctx = _context_kv(model, tree_ctx, l, ctx_mat)
            k_ctx = rope(k_ctx, cos_c, sin_c, cfg.d_head)
            k_all = concat([k_ctx, k_win], axis=0)
            v_all = concat([v_ctx, v_win], axis=0)
        else:
            k_all, v_all = k_win, v_win
        att = mha(q, k_all, v_all, mask_add, cfg.n_heads, attn_sink=attn_sink)
        h = add(h, matmul(att, model.frozen[f"l{l}.wo"]))
        f = rms_norm(h, model.frozen[f"l{l}.ffn_norm"], cfg.norm_eps)
        h = add(h, matmul(silu(matmul(f, model.frozen[f"l{l}.w1"])),
                          model.frozen[f"l{l}.w2"]))

    h_final = rms_norm(h, model.frozen["final_norm"], cfg.norm_eps)
    text_parts = [slice_rows(h_final, s, e) for kind, s, e in runs if kind == TEXT]
    if text_parts:
        text_h = concat(text_parts, axis=0) if len(text_parts) > 1 else text_parts[0]
        logits = lm_logits(model, text_h)
    else:
        logits = Tensor(np.zeros((0, cfg.vocab_size)))
    return h_final, logits
