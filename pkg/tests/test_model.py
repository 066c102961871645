"""Backbone forward against an independent dense reference implementation."""

import numpy as np
import pytest

from admtree.autodiff import Tape, Tensor, backward, finite_difference_grad, no_grad
from admtree.checkpoint import FormatError
from admtree.model import (GIST, TEXT, AttentionLayout, BackboneConfig,
                           LayoutError, NodeContext, ParameterSet,
                           causal_layout, encode_window, lm_logits,
                           project_tree_context)

CFG = BackboneConfig(d_model=16, n_layers=2, n_heads=2, max_window=32, d_agg=4)


def small_model(seed=0, **kw):
    cfg = BackboneConfig(**{**CFG.to_dict(), **kw})
    return ParameterSet.init(cfg, seed=seed)


# ---------------------------------------------------------------------------
# reference implementation (independent of the package's forward path)


def ref_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_rms(x, g, eps):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * g


def ref_rotate(mat, positions, d_head, base):
    half = d_head // 2
    out = mat.copy()
    for r, pos in enumerate(positions):
        for blk in range(mat.shape[1] // d_head):
            for j in range(half):
                theta = pos * base ** (-j / half)
                c, s = np.cos(theta), np.sin(theta)
                i1 = blk * d_head + j
                i2 = blk * d_head + half + j
                a, b = mat[r, i1], mat[r, i2]
                out[r, i1] = a * c - b * s
                out[r, i2] = a * s + b * c
    return out


def ref_forward(model, ids, kinds, ctx_vectors, ctx_positions, allow):
    """Dense decoder forward with explicit concatenated attention."""
    cfg = model.config
    F = {k: t.data for k, t in model.frozen.items()}
    T = {k: t.data for k, t in model.trainable.items()}
    w = len(ids)
    c = len(ctx_vectors)
    win_pos = [c + i for i in range(w)]

    h = np.stack([F["tok_emb"][t] if kind == TEXT else T["gt_emb"][0]
                  for t, kind in zip(ids, kinds)])
    ctx = np.stack(ctx_vectors) if c else np.zeros((0, cfg.d_model))

    for l in range(cfg.n_layers):
        a = ref_rms(h, F[f"l{l}.att_norm"], cfg.norm_eps)
        q = np.stack([a[i] @ (F[f"l{l}.wq_tt"] if kinds[i] == TEXT else T[f"l{l}.wq_gt"])
                      for i in range(w)])
        k_win = np.stack([a[i] @ (F[f"l{l}.wk_tt"] if kinds[i] == TEXT else T[f"l{l}.wk_gt"])
                          for i in range(w)])
        v_win = np.stack([a[i] @ (F[f"l{l}.wv_tt"] if kinds[i] == TEXT else T[f"l{l}.wv_gt"])
                          for i in range(w)])
        q = ref_rotate(q, win_pos, cfg.d_head, cfg.rope_base)
        k_win = ref_rotate(k_win, win_pos, cfg.d_head, cfg.rope_base)
        if c:
            k_ctx = ref_rotate(ctx @ T[f"l{l}.wk_node"], ctx_positions, cfg.d_head,
                               cfg.rope_base)
            v_ctx = ctx @ T[f"l{l}.wv_node"]
            k_all = np.concatenate([k_ctx, k_win])
            v_all = np.concatenate([v_ctx, v_win])
        else:
            k_all, v_all = k_win, v_win
        att = np.zeros((w, cfg.d_model))
        for head in range(cfg.n_heads):
            s = slice(head * cfg.d_head, (head + 1) * cfg.d_head)
            scores = q[:, s] @ k_all[:, s].T / np.sqrt(cfg.d_head)
            scores = np.where(allow, scores, -np.inf)
            att[:, s] = ref_softmax(scores) @ v_all[:, s]
        h = h + att @ F[f"l{l}.wo"]
        f = ref_rms(h, F[f"l{l}.ffn_norm"], cfg.norm_eps)
        inner = f @ F[f"l{l}.w1"]
        h = h + (inner / (1 + np.exp(-inner))) @ F[f"l{l}.w2"]

    h = ref_rms(h, F["final_norm"], cfg.norm_eps)
    logits = h[[i for i, kind in enumerate(kinds) if kind == TEXT]] @ F["head"]
    return h, logits


# ---------------------------------------------------------------------------
# encode_window


def test_reduction_to_vanilla_decoder():
    model = small_model()
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 256, size=9).tolist()
    kinds = [TEXT] * 9
    layout = causal_layout(ids, kinds, n_context=0, base_position=0)
    with no_grad():
        h, logits = encode_window(model, layout, [])
    allow = np.tril(np.ones((9, 9), dtype=bool))
    # base_position=0 puts window tokens at positions 0..8 in both paths
    ref_h, ref_logits = ref_forward(model, ids, kinds, [], [], allow)
    # the reference uses window positions c+i with c=0, matching base 0
    assert np.allclose(h.data, ref_h, atol=1e-10)
    assert np.allclose(logits.data, ref_logits, atol=1e-10)


def test_window_with_tree_context_matches_dense_oracle():
    model = small_model(seed=2)
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 256, size=6).tolist() + [model.config.gist_id]
    kinds = [TEXT] * 6 + [GIST]
    ctx_vecs = [rng.normal(size=16) for _ in range(3)]
    ctx = [NodeContext(i, Tensor(v[None, :]), position=i) for i, v in enumerate(ctx_vecs)]
    layout = causal_layout(ids, kinds, n_context=3)
    with no_grad():
        h, logits = encode_window(model, layout, ctx)
    ref_h, ref_logits = ref_forward(model, ids, kinds, ctx_vecs, [0, 1, 2],
                                    layout.allow)
    assert np.allclose(h.data, ref_h, atol=1e-10)
    assert np.allclose(logits.data, ref_logits, atol=1e-10)


def test_causality_prefix_unchanged_exactly():
    model = small_model(seed=4)
    rng = np.random.default_rng(5)
    ids = rng.integers(0, 256, size=10).tolist()
    layout = causal_layout(ids, [TEXT] * 10, n_context=0)
    with no_grad():
        h1, _ = encode_window(model, layout, [])
    p = 6
    ids2 = list(ids)
    ids2[p] = (ids2[p] + 17) % 256
    with no_grad():
        h2, _ = encode_window(model, causal_layout(ids2, [TEXT] * 10, n_context=0), [])
    assert h1.data[:p].tobytes() == h2.data[:p].tobytes()
    assert not np.array_equal(h1.data[p], h2.data[p])


def test_random_mask_perturbation_causality():
    model = small_model(seed=6)
    rng = np.random.default_rng(7)
    ids = rng.integers(0, 256, size=8).tolist()
    for _ in range(5):
        layout = causal_layout(ids, [TEXT] * 8, n_context=0)
        # randomly close some past keys (keep the diagonal)
        extra = np.tril(rng.random((8, 8)) < 0.5, k=-1)
        layout.allow[:, :][extra] = False
        with no_grad():
            h1, _ = encode_window(model, layout, [])
        # perturbing a key no query is allowed to see must not change anything
        blocked_cols = [j for j in range(8) if not layout.allow[:, j][j + 1:].any()
                        and j == 7]
        if not blocked_cols:
            continue
        ids2 = list(ids)
        ids2[7] = (ids2[7] + 3) % 256
        layout2 = causal_layout(ids2, [TEXT] * 8, n_context=0)
        layout2.allow[:, :][extra] = False
        with no_grad():
            h2, _ = encode_window(model, layout2, [])
        assert np.array_equal(h1.data[:7], h2.data[:7])


def test_layout_errors():
    ids = [1, 2, 3]
    layout = causal_layout(ids, [TEXT] * 3, n_context=2)
    model = small_model()
    with pytest.raises(LayoutError, match="context"):
        encode_window(model, layout, [])      # 2 keys declared, 0 vectors
    bad = causal_layout(ids, [TEXT] * 3, n_context=0)
    bad.allow[0, 2] = True                    # future key
    with pytest.raises(LayoutError, match="causal"):
        encode_window(model, bad, [])


def test_empty_window_rejected():
    with pytest.raises(LayoutError, match="at least one token"):
        AttentionLayout([], [], [], np.zeros((0, 0), dtype=bool)).validate()


# ---------------------------------------------------------------------------
# project_tree_context


def test_project_zero_vector_gives_zero_rows():
    model = small_model()
    k, v = project_tree_context(model, [Tensor(np.zeros((1, 16)))], layer=0)
    assert np.array_equal(k.data, np.zeros((1, 16)))
    assert np.array_equal(v.data, np.zeros((1, 16)))


def test_project_permutation_equivariance():
    model = small_model()
    rng = np.random.default_rng(8)
    vecs = [Tensor(rng.normal(size=(1, 16))) for _ in range(4)]
    k1, v1 = project_tree_context(model, vecs, layer=1)
    perm = [2, 0, 3, 1]
    k2, v2 = project_tree_context(model, [vecs[i] for i in perm], layer=1)
    assert np.array_equal(k1.data[perm], k2.data)
    assert np.array_equal(v1.data[perm], v2.data)


def test_project_width_error():
    model = small_model()
    with pytest.raises(ValueError, match="width"):
        project_tree_context(model, [Tensor(np.zeros((1, 7)))], layer=0)


def test_node_projection_gradients_match_finite_differences():
    model = small_model(seed=9)
    rng = np.random.default_rng(10)
    ids = rng.integers(0, 256, size=5).tolist()
    ctx_vec = rng.normal(size=(1, 16))
    w = model.trainable["l0.wk_node"]

    def loss_fn():
        ctx = [NodeContext(0, Tensor(ctx_vec), position=0)]
        layout = causal_layout(ids, [TEXT] * 5, n_context=1)
        h, _ = encode_window(model, layout, ctx)
        from admtree.autodiff import mul, sum_all
        return sum_all(mul(h, h))

    with Tape():
        backward(loss_fn())
    picks = [(0, 0), (3, 7), (15, 15), (8, 2)]
    for idx in picks:
        def f(t, idx=idx):
            orig = w.data[idx]
            w.data[idx] = t.item()
            try:
                return loss_fn()
            finally:
                w.data[idx] = orig

        fd = finite_difference_grad(f, Tensor([w.data[idx]]), 1e-5).item()
        an = w.grad[idx]
        assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd))
    model.zero_grads()


# ---------------------------------------------------------------------------
# lm_logits


def test_lm_logits_zero_hidden_is_uniform():
    model = small_model()
    logits = lm_logits(model, Tensor(np.zeros((2, 16))))
    assert np.array_equal(logits.data, np.zeros((2, model.config.vocab_size)))


def test_lm_logits_head_permutation():
    model = small_model()
    rng = np.random.default_rng(11)
    h = Tensor(rng.normal(size=(3, 16)))
    base = lm_logits(model, h).data
    perm = rng.permutation(model.config.vocab_size)
    model.frozen["head"].data[...] = model.frozen["head"].data[:, perm]
    # blas may round remainder columns differently after the permutation,
    # so demand equality only to machine precision
    assert np.allclose(lm_logits(model, h).data, base[:, perm], rtol=0, atol=1e-12)


def test_lm_logits_matches_matmul_oracle():
    model = small_model(seed=12)
    rng = np.random.default_rng(13)
    h = rng.normal(size=(4, 16))
    expected = h @ model.frozen["head"].data
    assert np.allclose(lm_logits(model, Tensor(h)).data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# branch separation and phases


def test_zeroing_gist_branch_leaves_text_keys_unchanged():
    model = small_model(seed=14)
    rng = np.random.default_rng(15)
    ids = rng.integers(0, 256, size=5).tolist() + [model.config.gist_id]
    kinds = [TEXT] * 5 + [GIST]
    layout = causal_layout(ids, kinds, n_context=0)
    trace1: dict = {}
    with no_grad():
        h1, _ = encode_window(model, layout, [], trace=trace1)
    for l in range(2):
        for name in (f"l{l}.wq_gt", f"l{l}.wk_gt", f"l{l}.wv_gt"):
            model.trainable[name].data[...] = 0.0
    trace2: dict = {}
    with no_grad():
        h2, _ = encode_window(model, layout, [], trace=trace2)
    for l in range(2):
        # text token rows of the window keys/values are bit-identical
        assert np.array_equal(trace1[f"l{l}.k_win"][:5], trace2[f"l{l}.k_win"][:5])
        assert np.array_equal(trace1[f"l{l}.v_win"][:5], trace2[f"l{l}.v_win"][:5])
    assert not np.array_equal(h1.data[5], h2.data[5])   # the gist state moved
    assert np.array_equal(h1.data[:5], h2.data[:5])     # text states did not


def test_phase_flags_partition_requires_grad():
    model = small_model()
    assert all(t.requires_grad for t in model.trainable.values())
    assert not any(t.requires_grad for t in model.frozen.values())
    model.set_phase("backbone")
    assert all(t.requires_grad for t in model.frozen.values())
    assert not any(t.requires_grad for t in model.trainable.values())
    model.set_phase("gist")


def test_aggregator_stays_small_next_to_backbone():
    model = ParameterSet.init(BackboneConfig(), seed=0)   # desk defaults
    ratio = model.aggregator.param_count() / model.frozen_param_count()
    assert ratio < 0.05


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = small_model(seed=16)
    path = tmp_path / "model.ckpt"
    model.save(path)
    loaded = ParameterSet.load(path)
    assert loaded.config.to_dict() == model.config.to_dict()
    for name, t in model.frozen.items():
        assert loaded.frozen[name].data.tobytes() == t.data.tobytes()
    for name, t in model.trainable.items():
        assert loaded.trainable[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_partitions_and_magic(tmp_path):
    model = small_model()
    path = tmp_path / "model.ckpt"
    model.save(path, include_trainable=False)
    raw = path.read_bytes()
    assert raw[:4] == b"ADMT"
    from admtree.checkpoint import read_container
    entries = read_container(path)
    assert any(n.startswith("frozen/") for n in entries)
    assert not any(n.startswith("trainable/") for n in entries)
    loaded = ParameterSet.load(path)     # trainable side falls back to init
    assert loaded.frozen["head"].data.tobytes() == model.frozen["head"].data.tobytes()


def test_corrupt_checkpoint_reports_offset(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="offset"):
        ParameterSet.load(path)


def test_cached_leaf_context_mode_runs():
    model = small_model(seed=17, leaf_ctx="cached")
    rng = np.random.default_rng(18)
    ids = rng.integers(0, 256, size=4).tolist() + [model.config.gist_id]
    kinds = [TEXT] * 4 + [GIST]
    layout = causal_layout(ids, kinds, n_context=0)
    cap: list = []
    with no_grad():
        h, _ = encode_window(model, layout, [], kv_capture=cap)
    assert len(cap) == model.config.n_layers
    ctx = [NodeContext(0, Tensor(h.data[4:5]), position=0, cached_kv=cap)]
    layout2 = causal_layout(ids, kinds, n_context=1)
    with no_grad():
        h2, _ = encode_window(model, layout2, ctx)
    assert np.isfinite(h2.data).all()
