"""Semantic tree: aggregation, incremental construction, flatten, retrieval."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admtree.autodiff import Tensor, no_grad
from admtree.tree import (Aggregator, SemanticTree, aggregate, build_batch,
                          retrieve_top_nodes)

D = 6


def identity_agg(d=D):
    eye = np.eye(d)
    return Aggregator(Tensor(eye), Tensor(eye), Tensor(eye), Tensor(eye))


def random_agg(seed, d=D, d_inner=None):
    rng = np.random.default_rng(seed)
    di = d_inner or d
    return Aggregator(Tensor(rng.normal(size=(d, di))),
                      Tensor(rng.normal(size=(d, di))),
                      Tensor(rng.normal(size=(d, di))),
                      Tensor(rng.normal(size=(di, d))))


def leaves_for(rng, m, d=D):
    return [Tensor(rng.normal(size=(1, d))) for _ in range(m)]


# ---------------------------------------------------------------------------
# aggregate


def test_identical_children_identity_projections():
    agg = identity_agg()
    h = np.random.default_rng(0).normal(size=(1, D))
    out = aggregate(agg, [Tensor(h), Tensor(h)])
    assert np.allclose(out.data, h, atol=1e-12)


def test_singleton_is_identity():
    agg = random_agg(1)
    h = Tensor(np.random.default_rng(2).normal(size=(1, D)))
    assert aggregate(agg, [h]) is h


def test_pair_matches_dense_two_by_two_oracle():
    agg = random_agg(3)
    rng = np.random.default_rng(4)
    left, right = rng.normal(size=(1, D)), rng.normal(size=(1, D))
    out = aggregate(agg, [Tensor(left), Tensor(right)])

    x = np.concatenate([left, right])
    q, k, v = x @ agg.wq.data, x @ agg.wk.data, x @ agg.wv.data
    s = q @ k.T / np.sqrt(D)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    expected = ((p @ v) @ agg.wo.data).mean(axis=0)
    assert np.allclose(out.data[0], expected, atol=1e-12)


def test_aggregate_arity_error():
    agg = identity_agg()
    h = Tensor(np.zeros((1, D)))
    with pytest.raises(ValueError, match="children"):
        aggregate(agg, [h, h, h])


def test_swapping_children_with_symmetric_projections_is_invariant():
    rng = np.random.default_rng(5)
    wq = rng.normal(size=(D, D))
    agg = Aggregator(Tensor(wq), Tensor(wq),          # k = q
                     Tensor(rng.normal(size=(D, D))),
                     Tensor(rng.normal(size=(D, D))))
    a, b = Tensor(rng.normal(size=(1, D))), Tensor(rng.normal(size=(1, D)))
    out1 = aggregate(agg, [a, b])
    out2 = aggregate(agg, [b, a])
    assert np.allclose(out1.data, out2.data, atol=1e-12)


# ---------------------------------------------------------------------------
# incremental construction


def test_append_to_empty():
    tree = SemanticTree(identity_agg())
    tree.append_leaf(Tensor(np.ones((1, D))))
    assert tree.leaf_count == 1 and tree.internal_count() == 0


def test_four_appends_make_a_perfect_tree():
    tree = SemanticTree(random_agg(6))
    rng = np.random.default_rng(7)
    for leaf in leaves_for(rng, 4):
        tree.append_leaf(leaf)
    assert tree.internal_count() == 3
    tree.seal()
    root = tree.nodes[tree.root_id]
    assert root.height == 2 and root.span == (0, 3)
    assert not tree.seal_ids        # the root already existed as a carry


def test_five_leaf_structure_and_flatten_order():
    tree = SemanticTree(random_agg(8))
    rng = np.random.default_rng(9)
    for leaf in leaves_for(rng, 5):
        tree.append_leaf(leaf)
    tree.seal()
    assert tree.internal_count() == 4
    flat = tree.flatten()
    assert [n.height for n in flat] == [0, 0, 0, 0, 0, 1, 1, 2, 3]
    assert [n.span for n in flat] == [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4),
                                      (0, 1), (2, 3), (0, 3), (0, 4)]


def test_batch_six_leaves():
    rng = np.random.default_rng(10)
    tree = build_batch(leaves_for(rng, 6), random_agg(11))
    assert tree.internal_count() == 5
    assert tree.nodes[tree.root_id].span == (0, 5)


def test_batch_single_leaf_root_is_the_leaf():
    tree = build_batch([Tensor(np.ones((1, D)))], random_agg(12))
    assert tree.root_id == tree.leaf_ids[0]
    assert tree.node_count == 1


def test_incremental_prefixes_match_batch_exactly():
    # the unsealed frontier after m appends equals the batch tree on the
    # same prefix with its seal-time merge chain removed
    agg = random_agg(13)
    rng = np.random.default_rng(14)
    all_leaves = leaves_for(rng, 9)
    with no_grad():
        inc = SemanticTree(agg)
        for m, leaf in enumerate(all_leaves, start=1):
            inc.append_leaf(Tensor(leaf.data))
            bat = build_batch([Tensor(l.data) for l in all_leaves[:m]], agg)
            bat_nodes = {n.span: n for n in bat.flatten()
                         if n.id not in bat.seal_ids}
            inc_nodes = {n.span: n for n in inc.flatten()}
            assert set(inc_nodes) == set(bat_nodes), f"prefix {m}"
            for span, node in inc_nodes.items():
                assert node.hidden.data.tobytes() == \
                    bat_nodes[span].hidden.data.tobytes(), f"prefix {m} span {span}"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64))
def test_node_count_identity(m):
    agg = identity_agg(2)
    leaves = [Tensor(np.ones((1, 2)) * i) for i in range(m)]
    tree = build_batch(leaves, agg)
    assert tree.node_count == 2 * m - 1
    assert tree.internal_count() == m - 1
    assert tree.leaf_count == m


def test_incremental_equals_batch_sealed_up_to_32():
    agg = random_agg(15)
    rng = np.random.default_rng(16)
    with no_grad():
        for m in range(1, 33):
            leaves = leaves_for(rng, m)
            inc = SemanticTree(agg)
            for leaf in leaves:
                inc.append_leaf(Tensor(leaf.data))
            inc.seal()
            bat = build_batch([Tensor(l.data) for l in leaves], agg)
            fi, fb = inc.flatten(), bat.flatten()
            assert len(fi) == len(fb) == 2 * m - 1
            for a, b in zip(fi, fb):
                assert (a.span, a.height, a.kind) == (b.span, b.height, b.kind)
                assert a.hidden.data.tobytes() == b.hidden.data.tobytes()
            assert inc.nodes[inc.root_id].span == bat.nodes[bat.root_id].span


def test_flatten_children_precede_parents():
    rng = np.random.default_rng(17)
    tree = build_batch(leaves_for(rng, 13), random_agg(18))
    position = {n.id: i for i, n in enumerate(tree.flatten())}
    for node in tree.nodes.values():
        for child in node.children:
            assert position[child] < position[node.id]


def test_unsealed_flatten_after_three_appends():
    tree = SemanticTree(random_agg(19))
    rng = np.random.default_rng(20)
    for leaf in leaves_for(rng, 3):
        tree.append_leaf(leaf)
    flat = tree.flatten()
    assert [n.span for n in flat] == [(0, 0), (1, 1), (2, 2), (0, 1)]
    assert [n.kind for n in flat] == ["leaf", "leaf", "leaf", "internal"]


def test_append_to_sealed_tree_raises_then_unseal_restores():
    tree = SemanticTree(random_agg(21))
    rng = np.random.default_rng(22)
    for leaf in leaves_for(rng, 3):
        tree.append_leaf(leaf)
    tree.seal()
    with pytest.raises(RuntimeError, match="sealed"):
        tree.append_leaf(Tensor(np.zeros((1, D))))
    sealed_count = tree.node_count
    tree.unseal()
    assert tree.node_count == sealed_count - 1   # one seal merge for 3 leaves
    tree.append_leaf(Tensor(np.zeros((1, D))))
    assert tree.leaf_count == 4


def test_seal_empty_tree_raises():
    with pytest.raises(RuntimeError, match="empty"):
        SemanticTree(identity_agg()).seal()


# ---------------------------------------------------------------------------
# retrieval


def test_retrieve_identity_at_full_fraction():
    rng = np.random.default_rng(23)
    tree = build_batch(leaves_for(rng, 6), random_agg(24))
    nodes = tree.flatten()
    kept = retrieve_top_nodes(nodes, rng.random(len(nodes)), 1.0)
    assert kept == nodes


def test_retrieve_example_keeps_three_of_four():
    rng = np.random.default_rng(25)
    tree = build_batch(leaves_for(rng, 3), random_agg(26))
    nodes = tree.flatten()[:4]
    kept = retrieve_top_nodes(nodes, [0.4, 0.1, 0.3, 0.2], 0.75)
    assert kept == [nodes[0], nodes[2], nodes[3]]


def test_retrieve_ties_break_by_flatten_index():
    rng = np.random.default_rng(27)
    tree = build_batch(leaves_for(rng, 4), random_agg(28))
    nodes = tree.flatten()
    kept = retrieve_top_nodes(nodes, [1.0] * len(nodes), 0.5)
    expect = int(np.ceil(0.5 * len(nodes)))
    assert kept == nodes[:expect]


def test_retrieve_bad_fraction_raises():
    with pytest.raises(ValueError, match="keep_fraction"):
        retrieve_top_nodes([], [], 0.0)


def test_retrieve_score_length_mismatch():
    rng = np.random.default_rng(29)
    tree = build_batch(leaves_for(rng, 2), random_agg(30))
    with pytest.raises(ValueError, match="scores"):
        retrieve_top_nodes(tree.flatten(), [1.0], 0.5)
