import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dietlab import numerics as nx
from dietlab.backbone import Diet, Hyper, apply_diet, build_backbone, forward_scores, keep_count
from dietlab.data import window
from dietlab.dietgen import (
    SharedBuffer, binarize_topk, build_stack, correct_scores, dieting_bind, element_scores,
    embed_windows, extract_all, extract_features, generate_diet, generate_masks, masked_weight,
    row_importance, shared_weights, ste_backward,
)

SMALL = Hyper(d=8, blocks=1, heads=2, max_len=5)


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def gru_oracle(x, h, Wx, Wh, bx, bh):
    d = len(h)
    a, b = x @ Wx + bx, h @ Wh + bh
    z = sig(a[:d] + b[:d])
    r = sig(a[d:2 * d] + b[d:2 * d])
    n = np.tanh(a[2 * d:] + r * b[2 * d:])
    return (1 - z) * n + z * h


def rand_gru(d, r):
    return {"Wx": r.standard_normal((d, 3 * d)) * 0.5, "Wh": r.standard_normal((d, 3 * d)) * 0.5,
            "bx": r.standard_normal(3 * d) * 0.1, "bh": r.standard_normal(3 * d) * 0.1}


# --- extractor ---------------------------------------------------------------

def test_zero_gru_gives_zero_feature(rng):
    d = 4
    gru = {k: np.zeros(s) for k, s in (("Wx", (d, 3 * d)), ("Wh", (d, 3 * d)), ("bx", 3 * d), ("bh", 3 * d))}
    assert np.array_equal(extract_features(gru, rng.standard_normal((3, d))), np.zeros(d))


def test_one_step_matches_hand_cell(rng):
    gru = rand_gru(4, rng)
    x = rng.standard_normal(4)
    expect = gru_oracle(x, np.zeros(4), **gru)
    np.testing.assert_allclose(extract_features(gru, x[None]), expect, rtol=1e-12, atol=1e-14)


def test_multi_step_matches_hand_recurrence(rng):
    gru = rand_gru(5, rng)
    xs = rng.standard_normal((4, 5))
    h = np.zeros(5)
    for x in xs:
        h = gru_oracle(x, h, **gru)
    np.testing.assert_allclose(extract_features(gru, xs), h, rtol=1e-12, atol=1e-14)


def test_order_sensitivity(rng):
    gru = rand_gru(4, rng)
    xs = rng.standard_normal((3, 4))
    assert not np.allclose(extract_features(gru, xs), extract_features(gru, xs[::-1]))


def test_extract_features_rejects_empty():
    with pytest.raises(ValueError):
        extract_features(rand_gru(2, np.random.default_rng(0)), np.zeros((0, 2)))


def test_stacked_extractor_equals_per_layer_and_ignores_padding():
    bb = build_backbone("SASRec", 15, SMALL, nx.Rng(0))
    stack = build_stack(bb, "DIET", 0.2, nx.Rng(1))
    ctx = np.array([window(np.array([3, 1, 4]), 5), window(np.array([1, 5, 9, 2, 6]), 5)])
    T = {k: nx.Tensor(v) for k, v in stack.params.items()}
    emb, valid = embed_windows(bb, ctx)
    g = extract_all(stack, T, emb, valid).data
    for j, info in enumerate(stack.layers):
        gru = stack.layer_params(info.name, "gru")
        for b, row in enumerate(ctx):
            seq = bb.params["item_emb"][row[row >= 0]]
            np.testing.assert_allclose(g[j, b], extract_features(gru, seq), rtol=1e-12, atol=1e-14)


# --- hypernetworks -----------------------------------------------------------

def test_zero_hypernet_returns_bias(rng):
    G = {"weight": np.zeros((3, 6)), "bias": np.arange(6.0)}
    assert np.array_equal(element_scores(G, rng.standard_normal(3), (2, 3)), np.arange(6.0).reshape(2, 3))


def test_element_scores_matmul_oracle_and_personalization(rng):
    G = {"weight": rng.standard_normal((4, 6)), "bias": rng.standard_normal(6)}
    g1, g2 = rng.standard_normal(4), rng.standard_normal(4)
    oracle = nx.matmul(nx.Tensor(g1[None]), nx.Tensor(G["weight"])).data[0] + G["bias"]
    np.testing.assert_allclose(element_scores(G, g1, (3, 2)).ravel(), oracle, rtol=1e-14)
    assert not np.array_equal(element_scores(G, g1, (3, 2)), element_scores(G, g2, (3, 2)))
    with pytest.raises(nx.ShapeError):
        element_scores(G, g1, (4, 2))


def test_row_importance_examples(rng):
    zero = {"weight": np.zeros((2, 2)), "bias": np.zeros(2)}
    np.testing.assert_allclose(row_importance(zero, np.ones(2)), [0.5, 0.5])
    logs = {"weight": np.zeros((2, 2)), "bias": np.log([1.0, 2.0])}
    np.testing.assert_allclose(row_importance(logs, np.ones(2)), [1 / 3, 2 / 3], rtol=1e-14)
    r = row_importance({"weight": rng.standard_normal((3, 7)) * 5, "bias": rng.standard_normal(7)},
                       rng.standard_normal(3))
    assert np.all((r > 0) & (r < 1)) and abs(r.sum() - 1) < 1e-12


def test_correct_scores_examples():
    S = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(correct_scores(S, [0.5, 0.5]), [[0.5, 1.0], [1.5, 2.0]])
    S2 = np.array([[9.0, 9.0], [1.0, 1.0]])
    mask = binarize_topk(correct_scores(S2, [0.001, 0.999]), 0.5)
    assert mask.tolist() == [[False, False], [True, True]]
    with pytest.raises(nx.ShapeError):
        correct_scores(S, [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 1.0), st.floats(1e-3, 10.0), st.integers(0, 2**31))
def test_uniform_rows_preserve_topk(rows, cols, keep, c, seed):
    S = np.random.default_rng(seed).standard_normal((rows, cols))
    assert np.array_equal(binarize_topk(correct_scores(S, np.full(rows, c)), keep), binarize_topk(S, keep))


# --- binarizer ---------------------------------------------------------------

def test_binarize_examples():
    assert binarize_topk(np.array([0.5, -0.9, 0.1, 0.3]), 0.5).tolist() == [True, True, False, False]
    assert binarize_topk(np.random.default_rng(0).standard_normal((3, 4)), 1.0).all()
    # ties broken toward the lowest flat index
    assert binarize_topk(np.array([1.0, 1.0, 1.0, 1.0]), 0.5).tolist() == [True, True, False, False]
    assert binarize_topk(np.array([0.0, -2.0, 2.0, 1.0]), 0.25).tolist() == [False, True, False, False]


def test_binarize_batched_rows_independent(rng):
    S = rng.standard_normal((5, 3, 4))
    batched = binarize_topk(S, 0.3, batch_dims=1)
    for b in range(5):
        assert np.array_equal(batched[b], binarize_topk(S[b], 0.3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.floats(0.001, 1.0), st.integers(0, 2**31), st.booleans())
def test_binarize_popcount(n, keep, seed, coarse):
    s = np.random.default_rng(seed).standard_normal(n)
    if coarse:
        s = np.round(s)
    m = binarize_topk(s, keep)
    assert m.sum() == keep_count(n, keep)


# --- STE ---------------------------------------------------------------------

def test_ste_unit_upstream_gives_weight(rng):
    w = rng.standard_normal((3, 3))
    assert np.array_equal(ste_backward(np.ones((3, 3)), w), w)


def test_ste_graph_gradient_reaches_dropped_positions(rng):
    w = rng.standard_normal((4, 4))
    up = rng.standard_normal((4, 4))
    s = nx.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    out = masked_weight(nx.Tensor(w), s, 0.25, ste="identity")
    nx.backward(out, up)
    mask = binarize_topk(s.data, 0.25)
    assert np.array_equal(out.data, w * mask)
    assert np.array_equal(s.grad, up * w)
    assert np.all(s.grad[~mask] != 0)


def test_end_to_end_hypernet_gradient_by_hand():
    g = np.array([0.7, -1.3])
    Gw = np.array([[0.2, -0.5, 1.1, 0.4], [0.9, 0.3, -0.6, 0.05]])
    Gb = np.array([0.1, 0.0, -0.2, 0.3])
    w = np.array([[1.5, -2.0], [0.5, 3.0]])
    U = np.array([[0.3, -0.7], [1.2, 0.4]])
    W = nx.Tensor(Gw, requires_grad=True)
    scores = nx.reshape(nx.matmul(nx.Tensor(g[None]), W) + Gb, (2, 2))
    loss = nx.reduce_sum(masked_weight(nx.Tensor(w), scores, 0.5, ste="identity") * U)
    nx.backward(loss)
    # dL/dS = U*w (STE), S = g @ Gw + b  =>  dL/dGw = outer(g, vec(U*w))
    np.testing.assert_allclose(W.grad, np.outer(g, (U * w).ravel()), rtol=1e-14)


def test_magnitude_ste_routes_gradient_through_abs(rng):
    w = rng.standard_normal((3, 5))
    up = rng.standard_normal((3, 5))
    raw = rng.standard_normal((3, 5))
    s = nx.Tensor(raw, requires_grad=True)
    out = masked_weight(nx.Tensor(w), s, 0.4, ste="magnitude")
    nx.backward(out, up)
    assert np.array_equal(out.data, w * binarize_topk(raw, 0.4))
    assert np.array_equal(s.grad, up * w * np.where(raw < 0, -1.0, 1.0))
    with pytest.raises(ValueError):
        masked_weight(nx.Tensor(w), s, 0.4, ste="sign")


# --- diet generation ---------------------------------------------------------

@pytest.mark.parametrize("kind", ["mask", "MG", "DIET"])
@pytest.mark.parametrize("arch", ["SASRec", "Caser"])
def test_generated_masks_have_exact_popcount(kind, arch):
    bb = build_backbone(arch, 12, SMALL, nx.Rng(0))
    stack = build_stack(bb, kind, 0.15, nx.Rng(2))
    ctx = np.array([window(np.array([1, 2, 3]), 5), window(np.arange(7) % 12, 5)])
    masks = generate_masks(stack, bb, ctx)
    for info in bb.layers:
        m = masks[info.name]
        assert m.shape == (2,) + info.shape
        assert all(int(m[b].sum()) == keep_count(info.size, 0.15) for b in range(2))


def test_generate_diet_deterministic_and_personal():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    stack = build_stack(bb, "DIET", 0.2, nx.Rng(1))
    a = generate_diet(stack, [1, 2, 3], bb)
    assert a == generate_diet(stack, [1, 2, 3], bb)
    assert a != generate_diet(stack, [7, 8, 9, 10], bb)
    apply_diet(bb, a)  # passes validation


def test_mask_stack_is_user_independent():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    stack = build_stack(bb, "mask", 0.2, nx.Rng(1))
    assert generate_diet(stack, [1, 2, 3], bb) == generate_diet(stack, [7, 8, 9, 10], bb)


def test_keep_all_is_dense():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    stack = build_stack(bb, "DIET", 1.0, nx.Rng(1))
    diet = generate_diet(stack, [4, 5], bb)
    assert diet == Diet.full(bb)
    dense = apply_diet(bb, Diet.full(bb))
    assert np.array_equal(forward_scores(apply_diet(bb, diet), [4, 5]), forward_scores(dense, [4, 5]))


def test_uncorrected_masks_differ_from_corrected():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    stack = build_stack(bb, "DIET", 0.2, nx.Rng(1))
    ctx = np.array([window(np.array([1, 2, 3]), 5)])
    a = generate_masks(stack, bb, ctx, corrected=True)
    b = generate_masks(stack, bb, ctx, corrected=False)
    assert any(not np.array_equal(a[k], b[k]) for k in a)


# --- DIETING -----------------------------------------------------------------

def test_dieting_prefix_aliasing():
    bb = build_backbone("Caser", 12, Hyper(d=8, max_len=5, horiz_filters=2, vert_filters=3), nx.Rng(0))
    buf = SharedBuffer.for_backbone(bb, nx.Rng(1))
    assert buf.w_max.size == max(i.size for i in bb.layers)
    shared = dieting_bind(buf, bb)
    for info in bb.layers:
        w = shared.weight(info.name)
        assert np.shares_memory(w, buf.w_max)
        assert np.array_equal(w.ravel(), buf.w_max[: info.size])
    buf.w_max[0] = 7.0
    assert all(shared.weight(i.name).flat[0] == 7.0 for i in bb.layers)


def test_dieting_equal_size_layers_share_weights():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    shared = dieting_bind(SharedBuffer.for_backbone(bb), bb)
    a, b = bb.layers[0].name, bb.layers[1].name
    assert np.array_equal(shared.weight(a), shared.weight(b))
    assert shared.params["item_emb"] is not bb.params["item_emb"]


def test_dieting_graph_view_matches_numpy_view():
    bb = build_backbone("Caser", 12, Hyper(d=8, max_len=5, horiz_filters=2, vert_filters=3), nx.Rng(0))
    buf = SharedBuffer.for_backbone(bb)
    bound = dieting_bind(buf, bb)
    views = shared_weights(nx.Tensor(buf.w_max), bb.layers)
    assert all(np.array_equal(views[i.name].data, bound.weight(i.name)) for i in bb.layers)


def test_dieting_rejects_small_buffer():
    bb = build_backbone("SASRec", 12, SMALL, nx.Rng(0))
    with pytest.raises(ValueError):
        dieting_bind(SharedBuffer(np.zeros(10)), bb)
