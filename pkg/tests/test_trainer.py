import math

import numpy as np
import pytest

from dietlab import numerics as nx
from dietlab.backbone import Hyper, build_backbone, keep_count
from dietlab.data import SplitSpec, build_sequences, markov_dataset, split
from dietlab.dietgen import dieting_bind
from dietlab.metrics import evaluate
from dietlab.trainer import (
    OptimState, TrainConfig, _sample_negatives, adam_step, canonical_mode, compute_loss, fit, triangular_lr,
)

TINY = Hyper(d=8, blocks=1, heads=2, max_len=5)


@pytest.fixture(scope="module")
def markov():
    lg = markov_dataset(n_users=40, n_items=12, length=8)
    sp = split(lg, SplitSpec(k_core=1))
    return sp, build_sequences(sp.train, 5)


# --- loss and schedule -------------------------------------------------------

def test_loss_examples():
    assert compute_loss(0.0, [0.0]) == pytest.approx(2 * math.log(2), rel=1e-15)
    assert compute_loss(40.0, [-40.0]) < 1e-15
    vals = [compute_loss(s, [0.3, -0.2]) for s in np.linspace(-3, 3, 13)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert compute_loss(1.0, np.zeros(0)) == pytest.approx(math.log1p(math.exp(-1.0)))


def test_triangular_lr():
    assert triangular_lr(0, 0.01, 10) == 0
    assert triangular_lr(5, 0.01, 10) == 0.01
    assert triangular_lr(10, 0.01, 10) == 0
    assert triangular_lr(2, 0.01, 10) == pytest.approx(0.004)
    assert triangular_lr(8, 0.01, 10) == pytest.approx(0.004)
    with pytest.raises(ValueError):
        triangular_lr(0, 0.01, 1)


def test_adam_zero_gradient_and_sign_limit():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimState.for_params(p)
    adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    assert st.step == 1 and np.array_equal(p["w"], [1.0, -2.0])
    p = {"w": np.zeros(3)}
    st = OptimState.for_params(p)
    prev = p["w"].copy()
    for _ in range(200):
        adam_step(p, {"w": np.array([3.0, -0.01, 100.0])}, st, 0.01)
        step = p["w"] - prev
        prev = p["w"].copy()
    np.testing.assert_allclose(step, [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_rejects_nonfinite():
    p = {"w": np.zeros(2)}
    with pytest.raises(nx.NumericError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, OptimState.for_params(p), 0.1)


def test_config_validation_and_aliases():
    assert TrainConfig(mode="+MG").mode == "MG"
    assert TrainConfig(mode="mask-only").mode == "mask"
    assert TrainConfig(mode="random-prune").mode == "random"
    assert canonical_mode("Base") == "base"
    for bad in ({"keep_ratio": 0.0}, {"keep_ratio": 1.5}, {"lr_base": 0.0}, {"mode": "dense"}, {"ste": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_negatives_never_hit_target():
    rng = nx.Rng(0)
    tg = np.array([0, 5, 11] * 200)
    negs = _sample_negatives(rng, tg, 12, 3)
    assert negs.min() >= 0 and negs.max() < 12
    assert not (negs == tg[:, None]).any()


# --- fit ---------------------------------------------------------------------

def test_empty_split_rejected(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    with pytest.raises(ValueError):
        fit(TrainConfig(epochs=1), s.__class__(s.users[:0], s.contexts[:0], s.targets[:0]), bb)


@pytest.mark.parametrize("mode", ["mask", "MG", "DIET"])
def test_backbone_frozen_every_epoch(markov, mode):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    snap = {k: v.tobytes() for k, v in bb.params.items()}

    def check(epoch, model):
        assert model.backbone is bb
        assert all(bb.params[k].tobytes() == snap[k] for k in snap)
        return {}

    res = fit(TrainConfig(mode=mode, epochs=2, keep_ratio=0.3), s, bb, on_epoch=check)
    assert all(bb.params[k].tobytes() == snap[k] for k in snap)
    assert res.model.stack is not None and np.isfinite(res.final_loss)


def test_train_embeddings_touches_only_the_item_table(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    snap = {k: v.tobytes() for k, v in bb.params.items()}
    res = fit(TrainConfig(mode="DIET", epochs=1, keep_ratio=0.3, train_embeddings=True), s, bb)
    assert all(bb.params[k].tobytes() == snap[k] for k in snap)
    served = res.model.backbone.params
    assert served["item_emb"].tobytes() != snap["item_emb"]
    assert all(served[k].tobytes() == snap[k] for k in snap if k != "item_emb")


def test_base_trains_backbone_copy(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    before = bb.params["item_emb"].copy()
    res = fit(TrainConfig(mode="base", epochs=1), s, bb)
    assert np.array_equal(bb.params["item_emb"], before)
    assert not np.array_equal(res.model.backbone.params["item_emb"], before)


def test_random_prune_keeps_fixed_mask(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    res = fit(TrainConfig(mode="random", epochs=1, keep_ratio=0.25), s, bb)
    diet = res.model.fixed_diet
    assert all(int(m.sum()) == keep_count(i.size, 0.25) for i, m in zip(bb.layers, diet.masks.values()))
    masks = res.model.masks(s.contexts[:3])
    assert all(np.array_equal(masks[k][2], diet.masks[k]) for k in masks)


def test_lr_trace_and_log(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    cfg = TrainConfig(mode="mask", epochs=2, batch_size=64, cycle_length=6, lr_base=0.01)
    res = fit(cfg, s, bb)
    assert [r[2] for r in res.log_rows] == [triangular_lr(k, 0.01, 6) for k in range(len(res.log_rows))]
    lines = res.log_csv().splitlines()
    assert lines[0] == "epoch,step,lr,loss" and len(lines) == len(res.log_rows) + 1


def test_fit_is_deterministic(markov):
    _, s = markov
    bb = build_backbone("SASRec", 12, TINY, nx.Rng(0))
    a = fit(TrainConfig(mode="DIET", epochs=1, seed=3), s, bb)
    b = fit(TrainConfig(mode="DIET", epochs=1, seed=3), s, bb)
    assert a.log_csv() == b.log_csv()
    assert all(a.model.stack.params[k].tobytes() == b.model.stack.params[k].tobytes() for k in a.model.stack.params)


def test_dieting_buffer_aliases_after_training(markov):
    _, s = markov
    bb = build_backbone("Caser", 12, Hyper(d=8, max_len=5, horiz_filters=2, vert_filters=3), nx.Rng(0))
    res = fit(TrainConfig(mode="DIETING", epochs=2, keep_ratio=0.3), s, bb)
    buf = res.model.buffer
    init = nx.init_xavier_normal(max(bb.layers, key=lambda i: i.size).kernel, nx.Rng(0).child(3)).reshape(-1)
    assert not np.array_equal(buf.w_max, init)  # the buffer is trained
    served = res.model.serving_backbone
    for info in bb.layers:
        assert served.weight(info.name).tobytes() == buf.w_max[: info.size].tobytes()


def test_diet_solves_markov_chain():
    lg = markov_dataset(n_users=200, n_items=30, length=12)
    sp = split(lg, SplitSpec(k_core=1))
    s = build_sequences(sp.train, 5)
    bb = build_backbone("SASRec", sp.n_items, Hyper(d=16, blocks=2, heads=2, max_len=5), nx.Rng(0))
    hits = []

    def probe(epoch, model):
        r = evaluate(model, sp)
        hits.append(r["hit"])
        return r

    fit(TrainConfig(mode="DIET", keep_ratio=0.3, epochs=50, lr_base=0.001, seed=0), s, bb, on_epoch=probe)
    assert max(hits) == 1.0
