import dataclasses

import numpy as np
import pytest

from mtlmark import nn, training
from mtlmark.data import SplitSpec, gen_blobs, split
from mtlmark.errors import StateError
from mtlmark.keys import DomainEncoder, WatermarkKey, build_wm_dataset
from mtlmark.nn import Layer, MultiTaskModel
from mtlmark.training import TrainConfig


@pytest.fixture(scope="module")
def small():
    ds = gen_blobs(4, 16, 100, 0.15, seed=0)
    tr, te, _ = split(ds, SplitSpec(0.6, 0.4, 0.0, 0))
    model = nn.make_model(16, (32, 32), 4, wm_hidden=(32,), seed=0)
    cfg = TrainConfig(epochs_primary=20, epochs_wm=40)
    clean, rep = training.train_primary(model, tr, cfg, te)
    wm = build_wm_dataset(WatermarkKey(b"train-tests", 64, 16), DomainEncoder.vector(16, 16))
    return tr, te, clean, rep, cfg, wm


def test_zero_lr_leaves_weights(small):
    tr, te, _, _, _, _ = small
    model = nn.make_model(16, (8,), 4, seed=1)
    cfg = TrainConfig(lr_primary=0.0, epochs_primary=3)
    out, rep = training.train_primary(model, tr, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(model.arrays(), out.arrays()))
    assert len(set(rep.curves["primary"])) == 1


def test_primary_convergence_on_tight_blobs():
    ds = gen_blobs(4, 16, 250, 0.1, seed=0)
    tr, te, _ = split(ds, SplitSpec(0.6, 0.4, 0.0, 0))
    model = nn.make_model(16, (64, 64, 64), 4, seed=0)
    _, rep = training.train_primary(model, tr, TrainConfig(epochs_primary=50), te)
    assert rep.accuracies["primary_test"] >= 0.98


def test_primary_curve_monotone_within_band(small):
    curve = small[3].curves["primary"]
    assert len(curve) == 20 and np.isfinite(curve).all()
    assert all(b <= a * 1.05 for a, b in zip(curve, curve[1:]))


def test_primary_snapshot_and_head_untouched(small):
    tr, _, clean, rep, cfg, _ = small
    fresh = nn.make_model(16, (32, 32), 4, wm_hidden=(32,), seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(fresh.arrays(("c_wm",)), clean.arrays(("c_wm",))))
    assert all(np.array_equal(a, b) for a, b in zip(clean.anchor, clean.arrays(training.ANCHORED)))
    assert rep.w0_fingerprint


def test_r_func_examples():
    model = MultiTaskModel([Layer([[1.0, 2.0]], [0.0])], [Layer([[1.0], [1.0]], [0.0, 0.0], "identity")])
    anchor = training.snapshot(model)
    assert training.r_func(model, anchor) == 0.0
    model.backbone[0].W[0, 1] += 3.0
    assert training.r_func(model, anchor) == 9.0
    with pytest.raises(StateError):
        training.r_func(model.published())


def test_r_func_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    model = nn.make_model(3, (4,), 2, seed=0)
    anchor = [a + rng.normal(size=a.shape) for a in model.arrays(training.ANCHORED)]
    grad = training.r_func_grad(model, anchor)
    for arr, g in zip(model.arrays(training.ANCHORED), grad):
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + 1e-6
            up = training.r_func(model, anchor)
            arr[i] = old - 1e-6
            down = training.r_func(model, anchor)
            arr[i] = old
            assert (up - down) / 2e-6 == pytest.approx(g[i], rel=1e-6, abs=1e-8)


def test_simulate_tuning_properties(small):
    tr, _, clean, _, cfg, _ = small
    same = training.simulate_tuning(clean, tr, dataclasses.replace(cfg, k=0), 7)
    assert nn.serialize(same) == nn.serialize(clean)
    before = [a.copy() for a in clean.arrays()]
    a = training.simulate_tuning(clean, tr, cfg, 7)
    b = training.simulate_tuning(clean, tr, cfg, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert all(np.array_equal(x, y) for x, y in zip(before, clean.arrays()))
    sub = training.tuning_subset(tr, cfg, 7)
    small_lr = dataclasses.replace(cfg, lr_inner=1e-3)
    tuned = training.simulate_tuning(clean, tr, small_lr, 7)
    obj = lambda m: training.primary_objective(m, sub, cfg.lambda0)
    assert obj(tuned) <= obj(clean) + 1e-9


def test_r_da_k0_is_plain_watermark_loss(small):
    tr, _, clean, _, cfg, wm = small
    val, _ = training.r_da(clean, tr, wm.inputs, wm.labels, dataclasses.replace(cfg, k=0), [1, 2])
    plain = nn.cross_entropy(nn.forward(clean, wm.inputs, "watermark").logits, wm.labels)
    assert val == pytest.approx(plain, rel=1e-12)


def test_r_da_mean_over_seeds(small):
    tr, _, clean, _, cfg, wm = small
    v2, g2 = training.r_da(clean, tr, wm.inputs, wm.labels, cfg, [11, 12])
    v_a, g_a = training.r_da(clean, tr, wm.inputs, wm.labels, cfg, [11])
    v_b, g_b = training.r_da(clean, tr, wm.inputs, wm.labels, cfg, [12])
    assert v2 == pytest.approx((v_a + v_b) / 2, rel=1e-12)
    for x, a, b in zip(g2.arrays(), g_a.arrays(), g_b.arrays()):
        np.testing.assert_allclose(x, (a + b) / 2, rtol=1e-12, atol=1e-15)


def test_r_da_first_order_step_descends(small):
    tr, _, clean, _, cfg, wm = small
    seeds = [3, 4]
    v0, g = training.r_da(clean, tr, wm.inputs, wm.labels, cfg, seeds)
    moved = clean.copy()
    nn.sgd_step(moved.arrays(), g.arrays(), 1e-3)
    v1, _ = training.r_da(moved, tr, wm.inputs, wm.labels, cfg, seeds)
    assert v1 < v0


def test_embed_requires_anchor(small):
    tr, _, clean, _, cfg, wm = small
    with pytest.raises(StateError):
        training.embed_watermark(clean.published().with_head(clean.c_wm), tr, wm.inputs, wm.labels, cfg)


def test_embed_report_terms_add_up(small):
    tr, te, clean, _, cfg, wm = small
    cfg = dataclasses.replace(cfg, epochs_wm=5)
    _, rep = training.embed_watermark(clean, tr, wm.inputs, wm.labels, cfg, te)
    c = rep.curves
    assert all(len(v) == 5 and np.isfinite(v).all() for v in c.values())
    for i in range(5):
        weighted = c["wm"][i] + cfg.lambda1 * c["r_func"][i] + cfg.lambda2 * c["r_da"][i]
        assert c["total"][i] == pytest.approx(weighted, abs=1e-9)
    assert rep.max_output_deviation is not None and rep.delta_max > 0


def test_sentinel_freezes_backbone(small):
    tr, te, clean, _, cfg, wm = small
    frozen = dataclasses.replace(cfg, lambda1=training.FROZEN_SENTINEL)
    marked, rep = training.embed_watermark(clean, tr, wm.inputs, wm.labels, frozen, te)
    for a, b in zip(clean.arrays(training.ANCHORED), marked.arrays(training.ANCHORED)):
        assert a.tobytes() == b.tobytes()
    assert rep.delta_max == 0.0
    out_a = nn.forward(marked, te.inputs).logits
    out_b = nn.forward(training.clean_model(marked), te.inputs).logits
    assert out_a.tobytes() == out_b.tobytes()
    assert not all(np.array_equal(a, b) for a, b in zip(clean.arrays(("c_wm",)), marked.arrays(("c_wm",))))


def test_r_func_contracts_displacement(small):
    tr, _, clean, _, cfg, wm = small
    disp = {}
    for lam in (0.0, 0.001, 0.01, 0.1):
        c = dataclasses.replace(cfg, lambda1=lam, lambda2=0.0)
        disp[lam] = training.embed_watermark(clean, tr, wm.inputs, wm.labels, c)[1].delta_max
    assert disp[0.0] > disp[0.1]
    grid = [disp[0.001], disp[0.01], disp[0.1]]
    assert all(b <= a * 1.05 for a, b in zip(grid, grid[1:]))


def test_clean_model_restores_anchor(small):
    tr, _, clean, _, cfg, wm = small
    marked, _ = training.embed_watermark(clean, tr, wm.inputs, wm.labels,
                                         dataclasses.replace(cfg, epochs_wm=3, lambda2=0.0))
    restored = training.clean_model(marked)
    assert nn.serialize(restored) == nn.serialize(clean.published())
