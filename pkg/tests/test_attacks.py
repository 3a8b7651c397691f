import numpy as np
import pytest

from mtlmark import attacks, nn
from mtlmark.attacks import AttackConfig
from mtlmark.errors import AttackError, ConfigError
from mtlmark.keys import WatermarkKey
from mtlmark.verification import verify


def wm_acc(run, model):
    return attacks.wm_accuracy(model, run.watermarked.c_wm, run.wm.inputs, run.wm.labels)


def same_arrays(a, b):
    return all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(kind="distill")
    with pytest.raises(ConfigError):
        AttackConfig(rho=1.5)
    with pytest.raises(ConfigError):
        AttackConfig(lr=-1)
    with pytest.raises(ConfigError):
        AttackConfig(rho_grid=(0.5, 0.1))


def test_zero_lr_is_identity(host):
    out = attacks.fine_tune(host.watermarked, host.adversary, AttackConfig(lr=0.0))
    assert nn.serialize(out) == nn.serialize(host.watermarked.published())


def test_ft_never_sees_host_head(host):
    out = attacks.fine_tune(host.watermarked, host.adversary, AttackConfig(epochs=1))
    assert out.c_wm is None
    assert not same_arrays(out.arrays(("backbone",)), host.watermarked.arrays(("backbone",)))


@pytest.mark.parametrize("kind", ["ftll", "rtll"])
def test_last_layer_variants_freeze_backbone(host, kind):
    out = attacks.fine_tune(host.watermarked, host.adversary, AttackConfig(kind=kind, epochs=2))
    assert same_arrays(out.arrays(("backbone",)), host.watermarked.arrays(("backbone",)))
    assert not same_arrays(out.arrays(("c_p",)), host.watermarked.arrays(("c_p",)))
    # the watermark branch only reads the backbone, so it is untouched
    assert wm_acc(host, out) == wm_acc(host, host.watermarked)


def test_neuron_prune_zero_is_identity(host):
    out = attacks.neuron_prune(host.watermarked, 0.0)
    assert nn.serialize(out) == nn.serialize(host.watermarked.published())


def test_fine_prune_keeps_mask(host):
    cfg = AttackConfig(kind="fp", rho=0.3, epochs=3)
    out = attacks.fine_prune(host.watermarked, host.adversary, cfg)
    _, masks = nn.apply_prune_mask(host.watermarked, 0.3)
    for layer, mask in zip(out.backbone, masks):
        assert (layer.W[~mask] == 0).all()
    assert sum(int((~m).sum()) for m in masks) > 0


def test_fine_prune_rho_zero_equals_ft(host):
    a = attacks.fine_prune(host.watermarked, host.adversary, AttackConfig(kind="fp", rho=0.0, epochs=2))
    b = attacks.fine_tune(host.watermarked, host.adversary, AttackConfig(kind="ft", epochs=2))
    assert nn.serialize(a) == nn.serialize(b)


def test_attacks_leave_host_head_untouched(host):
    before = nn.head_hash(host.watermarked.c_wm)
    model_before = nn.model_hash(host.watermarked)
    attacks.fine_tune(host.watermarked, host.adversary, AttackConfig(epochs=1))
    attacks.fine_prune(host.watermarked, host.adversary, AttackConfig(kind="fp", epochs=1))
    attacks.overwrite(host.watermarked, WatermarkKey(b"adv", 64, 16), host.adversary,
                      AttackConfig(kind="overwrite", epoch_grid=(1,)), host.watermarked.c_wm)
    assert nn.head_hash(host.watermarked.c_wm) == before
    assert nn.model_hash(host.watermarked) == model_before


def test_prune_sweep_rows_and_monotone_end(host):
    grid = (0.0, 0.3, 0.6, 0.9)
    rows = attacks.prune_sweep(host.watermarked, host.watermarked.c_wm, host.wm.inputs,
                               host.wm.labels, host.test, grid)
    assert [r[0] for r in rows] == list(grid)
    assert all(0 <= p <= 1 and 0 <= w <= 1 for _, p, w in rows)
    assert rows[-1][2] <= rows[0][2]
    rep = attacks.AttackReport("np", sweep=rows)
    assert rep.sweep_csv().splitlines()[0] == "rho,primary_acc,wm_acc"
    assert len(rep.sweep_csv().splitlines()) == 5


def test_prune_to_break_gamma_zero_never_breaks(host):
    rep = attacks.prune_to_break(host.watermarked, host.key, host.watermarked.c_wm, 0.0,
                                 (0.0, 0.5, 1.0), host.test)
    assert rep.rho_break is None and rep.decline_at_break is None


def test_prune_to_break_full_grid(host):
    rep = attacks.prune_to_break(host.watermarked, host.key, host.watermarked.c_wm, 0.7,
                                 (0.0, 1.0), host.test)
    # fully pruned backbone emits bias-only features: one class for every point
    assert rep.rho_break == 1.0
    assert rep.wm_after < 0.7
    with pytest.raises(ConfigError):
        attacks.prune_to_break(host.watermarked, host.key, host.watermarked.c_wm, 0.7,
                               (1.0, 0.0), host.test)


def test_overwrite_zero_epochs(host):
    probe = lambda m: wm_acc(host, m)
    _, _, rep = attacks.overwrite(host.watermarked, WatermarkKey(b"adv", 64, 16), host.adversary,
                                  AttackConfig(kind="overwrite", epoch_grid=()),
                                  host.watermarked.c_wm, probe)
    assert rep.fluctuation == [(0, rep.wm_before, 0.0)]
    assert rep.fluctuation_csv().startswith("epochs,host_wm_acc,fluctuation\n0,")


def test_forge_single_point_and_capacity(host):
    head, acc, sep = attacks.forge(host.watermarked, WatermarkKey(b"one", 1, 16), (0,))
    assert acc == 1.0 and sep
    with pytest.raises(AttackError):
        attacks.forge(host.watermarked, WatermarkKey(b"big", 66, 16), (0,))


def test_forge_leaves_model_and_verifies(host):
    before = nn.model_hash(host.watermarked)
    key = WatermarkKey(b"forged", 64, 16)
    head, acc, sep = attacks.forge(host.watermarked, key, (0, 1))
    assert sum(host.watermarked.backbone[t].out_dim for t in (0, 1)) == 128
    assert sep and acc == 1.0
    assert nn.model_hash(host.watermarked) == before
    assert verify(host.watermarked, key, head, 0.7).passed


def test_report_json_round_trip():
    import json
    rep = attacks.AttackReport("ft", 0.9, 0.8, 1.0, 0.95)
    assert json.loads(rep.to_json())["wm_after"] == 0.95
