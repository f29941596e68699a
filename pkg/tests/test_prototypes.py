"""Prototype bank and alignment-loss oracles."""

import math

import numpy as np
import pytest

from panodeform import tensor as T
from panodeform.model import ModelConfig, SegNet
from panodeform.prototypes import (
    AdaptConfig,
    PrototypeBank,
    alignment_loss,
    build_bank,
    downsample_labels,
    pseudo_label,
    total_loss,
)
from panodeform.scenes import IGNORE, LabeledScene
from panodeform.tensor import Tensor


# -- pseudo labels ---------------------------------------------------------------


def test_pseudo_label_one_hot():
    logits = np.zeros((2, 2, 3))
    want = np.array([[0, 2], [1, 0]])
    for i in range(2):
        for j in range(2):
            logits[i, j, want[i, j]] = 5.0
    assert np.array_equal(pseudo_label(logits), want)


def test_pseudo_label_tie_breaks_to_lowest_index():
    logits = np.zeros((1, 1, 4))
    logits[0, 0] = [1.0, 1.0, 1.0, 1.0]
    assert pseudo_label(logits)[0, 0] == 0


def test_pseudo_label_threshold_above_one_ignores_everything():
    logits = np.random.default_rng(0).standard_normal((3, 4, 5))
    out = pseudo_label(logits, threshold=1.1)
    assert np.all(out == IGNORE)


def test_pseudo_label_invariant_to_positive_rescaling():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 4, 3))
    assert np.array_equal(pseudo_label(logits), pseudo_label(logits * 7.3))


# -- EMA updates -----------------------------------------------------------------


def test_update_forced_arithmetic():
    bank = PrototypeBank(2, 1, momentum=0.999)
    bank.prototypes[0] = 1.0
    bank.initialized[0] = True
    bank.update(np.zeros((4, 1)), np.zeros(4, dtype=int))
    assert bank.prototypes[0, 0] == pytest.approx(0.999, abs=0)


def test_update_absent_class_untouched():
    bank = PrototypeBank(3, 2)
    bank.prototypes[2] = [5.0, 6.0]
    bank.initialized[2] = True
    bank.update(np.ones((3, 2)), np.zeros(3, dtype=int))
    assert bank.prototypes[2].tolist() == [5.0, 6.0]
    assert bank.update_count[2] == 0


def test_update_matches_hand_unrolled_ema():
    m = 0.999
    bank = PrototypeBank(1, 3, momentum=m)
    rng = np.random.default_rng(2)
    batches = [rng.standard_normal((5, 3)) for _ in range(3)]
    expected = batches[0].mean(axis=0)
    bank.update(batches[0], np.zeros(5, dtype=int))
    for b in batches[1:]:
        expected = m * expected + (1 - m) * b.mean(axis=0)
        bank.update(b, np.zeros(5, dtype=int))
    assert np.allclose(bank.prototypes[0], expected, atol=1e-12)
    assert bank.update_count[0] == 3


def test_ema_stays_in_hull_of_inputs():
    rng = np.random.default_rng(3)
    bank = PrototypeBank(1, 4, momentum=0.9)
    lo = np.full(4, np.inf)
    hi = np.full(4, -np.inf)
    for _ in range(50):
        batch = rng.uniform(-3, 3, (6, 4))
        mean = batch.mean(axis=0)
        lo, hi = np.minimum(lo, mean), np.maximum(hi, mean)
        bank.update(batch, np.zeros(6, dtype=int))
        assert np.all(bank.prototypes[0] >= lo - 1e-12)
        assert np.all(bank.prototypes[0] <= hi + 1e-12)


def test_update_ignores_ignore_label():
    bank = PrototypeBank(2, 1)
    bank.update(np.ones((3, 1)), np.array([IGNORE, IGNORE, IGNORE]))
    assert not bank.initialized.any()


# -- prototype maps ---------------------------------------------------------------


def test_feature_map_uniform_label():
    bank = PrototypeBank(3, 2)
    bank.prototypes[1] = [3.0, 4.0]
    bank.initialized[1] = True
    fmap, mask = bank.feature_map(np.full((2, 3), 1))
    assert np.all(mask)
    assert np.allclose(fmap, [3.0, 4.0])


def test_feature_map_all_ignore_fully_masked():
    bank = PrototypeBank(3, 2)
    bank.initialized[:] = True
    fmap, mask = bank.feature_map(np.full((2, 2), IGNORE))
    assert not mask.any()
    assert np.all(fmap == 0.0)


def test_feature_map_uninitialized_class_masked():
    bank = PrototypeBank(3, 2)
    bank.prototypes[0] = [1.0, 1.0]
    bank.initialized[0] = True
    fmap, mask = bank.feature_map(np.array([[0, 2]]))
    assert mask.tolist() == [[True, False]]


def test_feature_map_checkerboard_matches_indexing_oracle():
    rng = np.random.default_rng(4)
    bank = PrototypeBank(4, 5)
    bank.prototypes = rng.standard_normal((4, 5))
    bank.initialized[:] = True
    labels = np.indices((6, 6)).sum(axis=0) % 4
    fmap, mask = bank.feature_map(labels)
    for i in range(6):
        for j in range(6):
            assert np.array_equal(fmap[i, j], bank.prototypes[labels[i, j]])
    assert mask.all()


# -- alignment loss ----------------------------------------------------------------


def _loss_oracle(f, proto, labels, cfg):
    """Independent scalar evaluation with plain python floats."""
    fh, fw, c = f.shape
    t = cfg.temperature
    kl_sum, ce_sum, n = 0.0, 0.0, 0
    for i in range(fh):
        for j in range(fw):
            if labels[i, j] == IGNORE:
                continue
            n += 1
            pr = np.exp(proto[i, j] / t - max(proto[i, j] / t))
            pr = pr / pr.sum()
            pm = np.exp(f[i, j] / t - max(f[i, j] / t))
            pm = pm / pm.sum()
            kl_sum += sum(
                pr[k] * (math.log(max(pr[k], 1e-12)) - math.log(max(pm[k], 1e-12)))
                for k in range(c)
            )
            z = f[i, j] - max(f[i, j])
            ce_sum += -(z[labels[i, j]] - math.log(np.exp(z).sum()))
    if n == 0:
        return 0.0
    return cfg.lam * t * t * (kl_sum / n) + (1 - cfg.lam) * (ce_sum / n)


def test_alignment_loss_zero_when_features_equal_prototypes_lam1():
    cfg = AdaptConfig(lam=1.0)
    bank = PrototypeBank(2, 4)
    bank.prototypes = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    bank.initialized[:] = True
    labels = np.array([[0, 1], [1, 0]])
    fmap, _ = bank.feature_map(labels)
    out = alignment_loss(Tensor(fmap), bank, labels, cfg)
    assert float(out.data) == pytest.approx(0.0, abs=1e-15)


def test_alignment_loss_lam0_is_channel_cross_entropy():
    rng = np.random.default_rng(5)
    cfg = AdaptConfig(lam=0.0)
    bank = PrototypeBank(3, 6)
    bank.prototypes = rng.standard_normal((3, 6))
    bank.initialized[:] = True
    labels = rng.integers(0, 3, (3, 4))
    f = rng.standard_normal((3, 4, 6))
    out = alignment_loss(Tensor(f), bank, labels, cfg)
    ce = T.cross_entropy(Tensor(f), labels)
    assert float(out.data) == pytest.approx(float(ce.data), abs=1e-12)


def test_alignment_loss_matches_high_precision_oracle():
    rng = np.random.default_rng(6)
    cfg = AdaptConfig()
    bank = PrototypeBank(4, 4)
    bank.prototypes = rng.standard_normal((4, 4))
    bank.initialized[:] = True
    labels = np.array([[0, 1], [2, 3]])
    f = rng.standard_normal((2, 2, 4))
    fmap, _ = bank.feature_map(labels)
    out = alignment_loss(Tensor(f), bank, labels, cfg)
    assert float(out.data) == pytest.approx(_loss_oracle(f, fmap, labels, cfg), abs=1e-10)


def test_alignment_loss_no_valid_pixels_is_zero():
    bank = PrototypeBank(2, 3)
    out = alignment_loss(
        Tensor(np.zeros((2, 2, 3))), bank, np.full((2, 2), IGNORE), AdaptConfig()
    )
    assert float(out.data) == 0.0


def test_kl_component_positive_when_features_differ():
    cfg = AdaptConfig(lam=1.0)
    bank = PrototypeBank(1, 3)
    bank.prototypes = np.array([[2.0, -1.0, 0.5]])
    bank.initialized[:] = True
    labels = np.zeros((2, 2), dtype=int)
    f = np.random.default_rng(7).standard_normal((2, 2, 3)) * 3
    out = alignment_loss(Tensor(f), bank, labels, cfg)
    assert float(out.data) > 0.0


def test_temperature_limit_drives_kl_to_zero():
    # at huge T both softened distributions flatten to uniform
    rng = np.random.default_rng(8)
    t = 1e6
    proto = rng.standard_normal((9, 5))
    f = rng.standard_normal((9, 5))
    kl = T.kl_div(
        T.softmax(Tensor(proto / t)), T.softmax(Tensor(f / t))
    )
    assert abs(float(kl.data)) < 1e-6


def test_gradient_reaches_features():
    rng = np.random.default_rng(9)
    cfg = AdaptConfig()
    bank = PrototypeBank(3, 4)
    bank.prototypes = rng.standard_normal((3, 4))
    bank.initialized[:] = True
    labels = rng.integers(0, 3, (4, 4))
    f = Tensor(rng.standard_normal((4, 4, 4)), requires_grad=True)
    alignment_loss(f, bank, labels, cfg).backward()
    assert f.grad is not None and np.abs(f.grad).max() > 0


# -- nearest downsampling -----------------------------------------------------------


def test_downsample_preserves_label_values():
    rng = np.random.default_rng(10)
    lab = rng.integers(0, 4, (64, 128))
    small = downsample_labels(lab, 16, 32)
    assert small.shape == (16, 32)
    assert set(np.unique(small)) <= set(np.unique(lab))


def test_downsample_identity():
    lab = np.arange(12).reshape(3, 4)
    assert np.array_equal(downsample_labels(lab, 3, 4), lab)


# -- bank init over scenes ------------------------------------------------------------


def _toy_net():
    return SegNet(ModelConfig.nano(classes=3), seed=1)


def _scene(labels, domain="pinhole", sid="s"):
    rng = np.random.default_rng(int(labels.sum()) % 1000)
    h, w = labels.shape
    img = rng.uniform(0, 1, (h, w, 3))
    return LabeledScene(image=img, labels=labels, domain=domain, scene_id=sid)


def test_build_bank_single_class_mean():
    net = _toy_net()
    labels = np.zeros((32, 64), dtype=np.int64)
    scene = _scene(labels)
    bank = build_bank(net, [scene], [], AdaptConfig())
    out = net.forward(Tensor(scene.image))
    expected = out.fused.data.reshape(-1, net.cfg.emb_channels).mean(axis=0)
    assert bank.initialized.tolist() == [True, False, False]
    assert np.allclose(bank.prototypes[0], expected, atol=1e-12)


def test_build_bank_disjoint_scenes_have_scene_means():
    net = _toy_net()
    s0 = _scene(np.zeros((32, 64), dtype=np.int64), sid="a")
    s1 = _scene(np.ones((32, 64), dtype=np.int64), sid="b")
    bank = build_bank(net, [s0, s1], [], AdaptConfig())
    for scene, cls in ((s0, 0), (s1, 1)):
        out = net.forward(Tensor(scene.image))
        mean = out.fused.data.reshape(-1, net.cfg.emb_channels).mean(axis=0)
        assert np.allclose(bank.prototypes[cls], mean, atol=1e-12)


def test_build_bank_mixed_pass_matches_weighted_mean_oracle():
    net = _toy_net()
    rng = np.random.default_rng(11)
    source = [_scene(rng.integers(0, 3, (32, 64)).astype(np.int64), sid=f"s{i}") for i in range(2)]
    target = [
        LabeledScene(
            image=rng.uniform(0, 1, (32, 64, 3)), labels=None, domain="panorama", scene_id=f"t{i}"
        )
        for i in range(2)
    ]
    bank = build_bank(net, source, target, AdaptConfig())

    # brute-force oracle over the same pass
    from panodeform.prototypes import scene_embedding

    sums = np.zeros((3, net.cfg.emb_channels))
    counts = np.zeros(3)
    for scene in source + target:
        emb, small = scene_embedding(net, scene)
        for i in range(small.shape[0]):
            for j in range(small.shape[1]):
                k = small[i, j]
                if k != IGNORE:
                    sums[k] += emb[i, j]
                    counts[k] += 1
    for k in range(3):
        if counts[k]:
            assert np.allclose(bank.prototypes[k], sums[k] / counts[k], atol=1e-10)
            assert bank.initialized[k]


def test_mutual_bank_differs_from_source_only():
    net = _toy_net()
    rng = np.random.default_rng(12)
    source = [_scene(rng.integers(0, 3, (32, 64)).astype(np.int64), sid="s")]
    target = [
        LabeledScene(
            image=rng.uniform(0, 1, (32, 64, 3)), labels=None, domain="panorama", scene_id="t"
        )
    ]
    source_only = build_bank(net, source, [], AdaptConfig())
    mutual = build_bank(net, source, target, AdaptConfig())
    pseudo_present = np.unique(
        downsample_labels(pseudo_label(net.forward(Tensor(target[0].image)).logits.data), 8, 16)
    )
    assert any(
        not np.allclose(source_only.prototypes[k], mutual.prototypes[k])
        for k in pseudo_present
        if k < 3 and source_only.initialized[k]
    )


def test_bank_save_load_round_trip(tmp_path):
    bank = PrototypeBank(3, 4, momentum=0.99)
    bank.prototypes = np.random.default_rng(13).standard_normal((3, 4))
    bank.initialized[:] = [True, False, True]
    bank.update_count[:] = [2, 0, 5]
    bank.save(tmp_path)
    loaded = PrototypeBank.load(tmp_path)
    assert np.array_equal(loaded.prototypes, bank.prototypes)
    assert np.array_equal(loaded.initialized, bank.initialized)
    assert np.array_equal(loaded.update_count, bank.update_count)
    assert loaded.momentum == 0.99


# -- combined objective ---------------------------------------------------------------


def _forward_pairs(net, rng, n=2):
    source, target = [], []
    for i in range(n):
        img = rng.uniform(0, 1, (32, 64, 3))
        out = net.forward(Tensor(img))
        labels = rng.integers(0, 3, (32, 64))
        source.append((out, labels))
        img_t = rng.uniform(0, 1, (32, 64, 3))
        out_t = net.forward(Tensor(img_t))
        target.append((out_t, pseudo_label(out_t.logits.data)))
    return source, target


def test_total_loss_component_accounting():
    net = _toy_net()
    rng = np.random.default_rng(14)
    source, target = _forward_pairs(net, rng)
    bank = PrototypeBank(3, net.cfg.emb_channels)
    bank.prototypes = rng.standard_normal((3, net.cfg.emb_channels))
    bank.initialized[:] = True
    cfg = AdaptConfig()
    total, parts = total_loss(source, target, bank, cfg, "mpa+ssl")
    recon = parts["loss_seg"] + parts["loss_ssl"] + cfg.alpha * (
        parts["loss_mpa_s"] + parts["loss_mpa_t"]
    )
    assert parts["total"] == pytest.approx(recon, abs=1e-12)
    assert parts["total"] == pytest.approx(float(total.data), abs=0)


def test_total_loss_ssl_mode_drops_alignment():
    net = _toy_net()
    rng = np.random.default_rng(15)
    source, target = _forward_pairs(net, rng)
    total, parts = total_loss(source, target, None, AdaptConfig(), "ssl")
    assert parts["loss_mpa_s"] == 0.0 and parts["loss_mpa_t"] == 0.0
    assert parts["total"] == pytest.approx(parts["loss_seg"] + parts["loss_ssl"], abs=1e-12)


def test_total_loss_mpa_mode_drops_ssl():
    net = _toy_net()
    rng = np.random.default_rng(16)
    source, target = _forward_pairs(net, rng)
    bank = PrototypeBank(3, net.cfg.emb_channels)
    bank.prototypes = rng.standard_normal((3, net.cfg.emb_channels))
    bank.initialized[:] = True
    _, parts = total_loss(source, target, bank, AdaptConfig(), "mpa")
    assert parts["loss_ssl"] == 0.0
    assert parts["loss_mpa_s"] != 0.0


def test_total_loss_uniform_logits_seg_is_log_k():
    # untrained network with zeroed head emits uniform class scores
    net = _toy_net()
    for name, p in net.parameters().items():
        if name.startswith("head.fc"):
            p.data = np.zeros_like(p.data)
    rng = np.random.default_rng(17)
    source, target = _forward_pairs(net, rng, n=1)
    _, parts = total_loss(source, target, None, AdaptConfig(), "ssl")
    assert parts["loss_seg"] == pytest.approx(np.log(3.0), abs=1e-9)


def test_total_loss_requires_bank_for_alignment():
    net = _toy_net()
    rng = np.random.default_rng(18)
    source, target = _forward_pairs(net, rng, n=1)
    from panodeform.tensor_io import DataError

    with pytest.raises(DataError):
        total_loss(source, target, None, AdaptConfig(), "mpa+ssl")
