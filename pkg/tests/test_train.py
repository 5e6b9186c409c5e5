import math

import numpy as np
import pytest

from oracles import ce_literal
from ocrect.corr import CorrelationMatrix
from ocrect.data import FormatError, IGNORE, SyntheticSample, TagSet
from ocrect.ocr import OcrConfig, ocr_loss_map
from ocrect.train import (LinearPixelModel, TrainConfig, TrainingDiverged, combined_loss, load_model, save_model,
                          seg_ce_loss, sgd_momentum_step, train)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.momentum, cfg.weight_decay, cfg.lr_decay_gamma) == (30, 16, 0.9, 5e-4, 0.95)
    assert cfg.effective_ocr().pixel_select.value == "oc"
    off = TrainConfig(ocr_enabled=False).effective_ocr()
    assert off.pixel_select.value == "none" and off.delta == 2.0


def test_ce_uniform_logits():
    val, _ = seg_ce_loss(np.zeros((4, 2, 3)), np.array([[0, 1, 2], [3, 0, 1]], np.uint8))
    assert val == pytest.approx(math.log(4), abs=1e-15)


def test_ce_saturates():
    z = np.zeros((3, 1, 2))
    z[1] = 60.0
    val, g = seg_ce_loss(z, np.ones((1, 2), np.uint8))
    assert val < 1e-20 and np.abs(g).max() < 1e-20


def test_ce_all_ignored():
    val, g = seg_ce_loss(np.ones((3, 2, 2)), np.full((2, 2), IGNORE, np.uint8))
    assert val == 0.0 and not g.any()


def test_ce_matches_literal():
    rng = np.random.default_rng(4)
    z = rng.normal(0, 3, (5, 3, 4))
    pseudo = rng.integers(0, 5, (3, 4)).astype(np.uint8)
    pseudo[1, 2] = IGNORE
    val, g = seg_ce_loss(z, pseudo)
    assert val == pytest.approx(ce_literal(z.tolist(), pseudo.tolist()), rel=1e-12)
    assert not g[:, 1, 2].any()
    np.testing.assert_allclose(g.sum(axis=0), 0, atol=1e-15)


def _pixel_problem():
    rng = np.random.default_rng(9)
    z = rng.normal(0, 2, (6, 4, 4))
    pseudo = rng.integers(0, 6, (4, 4)).astype(np.uint8)
    return z, pseudo, TagSet("x", (1, 4)), CorrelationMatrix(rng.random((6, 6)), 1)


def test_combined_alpha_zero_equals_seg():
    z, pseudo, ts, m = _pixel_problem()
    val, g, _ = combined_loss(z, pseudo, ts, m, OcrConfig(alpha=0.0))
    seg, gs = seg_ce_loss(z, pseudo)
    assert val == seg and np.array_equal(g, gs)


def test_combined_is_sum():
    z, pseudo, ts, m = _pixel_problem()
    cfg = OcrConfig()
    val, g, (seg, rec) = combined_loss(z, pseudo, ts, m, cfg)
    r, gr = ocr_loss_map(z, pseudo, ts, m, cfg)
    assert rec == r and rec > 0 and val == seg + rec
    np.testing.assert_array_equal(g, seg_ce_loss(z, pseudo)[1] + gr)


def test_combined_no_oc_pixels_equals_seg():
    z = np.zeros((4, 2, 2))
    z[1] = 3.0
    pseudo = np.ones((2, 2), np.uint8)
    m = CorrelationMatrix(np.zeros((4, 4)), 0)
    val, _, _ = combined_loss(z, pseudo, TagSet("x", (1,)), m, OcrConfig())
    assert val == seg_ce_loss(z, pseudo)[0]


def test_sgd_two_steps_by_hand():
    # w0 = 1, constant gradient 2, lr 0.1, momentum 0.9, weight decay 0.5
    # step 1: v = -0.1 * (2 + 0.5) = -0.25,           w = 0.75
    # step 2: v = 0.9 * -0.25 - 0.1 * (2 + 0.375) = -0.4625, w = 0.2875
    w, v = np.array([1.0]), np.array([0.0])
    sgd_momentum_step([w], [np.array([2.0])], [v], 0.1, 0.9, 0.5)
    assert w[0] == pytest.approx(0.75, abs=1e-15) and v[0] == pytest.approx(-0.25, abs=1e-15)
    sgd_momentum_step([w], [np.array([2.0])], [v], 0.1, 0.9, 0.5)
    assert w[0] == pytest.approx(0.2875, abs=1e-15) and v[0] == pytest.approx(-0.4625, abs=1e-15)


def test_model_round_trip(tmp_path):
    m = LinearPixelModel.init(5, 7, seed=3, scale=1.0)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.weights, m.weights.astype(np.float32))
    np.testing.assert_array_equal(back.bias, m.bias.astype(np.float32))
    assert (tmp_path / "m.bin").stat().st_size == 16 + 4 * (5 * 7 + 5)
    (tmp_path / "bad.bin").write_bytes(b"OCRM" + b"\x00" * 8)
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.bin")


def test_logits_shape():
    m = LinearPixelModel.init(3, 2, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 4, 5))
    z = m.logits(x)
    assert z.shape == (3, 4, 5)
    np.testing.assert_allclose(z[:, 1, 2], m.weights @ x[:, 1, 2] + m.bias)


@pytest.fixture(scope="module")
def small(fig6_data):
    tr, ev, m = fig6_data
    return tr[:16], ev[:8], m


def test_epoch_zero_identical_across_arms(small):
    tr, ev, m = small
    _, a = train(tr, m, TrainConfig(epochs=1), ev)
    _, b = train(tr, m, TrainConfig(epochs=1, ocr_enabled=False), ev)
    assert a[0]["miou"] == b[0]["miou"] and a[0]["oc_image_error_rate"] == b[0]["oc_image_error_rate"]
    assert a[0]["l_seg"] == b[0]["l_seg"]
    assert b[1]["l_rec"] == 0.0


def test_zero_learning_rate_keeps_parameters(small):
    tr, _, m = small
    start, _ = train(tr, m, TrainConfig(epochs=0))
    model, _ = train(tr, m, TrainConfig(epochs=3, learning_rate=0.0))
    assert model.weights.tobytes() == start.weights.tobytes() and model.bias.tobytes() == start.bias.tobytes()
    init = LinearPixelModel.init(9, 16, seed=5)
    same, _ = train(tr, m, TrainConfig(epochs=2, learning_rate=0.0, standardize=False), model=init)
    np.testing.assert_array_equal(same.weights, init.weights)
    np.testing.assert_array_equal(same.bias, init.bias)


def test_training_is_bit_deterministic(small):
    tr, ev, m = small
    a, la = train(tr, m, TrainConfig(epochs=3), ev)
    b, lb = train(tr, m, TrainConfig(epochs=3), ev)
    assert a.weights.tobytes() == b.weights.tobytes() and la == lb


def test_nan_aborts_with_location(small):
    tr, _, m = small
    bad = tr[0].features.copy()
    bad[0, 2, 3] = np.nan
    data = [SyntheticSample(bad, tr[0].gt_mask, tr[0].pseudo_mask, tr[0].tags)] + tr[1:4]
    with pytest.raises(TrainingDiverged) as err:
        train(data, m, TrainConfig(epochs=1, batch_size=2, seed=1))
    assert err.value.epoch == 1 and err.value.pixel == (tr[0].image_id, (2, 3))


def test_full_batch_loss_non_increasing_first_epochs(fig6_runs):
    for arm in ("none", "oc"):
        log = fig6_runs[arm]
        total = [r["l_seg"] + r["l_rec"] for r in log[:6]]
        assert all(b <= a for a, b in zip(total, total[1:])), total


def test_ocr_arm_below_baseline(fig6_runs):
    # frozen after the first run on the default synthetic config
    base, ocr = fig6_runs["none"][-1], fig6_runs["oc"][-1]
    assert ocr["oc_image_error_rate"] < base["oc_image_error_rate"]
    assert base["oc_image_error_rate"] == pytest.approx(13 / 32)
    assert ocr["oc_image_error_rate"] == pytest.approx(7 / 32)
    assert ocr["oc_pixel_fraction"] < 0.6 * base["oc_pixel_fraction"]


def test_log_records(fig6_runs):
    log = fig6_runs["oc"]
    assert [r["epoch"] for r in log] == list(range(31))
    assert log[0]["lr"] == 0.03 and log[2]["lr"] == pytest.approx(0.03 * 0.95)
    assert set(log[-1]) == {"epoch", "lr", "l_seg", "l_rec", "miou", "oc_image_error_rate", "oc_pixel_fraction"}


def test_standardized_model_acts_on_raw_features(small):
    tr, _, m = small
    model, log = train(tr, m, TrainConfig(epochs=2))
    from ocrect.train import feature_stats, _to_raw, _to_standardized
    shift, scale = feature_stats(tr)
    back = _to_raw(_to_standardized(model, scale, shift), scale, shift)
    np.testing.assert_allclose(back.weights, model.weights, rtol=1e-12)
    np.testing.assert_allclose(back.bias, model.bias, rtol=1e-12, atol=1e-12)
    z = model.logits(tr[0].features)
    assert z.dtype == np.float64 and np.isfinite(z).all()


def test_unstandardized_training_runs(small):
    tr, ev, m = small
    _, log = train(tr, m, TrainConfig(epochs=2, standardize=False), ev)
    assert len(log) == 3 and log[-1]["l_seg"] < log[0]["l_seg"]
