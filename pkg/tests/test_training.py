import numpy as np
import pytest
from hypothesis import given, strategies as st

from aesnet import dataset as D
from aesnet import network as N
from aesnet import training as TR
from aesnet.asymmetry import flip_keypoints

TINY_NET = N.NetworkConfig(height=32, width=16, channels=(2, 4), keypoint_widths=(8, 8),
                           classifier_widths=(4, 1), seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    samples = D.generate_synth(D.SynthConfig(count=30, height=32, width=16, seed=8))
    train, val, test = D.split(samples, D.SplitSpec(seed=8))
    return [TR.prepare(s, (32, 16)) for s in (train, val, test)]


def test_class_weights_examples():
    assert TR.class_weights([0] * 5 + [1] * 5) == {0: 1.0, 1: 1.0}
    w = TR.class_weights([0] * 90 + [1] * 10)
    assert w[0] == pytest.approx(100 / 180) and w[1] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        TR.class_weights([0, 0, 0])


@given(n0=st.integers(1, 500), n1=st.integers(1, 500))
def test_class_weights_balance(n0, n1):
    w = TR.class_weights([0] * n0 + [1] * n1)
    assert w[0] * n0 + w[1] * n1 == pytest.approx(n0 + n1)
    assert w[0] * n0 == pytest.approx(w[1] * n1)


def test_metric_examples():
    assert TR.accuracy([0.9, 0.1], [1, 0]) == 1.0 and TR.balanced_accuracy([0.9, 0.1], [1, 0]) == 1.0
    labels = [0] * 10 + [1] * 4
    preds = [0.1] * 8 + [0.9] * 2 + [0.8] * 3 + [0.2]
    assert TR.accuracy(preds, labels) == pytest.approx(11 / 14)
    assert TR.balanced_accuracy(preds, labels) == pytest.approx(0.775)
    labels = [0] * 90 + [1] * 10
    assert TR.accuracy([0.0] * 100, labels) == pytest.approx(0.9)
    assert TR.balanced_accuracy([0.0] * 100, labels) == pytest.approx(0.5)
    # threshold is inclusive at 0.5
    assert TR.accuracy([0.5], [1]) == 1.0
    with pytest.raises(ValueError, match="absent"):
        TR.balanced_accuracy([0.2, 0.3], [0, 0])
    with pytest.raises(ValueError):
        TR.accuracy([0.2], [0, 1])


def test_flip_twice_is_identity():
    s = D.synth_sample(D.SynthConfig(seed=3), 2)
    rng = np.random.default_rng(0)
    once = TR.augment(s, rng, flip_prob=1.0, translate=0.0)
    twice = TR.augment(once, rng, flip_prob=1.0, translate=0.0)
    assert np.array_equal(twice.pixels, s.pixels)
    np.testing.assert_allclose(twice.keypoints, s.keypoints, atol=1e-15)
    assert twice.ordinal_label == s.ordinal_label
    assert np.array_equal(once.pixels, s.pixels[:, ::-1])


def test_flip_of_symmetric_keypoints():
    k = np.array([0.25, 0.5625, 0.75, 0.5625, 0.5, 0.1875, 0.75, 0.75])
    assert np.array_equal(flip_keypoints(k), k)


def test_translation_moves_keypoints_and_pixels():
    s = D.synth_sample(D.SynthConfig(seed=3, width=64, height=96), 1)
    img = s.pixels.transpose(2, 0, 1)
    dx = 2 / 64  # exactly two pixels
    shifted = TR.shift_image(img, dx, 0.0)
    np.testing.assert_allclose(shifted[:, :, 2:], img[:, :, :-2], atol=1e-12)
    np.testing.assert_allclose(shifted[:, :, :2], img[:, :, :1].repeat(2, axis=2), atol=1e-12)

    class Fixed:
        def uniform(self, *args):
            return 1.0 if not args else np.array([0.02, 0.0])

    _, kp = TR.augment_arrays(img, s.keypoints, Fixed(), flip_prob=0.0, translate=0.05)
    np.testing.assert_allclose(kp[[0, 2, 4]] - s.keypoints[[0, 2, 4]], 0.02, atol=1e-15)
    np.testing.assert_array_equal(kp[[1, 3, 5, 6, 7]], s.keypoints[[1, 3, 5, 6, 7]])


def test_stage2_loss_with_zero_lambda_c_equals_stage1(tiny_data):
    train, _, _ = tiny_data
    model = N.build(TINY_NET)
    weights = TR.class_weights(train.targets)
    for start in range(0, len(train), 4):
        idx = np.arange(start, min(start + 4, len(train)))
        s1, _, _ = TR.stage_loss(model, train.images[idx], train.keypoints[idx], train.targets[idx], None, 1, 0)
        s2, _, _ = TR.stage_loss(model, train.images[idx], train.keypoints[idx], train.targets[idx], weights, 1, 0)
        assert s2.data == s1.data


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(stage1_epochs=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(lambda_k=0, lambda_c=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(batch_size=0)


def test_freezing_protocol_and_selection(tiny_data, tmp_path):
    train, val, _ = tiny_data
    model = N.build(TINY_NET)
    before = model.state()
    cfg = TR.TrainConfig(stage1_epochs=3, stage2_epochs=3, batch_size=8, seed=5)
    model, rec1 = TR.train_stage1(model, train, val, cfg)
    after1 = model.state()
    for k in model.group_params("classifier_head"):
        assert np.array_equal(after1[k], before[k])
    assert any(not np.array_equal(after1[k], before[k]) for k in model.group_params("extractor"))
    assert TR.evaluate(model, val)["mse"] == min(r.val_mse for r in rec1)

    model, rec2 = TR.train_stage2(model, train, val, cfg)
    after2 = model.state()
    for k in model.group_params("extractor"):
        assert np.array_equal(after2[k], after1[k])
    ev = TR.evaluate(model, val)
    best = max(rec2, key=lambda r: (r.val_bacc, r.val_acc, -r.epoch))
    assert (ev["bacc"], ev["acc"]) == (best.val_bacc, best.val_acc)
    assert [r.stage for r in rec1 + rec2] == [1, 1, 1, 2, 2, 2]


def test_training_is_reproducible(tiny_data, tmp_path):
    train, val, _ = tiny_data
    cfg = TR.TrainConfig(stage1_epochs=2, stage2_epochs=2, batch_size=8, seed=2)
    outs = []
    for run in ("a", "b"):
        model, records = TR.train(N.build(TINY_NET), train, val, cfg, tmp_path / run)
        outs.append((N.to_bytes(model), [r.line() for r in records]))
    assert outs[0] == outs[1]
    for name in ("epochs.csv", "stage1.aesn", "stage2.aesn"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "epochs.csv").read_text().splitlines()[0]
    assert header == "stage,epoch,loss_kp,loss_clf,val_mse,val_acc,val_bacc"


def test_empty_training_set_rejected(tiny_data):
    _, val, _ = tiny_data
    empty = TR.prepare([], (32, 16))
    with pytest.raises(ValueError, match="empty"):
        TR.train_stage1(N.build(TINY_NET), empty, val, TR.TrainConfig(stage1_epochs=1))
