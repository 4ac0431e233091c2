import numpy as np
import pytest

from btcuap import diffcore as dc
from btcuap import formats, models
from btcuap.data import VideoClip
from btcuap.models import LayerDef

from conftest import float64_extractor, kink_crossings


def test_same_seed_bit_identical():
    a, b = models.build_feature_extractor(3), models.build_feature_extractor(3)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()


def test_different_seed_differs():
    a, b = models.build_feature_extractor(7), models.build_feature_extractor(8)
    assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))


def test_default_architecture_shapes():
    spec = models.build_feature_extractor(0)
    assert spec.num_blocks == 3
    assert [w.shape for w in spec.weights] == [(8, 3, 3, 3), (16, 8, 3, 3), (32, 16, 3, 3)]
    out = models.extract_features(spec, np.random.default_rng(0).random((3, 32, 32), np.float32), 3)
    assert out.shape == (32, 4, 4)
    assert spec.output_shapes() == [(8, 16, 16), (16, 8, 8), (32, 4, 4)]


def test_weight_scale():
    spec = models.build_feature_extractor(0)
    for w in spec.weights:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        # mean removal can at most double the uniform bound
        assert np.abs(w).max() <= 2 / np.sqrt(fan_in)
        np.testing.assert_allclose(w.reshape(w.shape[0], -1).mean(axis=1), 0.0, atol=1e-6)


def test_zero_input_gives_zero_features():
    spec = models.build_feature_extractor(0)
    out = models.extract_features(spec, np.zeros((3, 32, 32), np.float32), spec.num_blocks)
    assert not out.data.any()


def test_identical_input_identical_features():
    spec = models.build_feature_extractor(0)
    x = np.random.default_rng(1).random((3, 32, 32), np.float32)
    assert models.extract_features(spec, x, 2).data.tobytes() == models.extract_features(spec, x.copy(), 2).data.tobytes()


@pytest.mark.parametrize("layer", [0, 4])
def test_layer_out_of_range(layer):
    spec = models.build_feature_extractor(0)
    with pytest.raises(ValueError):
        models.extract_features(spec, np.zeros((3, 32, 32), np.float32), layer)


def test_batched_matches_single():
    spec = models.build_feature_extractor(0)
    xs = np.random.default_rng(2).random((3, 3, 32, 32), np.float32)
    batched = models.extract_features(spec, xs, 2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], models.extract_features(spec, xs[i], 2).data, rtol=1e-6, atol=1e-7)


def test_feature_gradient_matches_finite_differences():
    spec = float64_extractor(5, (LayerDef(4), LayerDef(6)), (3, 8, 8))
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8))
    d0 = rng.uniform(-0.05, 0.05, (3, 8, 8))
    assert kink_crossings(spec, 2, lambda d: x + d, d0, 1e-3) == []
    clean = models.extract_features(spec, x, 2)
    loss = lambda d: dc.cosine_similarity(clean, models.extract_features(spec, dc.add(x, d), 2))
    assert dc.finite_difference_check(loss, d0, 1e-3) < 1e-3


def _model(head=None, pooling="abs", classes=3):
    spec = models.build_feature_extractor(0)
    if head is None:
        head = np.zeros((65, classes), np.float32)
    return models.VideoClassifierModel(spec, head, classes, pooling)


def test_zero_head_uniform_probabilities():
    clip = VideoClip(np.random.default_rng(0).random((4, 3, 32, 32)), 0)
    label, probs = models.classify_video(_model(), clip)
    assert label == 0
    np.testing.assert_allclose(probs, 1 / 3, rtol=1e-12)


@pytest.mark.parametrize("pooling", models.POOLING_MODES)
def test_static_video_temporal_feature_is_zero(pooling):
    frame = np.random.default_rng(1).random((3, 32, 32), np.float32)
    pooled = models.pooled_video_features(models.build_feature_extractor(0), np.stack([frame] * 5), pooling)
    assert pooled.shape == (64,)
    assert np.all(pooled[32:] == 0.0)
    assert pooled[:32].any()


def test_probabilities_are_distribution():
    head = np.random.default_rng(2).standard_normal((65, 4)).astype(np.float32) * 5
    clip = VideoClip(np.random.default_rng(3).random((4, 3, 32, 32)), 0)
    _, probs = models.classify_video(_model(head, classes=4), clip)
    assert np.all((probs >= 0) & (probs <= 1))
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)


def test_classify_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        models.classify_video(_model(), VideoClip(np.zeros((4, 3, 16, 16)), 0))


def test_head_shape_validated():
    with pytest.raises(ValueError, match="head_weights"):
        _model(np.zeros((64, 3), np.float32))


def _toy_clips(n_per_class=6):
    # class 0 static, class 1 moving bright bar
    rng = np.random.default_rng(0)
    clips = []
    for label in (0, 1):
        for _ in range(n_per_class):
            frames = np.full((4, 3, 32, 32), 0.3, np.float32) + rng.uniform(0, 0.02, (1, 3, 32, 32)).astype(np.float32)
            if label:
                for t in range(4):
                    frames[t, :, :, 4 * t:4 * t + 6] = 0.9
            clips.append(VideoClip(frames, label))
    return clips


def test_train_zero_epochs_returns_init_head():
    model, report = models.train_classifier(None, epochs=0, seed=4, clips=_toy_clips())
    assert np.array_equal(model.head_weights, models.init_head(65, 2, 4))
    assert report.epochs == 0


def test_train_deterministic_and_learns():
    m1, r1 = models.train_classifier(None, epochs=20, seed=1, clips=_toy_clips())
    m2, _ = models.train_classifier(None, epochs=20, seed=1, clips=_toy_clips())
    assert m1.head_weights.tobytes() == m2.head_weights.tobytes()
    assert r1.train_accuracy == 1.0


def test_train_rejects_empty_and_single_class():
    with pytest.raises(ValueError, match="empty dataset"):
        models.train_classifier(None, clips=[])
    with pytest.raises(ValueError, match="2 classes"):
        models.train_classifier(None, clips=_toy_clips()[:3])


def test_save_load_roundtrip(tmp_path):
    head = np.random.default_rng(5).standard_normal((65, 3)).astype(np.float32)
    model = _model(head, "signed")
    model.extractor.seed = 2**63 + 12345
    path = tmp_path / "m.btca"
    models.save_model(model, path)
    loaded = models.load_model(path)
    assert loaded.extractor.seed == model.extractor.seed
    assert loaded.temporal_pooling == "signed" and loaded.class_count == 3
    assert loaded.head_weights.tobytes() == head.tobytes()
    for a, b in zip(loaded.extractor.weights, model.extractor.weights):
        assert a.tobytes() == b.tobytes()


def test_load_truncated_model(tmp_path):
    path = tmp_path / "m.btca"
    models.save_model(_model(), path)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(formats.TruncatedError, match="short"):
        models.load_model(path)


def test_load_wrong_version(tmp_path):
    path = tmp_path / "m.btca"
    models.save_model(_model(), path)
    data = bytearray(path.read_bytes())
    # first record: BTCA, u16 name length, name, then BTCT + version
    n = int.from_bytes(data[4:6], "little")
    data[6 + n + 4] = 2
    path.write_bytes(bytes(data))
    with pytest.raises(formats.UnsupportedVersionError, match="version"):
        models.load_model(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "m.btca"
    path.write_bytes(b"XXXX")
    with pytest.raises(formats.BadMagicError, match="bad magic"):
        models.load_model(path)
