import csv
import io
import json

import numpy as np
import pytest

from btcuap import analysis, models, uap
from btcuap.data import VideoClip
from btcuap.uap import BtcConfig


@pytest.fixture(scope="module")
def spec():
    return models.build_feature_extractor(2)


def _clip(seed, T=5, label=0):
    return VideoClip(np.random.default_rng(seed).random((T, 3, 32, 32)), label)


def _fixed_model(predicted, classes=3):
    """Head with zero feature weights: every clip is labelled ``predicted``."""
    head = np.zeros((65, classes), np.float32)
    head[-1, predicted] = 1.0
    return models.VideoClassifierModel(models.build_feature_extractor(1), head, classes)


def test_similarity_matrix_diagonal_and_symmetry(spec):
    m = analysis.similarity_matrix(_clip(0), spec, 2)
    assert m.values.shape == (5, 5) and m.subject == "clean"
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-5)
    np.testing.assert_allclose(m.values, m.values.T, atol=1e-6)
    assert np.all(np.abs(m.values) <= 1.0)


def test_similarity_matrix_adversarial_subject(spec):
    s = uap.from_delta(np.random.default_rng(1).uniform(-0.06, 0.06, (2, 3, 32, 32)), 16 / 255)
    from btcuap.video import repeat_uap
    m = analysis.similarity_matrix(_clip(0), spec, 2, repeat_uap(s, 5))
    assert m.subject == "adversarial"
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-5)
    np.testing.assert_allclose(m.values, m.values.T, atol=1e-6)


def test_static_clip_all_ones(spec):
    frame = np.random.default_rng(2).random((3, 32, 32))
    m = analysis.similarity_matrix(VideoClip(np.stack([frame] * 4), 0), spec, 2)
    np.testing.assert_allclose(m.values, 1.0, atol=1e-6)


def test_similarity_shape_mismatch(spec):
    with pytest.raises(ValueError, match="match"):
        analysis.similarity_matrix(VideoClip(np.zeros((3, 3, 16, 16)), 0), spec, 2)


def test_neighbor_mean_matches_matrix(spec):
    clip = _clip(3)
    m = analysis.similarity_matrix(clip, spec, 2)
    assert analysis.neighbor_similarity(clip.frames, spec, 2) == pytest.approx(m.neighbor_mean(), abs=1e-9)


def test_average_similarity_matrix(spec):
    clips = [_clip(4), _clip(5)]
    avg = analysis.average_similarity_matrix(clips, spec, 2)
    ref = (analysis.similarity_matrix(clips[0], spec).values + analysis.similarity_matrix(clips[1], spec).values) / 2
    np.testing.assert_allclose(avg.values, ref, atol=1e-12)
    with pytest.raises(ValueError, match="lengths"):
        analysis.average_similarity_matrix([_clip(4), _clip(5, T=6)], spec, 2)


def test_zero_uap_asr_is_one_minus_clean_accuracy():
    model, _ = models.train_classifier(None, epochs=5, seed=0, clips=[_clip(i, 4, i % 3) for i in range(9)])
    clips = [_clip(100 + i, 4, i % 3) for i in range(9)]
    zero = uap.from_delta(np.zeros((4, 3, 32, 32)), 16 / 255)
    rep = analysis.attack_success_rate(model, clips, zero)
    # exact in counts; the two fractions are separately rounded floats
    assert round(rep.asr * 9) + round(rep.clean_accuracy * 9) == 9
    assert rep.asr == pytest.approx(1 - rep.clean_accuracy, abs=1e-15)
    assert rep.n_clips == 9


def test_hand_built_model_three_of_four():
    model = _fixed_model(1, classes=2)
    clips = [_clip(i, 4, label) for i, label in enumerate([0, 0, 0, 1])]
    rep = analysis.attack_success_rate(model, clips, analysis.noise_uap(4, (3, 32, 32), 16 / 255))
    assert rep.asr == 0.75
    assert rep.per_class_asr == [1.0, 0.0]
    assert rep.clean_accuracy == 0.25


def test_asr_empty_clip_set():
    with pytest.raises(ValueError, match="empty"):
        analysis.attack_success_rate(_fixed_model(0), [], analysis.noise_uap(2, (3, 32, 32), 0.1))


def test_noise_uap_within_budget():
    s = analysis.noise_uap(8, (3, 32, 32), 16 / 255, seed=3)
    assert s.linf() <= 16 / 255 and s.linf() > 15 / 255
    assert s.delta.tobytes() == analysis.noise_uap(8, (3, 32, 32), 16 / 255, seed=3).delta.tobytes()


def test_shift_sweep_single_and_zero_uap():
    model = _fixed_model(0)
    clips = [_clip(i, 4, i % 3) for i in range(3)]
    state = analysis.noise_uap(4, (3, 32, 32), 16 / 255)
    one = analysis.shift_invariance_sweep(model, clips, state, [0])
    assert one.reports == [analysis.attack_success_rate(model, clips, state, 0)]
    zero = uap.from_delta(np.zeros((4, 3, 32, 32)), 16 / 255)
    sweep = analysis.shift_invariance_sweep(model, clips, zero, [0, 1, 2, 3])
    assert len({json.dumps({**r.__dict__, "shift": 0}) for r in sweep.reports}) == 1
    assert sweep.spread == 0.0 and sweep.std == 0.0


# ---------------------------------------------------------------- reports


def test_pgm_identity_matrix_pixels():
    px = analysis.decode_pgm(analysis.encode_pgm(np.eye(2)))
    assert px.tolist() == [[255, 128], [128, 255]]
    assert analysis.heatmap_pixels(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 128, 255]


def test_pgm_header(tmp_path):
    m = analysis.SimilarityMatrix(np.eye(3), 2)
    path = analysis.emit_report(m, tmp_path / "h.pgm")
    assert path.read_bytes().startswith(b"P5\n3 3\n255\n")
    assert len(path.read_bytes()) == len(b"P5\n3 3\n255\n") + 9


def test_csv_of_3x3_matrix(tmp_path):
    m = analysis.SimilarityMatrix(np.array([[1, 0.5, -0.25], [0.5, 1, 0.125], [-0.25, 0.125, 1]]), 2)
    text = analysis.emit_report(m, tmp_path / "m.csv").read_text()
    lines = text.split("\n")
    assert lines[-1] == "" and len(lines) == 4
    assert all(len(l.split(",")) == 3 for l in lines[:3])
    assert lines[0] == "1.000000,0.500000,-0.250000"


def test_json_report_roundtrip(tmp_path):
    rep = analysis.AttackReport(0.6875, [0.5, None], 0.9375, 16, 2, "m", "u", {"K": 4})
    path = analysis.emit_report(rep, tmp_path / "r.json")
    back = json.loads(path.read_text())
    assert back["asr"] == 0.6875 and back["per_class_asr"] == [0.5, None]
    assert list(back) == ["asr", "per_class_asr", "clean_accuracy", "n_clips", "shift", "model_id", "uap_id", "config"]


def test_emit_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="format"):
        analysis.emit_report(np.eye(2), tmp_path / "x.bmp")


def test_emit_io_error_names_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        analysis.emit_report(np.eye(2), tmp_path / "missing" / "x.csv")


# ---------------------------------------------------------------- ablations


def _tiny_ablation_inputs():
    rng = np.random.default_rng(0)
    images = list(rng.random((6, 3, 32, 32), dtype=np.float32))
    clips = [_clip(50 + i, 4, i % 3) for i in range(3)]
    base = BtcConfig(K=1, J=(-1, 1), N=4, epochs=1)
    return images, clips, base


def test_ablation_single_setting_equals_direct_run():
    images, clips, base = _tiny_ablation_inputs()
    attacker, model = models.build_feature_extractor(2), _fixed_model(0)
    table = analysis.ablation_run("k", [2], base, images, attacker, model, clips)
    cfg = BtcConfig(K=2, J=(-1, 1), N=4, epochs=1)
    state = uap.optimize_uap(images, attacker, cfg)
    direct = analysis.attack_success_rate(model, clips, state)
    assert len(table.rows) == 1
    assert table.rows[0]["asr"] == direct.asr and table.rows[0]["final_loss"] == state.losses[-1]


def test_ablation_temporal_two_rows_and_csv():
    images, clips, base = _tiny_ablation_inputs()
    attacker, model = models.build_feature_extractor(2), _fixed_model(0)
    table = analysis.ablation_run("temporal", ["on", "off"], base, images, attacker, model, clips)
    assert len(table.rows) == 2
    assert table.rows[0]["final_loss"] != table.rows[1]["final_loss"]
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == list(analysis.AblationTable.COLUMNS)
    assert [r[1] for r in rows[1:]] == ["on", "off"]


def test_ablation_n_sweep_drops_invalid_offsets():
    images, clips, base = _tiny_ablation_inputs()
    base = BtcConfig(K=1, J=(-2, -1, 1, 2), N=4, epochs=1)
    table = analysis.ablation_run("n", [2, 4], base, images, models.build_feature_extractor(2), _fixed_model(0), clips)
    assert [r["setting"] for r in table.rows] == [2, 4]


def test_ablation_rejects_unknown_sweep_and_empty_grid():
    images, clips, base = _tiny_ablation_inputs()
    with pytest.raises(ValueError, match="unknown sweep"):
        analysis.ablation_run("lr", [1], base, images, None, None, clips)
    with pytest.raises(ValueError, match="empty grid"):
        analysis.ablation_run("k", [], base, images, None, None, clips)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("BTC_THREADS", "3")
    assert analysis.worker_count() == 3
    monkeypatch.setenv("BTC_THREADS", "0")
    assert analysis.worker_count() >= 1


def test_parallel_map_matches_serial(monkeypatch, spec):
    clips = [_clip(i) for i in range(4)]
    monkeypatch.setenv("BTC_THREADS", "1")
    serial = analysis.mean_neighbor_similarity(clips, spec)
    monkeypatch.setenv("BTC_THREADS", "4")
    assert analysis.mean_neighbor_similarity(clips, spec) == serial
