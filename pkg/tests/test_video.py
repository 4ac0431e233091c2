import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btcuap import uap, video
from btcuap.data import VideoClip


def _state(N, shape=(1, 2, 2), seed=0):
    delta = np.random.default_rng(seed).uniform(-0.06, 0.06, (N, *shape))
    return uap.from_delta(delta, 16 / 255)


def _frame_ids(pert, state):
    return [next(i for i in range(state.N) if np.array_equal(f, state.delta[i])) + 1 for f in pert.delta_T]


def test_repeat_n2_t5():
    s = _state(2)
    assert _frame_ids(video.repeat_uap(s, 5), s) == [1, 2, 1, 2, 1]


def test_repeat_n_equals_t_is_identity():
    s = _state(6)
    pert = video.repeat_uap(s, 6)
    assert pert.delta_T.tobytes() == s.delta.tobytes()
    assert pert.shift == 0 and pert.source_N == 6 and pert.T == 6


def test_repeat_n32_t64_each_frame_twice():
    s = _state(32)
    ids = _frame_ids(video.repeat_uap(s, 64), s)
    assert all(ids.count(i) == 2 for i in range(1, 33))


def test_repeat_truncates_with_warning():
    s = _state(8)
    with pytest.warns(UserWarning, match="truncating"):
        pert = video.repeat_uap(s, 3)
    assert _frame_ids(pert, s) == [1, 2, 3]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        video.repeat_uap(s, 3, warn=False)


def test_repeat_rejects_bad_arguments():
    with pytest.raises(ValueError):
        video.repeat_uap(_state(4), 0)
    with pytest.raises(ValueError):
        video.repeat_uap(_state(4), 4, shift=4)


@pytest.mark.parametrize("N,T", [(1, 7), (3, 10), (5, 5), (4, 17)])
def test_repeat_periodic_and_norm_preserving(N, T):
    s = _state(N)
    d = video.repeat_uap(s, T).delta_T
    for t in range(T - N):
        assert np.array_equal(d[t], d[t + N])
    assert np.abs(d).max() == np.abs(s.delta).max() or T < N


def test_repeat_with_shift_index_rule():
    s = _state(5)
    assert _frame_ids(video.repeat_uap(s, 7, shift=3), s) == [4, 5, 1, 2, 3, 4, 5]


def test_shift_zero_is_identity():
    s = _state(5)
    assert video.shift_uap(s, 0).delta.tobytes() == s.delta.tobytes()


def test_shift_out_of_range():
    with pytest.raises(ValueError):
        video.shift_uap(_state(5), 5)
    with pytest.raises(ValueError):
        video.shift_uap(_state(5), -1)


def test_shift_composition_identity():
    s = _state(5)
    back = video.shift_uap(video.shift_uap(s, 4), 1)
    assert back.delta.tobytes() == s.delta.tobytes()


def test_shift_rule_and_norm():
    s = _state(5)
    shifted = video.shift_uap(s, 2)
    assert _frame_ids(video.repeat_uap(shifted, 5), s) == [3, 4, 5, 1, 2]
    assert shifted.linf() == s.linf()
    assert s.delta.tobytes() == _state(5).delta.tobytes()  # input untouched


@pytest.mark.parametrize("s", [0, 1, 3])
def test_shift_repeat_commutation(s):
    st = _state(4)
    T = 11
    assert np.array_equal(video.repeat_uap(video.shift_uap(st, s), T).delta_T, video.repeat_uap(st, T, shift=s).delta_T)


def test_apply_zero_uap_is_identity():
    clip = VideoClip(np.random.default_rng(1).random((4, 1, 2, 2)), 3)
    adv = video.apply_uap(clip, video.repeat_uap(uap.from_delta(np.zeros((2, 1, 2, 2)), 16 / 255), 4))
    assert adv.frames.tobytes() == clip.frames.tobytes()
    assert adv.label == 3


def test_apply_clamps_and_respects_budget():
    clip = VideoClip(np.random.default_rng(2).random((6, 3, 8, 8)), 0)
    s = uap.from_delta(np.full((3, 3, 8, 8), uap.budget_bound(16 / 255)) * np.sign(
        np.random.default_rng(3).standard_normal((3, 3, 8, 8))), 16 / 255)
    adv = video.apply_uap(clip, video.repeat_uap(s, 6))
    assert adv.frames.min() >= 0 and adv.frames.max() <= 1
    assert video.linf_distance(adv, clip) <= 16 / 255


def test_apply_interior_video_distance_equals_uap_norm():
    eps = 16 / 255
    frames = np.random.default_rng(4).uniform(eps, 1 - eps, (5, 3, 4, 4))
    clip = VideoClip(frames, 0)
    s = _state(3, (3, 4, 4), seed=5)
    pert = video.repeat_uap(s, 5)
    adv = video.apply_uap(clip, pert)
    assert video.linf_distance(adv, clip) == pytest.approx(np.abs(pert.delta_T).max(), abs=1e-7)


def test_apply_shape_mismatch():
    clip = VideoClip(np.zeros((4, 1, 2, 2)), 0)
    with pytest.raises(ValueError, match="shape"):
        video.apply_uap(clip, video.repeat_uap(_state(2, (1, 3, 3)), 4))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_apply_never_exceeds_perturbation_norm(seed):
    rng = np.random.default_rng(seed)
    clip = VideoClip(rng.random((3, 2, 4, 4), dtype=np.float32), 0)
    s = uap.from_delta(rng.uniform(-1, 1, (2, 2, 4, 4)) * float(uap.budget_bound(16 / 255)), 16 / 255)
    pert = video.repeat_uap(s, 3)
    adv = video.apply_uap(clip, pert)
    diff = np.abs(adv.frames.astype(np.float64) - clip.frames)
    assert np.all(diff <= np.abs(pert.delta_T.astype(np.float64)))
    assert video.linf_distance(adv, clip) <= 16 / 255
