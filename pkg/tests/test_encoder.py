import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoguide.encoder import (DEPTH_CHANNEL, MockGeometryEncoder, ResolutionError, ScheduleError,
                              cross_frame_dependence, encode, sample_layers)
from geoguide.scene import SceneConfig, generate_scene


def _scene(N=2, H=56, W=56, seed=0):
    return generate_scene(SceneConfig(N=N, H=H, W=W, num_objects=2), seed)


def test_sampling_matches_reference_configuration():
    s = sample_layers(24, 6)
    assert s.sampled == [8, 11, 14, 17, 20, 23] and s.anchor == 24
    assert s.decoder_targets == {1: 8, 2: 11, 3: 14, 4: 17, 5: 20, 6: 23}


def test_sampling_baseline_is_empty():
    s = sample_layers(24, 0)
    assert s.sampled == [] and s.anchor == 24 and s.m == 0


def test_sampling_three_layers():
    # s = (24 - 6) // 3 = 6 -> 6 + 6j - 1
    assert sample_layers(24, 3).sampled == [11, 17, 23]


@pytest.mark.parametrize("K,m", [(7, 1), (24, 18), (24, -1), (8, 6)])
def test_sampling_rejects_out_of_range(K, m):
    with pytest.raises(ScheduleError):
        sample_layers(K, m)


def test_stride_one_shift_is_reported():
    with pytest.warns(UserWarning, match="shifted"):
        s = sample_layers(24, 12)
    assert s.adjusted and s.sampled == list(range(7, 19))


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 64), st.data())
def test_sampling_properties(K, data):
    q = K // 4
    m = data.draw(st.integers(1, K - q - 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = sample_layers(K, m)
    assert all(a < b for a, b in zip(s.sampled, s.sampled[1:]))
    assert all(q < k <= K - 1 for k in s.sampled)
    assert len(s.sampled) <= m
    if not s.adjusted:
        assert len(s.sampled) == m


def test_stack_shape():
    sc = _scene(H=56, W=42)
    st_ = encode(sc, {"K": 8, "C_geo": 6, "P_g": 14}, seed=1)
    assert st_.K == 8 and st_.grid == (4, 3)
    assert all(layer.shape == (2, 4, 3, 6) for layer in st_.layers)


def test_non_divisible_resolution_states_resize():
    sc = _scene(H=64, W=64)
    with pytest.raises(ResolutionError, match="56x56"):
        encode(sc, {"K": 8, "C_geo": 4, "P_g": 14})


def test_deterministic():
    sc = _scene()
    a = encode(sc, {"K": 8, "C_geo": 8, "P_g": 14}, seed=3)
    b = encode(sc, {"K": 8, "C_geo": 8, "P_g": 14}, seed=3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.layers, b.layers))


def test_first_layer_is_per_frame():
    sc = _scene(seed=4)
    enc = MockGeometryEncoder(K=8, C_geo=8, P_g=14, seed=0)
    base = enc.encode(sc.frames, sc.depth)
    frames = sc.frames.copy()
    frames[1] = np.random.default_rng(0).uniform(size=frames[1].shape)
    bumped = enc.encode(frames, sc.depth)
    assert base.layer(1)[0].tobytes() == bumped.layer(1)[0].tobytes()
    assert not np.array_equal(base.layer(1)[1], bumped.layer(1)[1])


def test_last_layer_sees_other_frames():
    sc = _scene(seed=4)
    enc = MockGeometryEncoder(K=8, C_geo=8, P_g=14, seed=0)
    base = enc.encode(sc.frames, sc.depth)
    frames = sc.frames.copy()
    frames[1] = np.random.default_rng(0).uniform(size=frames[1].shape)
    bumped = enc.encode(frames, sc.depth)
    diff = np.abs(base.layer(8)[0] - bumped.layer(8)[0])
    assert diff.max() > 1e-3


def test_depth_channel_matches_patch_means():
    sc = _scene(N=3, seed=9)
    P = 14
    st_ = encode(sc, {"K": 10, "C_geo": 4, "P_g": P})
    gh, gw = st_.grid
    oracle = np.empty((3, gh, gw))
    for n in range(3):
        for r in range(gh):
            for c in range(gw):
                oracle[n, r, c] = sum(sc.depth[n, r * P + i, c * P + j] for i in range(P) for j in range(P)) / P**2
    for layer in st_.layers[:-1]:
        assert np.abs(layer[..., DEPTH_CHANNEL] - oracle).max() <= 1e-10


def test_depth_reaches_only_the_readout_slots():
    sc = _scene(N=2, seed=2)
    enc = MockGeometryEncoder(K=8, C_geo=6, P_g=14, seed=0)
    a = enc.encode(sc.frames, sc.depth)
    b = enc.encode(sc.frames, sc.depth * 1.7 + 0.3)
    # the anchor layer is a function of pixels alone
    assert a.layer(8).tobytes() == b.layer(8).tobytes()
    for k in range(1, 8):
        rest = np.delete(np.arange(6), DEPTH_CHANNEL)
        assert a.layer(k)[..., rest].tobytes() == b.layer(k)[..., rest].tobytes()
        assert not np.array_equal(a.layer(k)[..., DEPTH_CHANNEL], b.layer(k)[..., DEPTH_CHANNEL])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cross_frame_dependence_non_decreasing(seed):
    sc = _scene(N=3, seed=seed)
    enc = MockGeometryEncoder(K=12, C_geo=8, P_g=14, seed=seed)
    scores = cross_frame_dependence(enc, sc.frames, sc.depth, np.random.default_rng(seed))
    assert scores[0] == 0.0
    assert all(b >= a for a, b in zip(scores, scores[1:]))
    assert scores[-1] > 0.5
