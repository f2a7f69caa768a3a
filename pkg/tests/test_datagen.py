import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamseg.datagen import (ObjectSpec, SceneSpec, box_of, generate_dataset, generate_sequence, list_sequences,
                               load_sequence, preprocess, random_scene, validate_spec, value_noise)
from streamseg.errors import DataError


def rect(size=(10, 12), position=(20, 20), velocity=(0, 0), **kw):
    return ObjectSpec(shape="rectangle", size=size, position=position, velocity=velocity, texture_seed=4,
                      color_lo=(0.7, 0.1, 0.1), color_hi=(1.0, 0.4, 0.3), **kw)


def warp_errors(seq):
    """Max |frame[t+1](p + flow) - frame[t](p)| over pixels whose label is
    the same at both ends (so nothing was uncovered or occluded)."""
    T, H, W = seq.masks.shape
    worst = 0
    checked = 0
    ys, xs = np.mgrid[0:H, 0:W]
    for t in range(T - 1):
        u = seq.flows[t, ..., 0].astype(int)
        v = seq.flows[t, ..., 1].astype(int)
        ty, tx = ys + v, xs + u
        inside = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
        same = np.zeros_like(inside)
        same[inside] = seq.labels[t + 1][ty[inside], tx[inside]] == seq.labels[t][inside]
        a = seq.frames[t][same].astype(int)
        b = seq.frames[t + 1][ty[same], tx[same]].astype(int)
        if a.size:
            worst = max(worst, int(np.abs(a - b).max()))
        checked += int(same.sum())
    return worst, checked


class TestKinematics:
    def test_zero_velocity_static(self):
        spec = SceneSpec(height=48, width=48, frames=5, seed=1, main=rect())
        seq = generate_sequence(spec)
        for t in range(1, 5):
            np.testing.assert_array_equal(seq.frames[t], seq.frames[0])
            np.testing.assert_array_equal(seq.masks[t], seq.masks[0])
        np.testing.assert_array_equal(seq.flows, 0.0)

    def test_rectangle_moving_2_1(self):
        spec = SceneSpec(height=48, width=48, frames=6, seed=2, main=rect(velocity=(1, 2)))
        seq = generate_sequence(spec)
        for t in range(6):
            np.testing.assert_array_equal(seq.flows[t][seq.masks[t]], [[2, 1]] * int(seq.masks[t].sum()))
            np.testing.assert_array_equal(seq.flows[t][~seq.masks[t]], 0.0)
        worst, checked = warp_errors(seq)
        assert worst == 0 and checked > 0

    def test_pan_moves_background(self):
        # pan is (dy, dx) = (0, 3): background flow is (u, v) = (3, 0)
        spec = SceneSpec(height=48, width=48, frames=4, seed=3, main=rect(velocity=(1, 0)), pan=(0, 3))
        seq = generate_sequence(spec)
        bg = ~seq.masks[0]
        np.testing.assert_array_equal(seq.flows[0][bg], [[3, 0]] * int(bg.sum()))
        keep = ~seq.masks[1][:, 3:] & ~seq.masks[0][:, :-3]
        np.testing.assert_array_equal(seq.frames[1][:, 3:][keep], seq.frames[0][:, :-3][keep])

    @pytest.mark.parametrize("seed", range(4))
    def test_random_scenes_warp_exact(self, seed):
        seq = generate_sequence(random_scene(seed, frames=12))
        worst, checked = warp_errors(seq)
        assert worst == 0 and checked > 0


class TestScenes:
    def test_deterministic(self):
        a = generate_sequence(random_scene(5, frames=6))
        b = generate_sequence(random_scene(5, frames=6))
        for name in ("frames", "masks", "flows", "labels"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_spec_round_trip(self):
        spec = random_scene(9, frames=6)
        assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    @pytest.mark.parametrize("kw", [dict(height=60), dict(main=rect(position=(1, 20))),
                                    dict(main=rect(velocity=(5, 0)))])
    def test_invalid_specs(self, kw):
        base = dict(height=48, width=48, frames=10, seed=0, main=rect())
        with pytest.raises(DataError):
            validate_spec(SceneSpec(**{**base, **kw}))

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_main_stays_inside_and_proposals_tight(self, seed):
        seq = generate_sequence(random_scene(seed, frames=8))
        T, H, W = seq.masks.shape
        for t in range(T):
            m = seq.masks[t]
            assert m.any()
            ys, xs = np.nonzero(m)
            assert ys.min() >= 2 and xs.min() >= 2 and ys.max() <= H - 3 and xs.max() <= W - 3
            assert seq.proposals[t][0]["label"] == 1
            for p in seq.proposals[t]:
                assert p["mask"].any()
                assert p["box"] == box_of(p["mask"])
                assert 0 <= p["objectness"] <= 1

    def test_corrupted_proposals_differ(self):
        spec = random_scene(3, frames=6, corrupt_proposals=True)
        seq = generate_sequence(spec)
        assert any(not np.array_equal(p[0]["mask"], m) for p, m in zip(seq.proposals, seq.masks))

    def test_value_noise_range(self, rng):
        v = value_noise(rng, 20, 30, cell=4)
        assert v.shape == (20, 30) and v.min() >= 0 and v.max() <= 1


class TestPreprocess:
    def test_ranges(self):
        frame = np.array([[[0, 255, 127]]], dtype=np.uint8)
        flow = np.array([[[3.0, 4.0]], [[0.0, 1.0]]]).reshape(1, 2, 2)
        rgb, fl = preprocess(frame, flow)
        np.testing.assert_allclose(rgb[:, 0, 0], [-1.0, 1.0, 127 / 127.5 - 1], atol=1e-7)
        np.testing.assert_allclose(fl[:, 0, 0], [0.6, 0.8], atol=1e-7)

    def test_zero_flow_untouched(self):
        _, fl = preprocess(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2, 2)))
        np.testing.assert_array_equal(fl, 0.0)


class TestDatasetLayout:
    def test_write_and_load(self, tmp_path):
        dirs = generate_dataset(tmp_path, 2, seed=4, frames=5)
        assert [d.name for d in dirs] == ["seq000", "seq001"]
        assert list_sequences(tmp_path) == dirs
        d = dirs[0]
        for sub, suffix in (("frames", ".ppm"), ("flows", ".flo"), ("masks", ".pgm")):
            assert sorted(p.name for p in (d / sub).iterdir()) == [f"{i:05d}{suffix}" for i in range(5)]
        seq = load_sequence(d)
        spec = SceneSpec.from_dict(json.loads((d / "spec.json").read_text()))
        ref = generate_sequence(spec)
        np.testing.assert_array_equal(seq.frames, ref.frames)
        np.testing.assert_array_equal(seq.flows, ref.flows)
        np.testing.assert_array_equal(seq.masks, ref.masks)
        for got, want in zip(seq.proposals, ref.proposals):
            assert len(got) == len(want)
            for g, w in zip(got, want):
                np.testing.assert_array_equal(g["mask"], w["mask"])
                assert g["box"] == w["box"] and g["objectness"] == w["objectness"]

    def test_missing_frame_detected(self, tmp_path):
        d = generate_dataset(tmp_path, 1, seed=1, frames=4)[0]
        (d / "frames" / "00001.ppm").unlink()
        with pytest.raises(DataError):
            load_sequence(d)

    def test_empty_root(self, tmp_path):
        with pytest.raises(DataError):
            list_sequences(tmp_path)
