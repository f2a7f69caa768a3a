import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from streamseg.errors import PreconditionError, ShapeError
from streamseg.instance import (P0, InstanceProposal, KalmanTrack, binarize, boost_mask, box_iou, box_to_z,
                                compute_iou, fuse_sequence, kalman_predict, kalman_update, score_proposals,
                                select_and_fuse, z_to_box)


def block_mask(shape, y0, x0, y1, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


class TestComputeIou:
    def test_worked_example(self):
        mask = block_mask((4, 4), 0, 0, 2, 2)
        pixel = np.zeros((4, 4))
        pixel[mask] = 0.8
        pixel[3, 3] = 0.6
        assert compute_iou(mask, pixel) == pytest.approx(0.64, abs=1e-15)

    def test_identical_binary(self):
        mask = block_mask((5, 5), 1, 1, 4, 3)
        assert compute_iou(mask, mask.astype(float)) == 1.0

    def test_disjoint(self):
        assert compute_iou(block_mask((4, 4), 0, 0, 2, 2), block_mask((4, 4), 2, 2, 4, 4).astype(float)) == 0.0

    def test_empty_union(self):
        assert compute_iou(np.zeros((3, 3), bool), np.zeros((3, 3))) == 0.0

    def test_threshold_is_strict(self):
        assert not binarize(np.array([0.5]))[0]
        assert binarize(np.array([0.5000001]))[0]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            compute_iou(np.ones((3, 3), bool), np.ones((3, 4)))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_oracle_and_range(self, seed):
        rng = np.random.default_rng(seed)
        pixel = rng.uniform(size=(6, 7))
        mask = rng.uniform(size=(6, 7)) > 0.6
        v = compute_iou(mask, pixel)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(oracles.soft_iou(mask, pixel), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(a=hnp.arrays(bool, (5, 6)), b=hnp.arrays(bool, (5, 6)))
    def test_binary_is_classical_iou(self, a, b):
        union = (a | b).sum()
        expected = 0.0 if union == 0 else (a & b).sum() / union
        assert compute_iou(a, b.astype(float)) == pytest.approx(expected, abs=1e-15)


class TestScores:
    def test_product(self):
        mask = block_mask((2, 2), 0, 0, 1, 2)
        pixel = np.array([[1.0, 1.0], [1.0, 1.0]])   # IoU 0.5
        props = [InstanceProposal(mask, 0.8), InstanceProposal(mask, 0.0)]
        np.testing.assert_allclose(score_proposals(props, pixel), [0.4, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), factor=st.floats(0.01, 1.0))
    def test_argmax_invariant_to_objectness_scale(self, seed, factor):
        rng = np.random.default_rng(seed)
        pixel = rng.uniform(size=(6, 6))
        masks = []
        for _ in range(4):
            m = rng.uniform(size=(6, 6)) > 0.5
            m[rng.integers(6), rng.integers(6)] = True
            masks.append(m)
        obj = rng.uniform(0.05, 1.0, 4)
        base = score_proposals([InstanceProposal(m, o) for m, o in zip(masks, obj)], pixel)
        scaled = score_proposals([InstanceProposal(m, o * factor) for m, o in zip(masks, obj)], pixel)
        assert np.argmax(base) == np.argmax(scaled)

    def test_matches_oracle_on_random_sets(self, rng):
        for _ in range(100):
            pixel = rng.uniform(size=(5, 5))
            masks = [rng.uniform(size=(5, 5)) > 0.4 for _ in range(3)]
            for m in masks:
                m[0, 0] = True
            obj = rng.uniform(size=3)
            got = score_proposals([InstanceProposal(m, o) for m, o in zip(masks, obj)], pixel)
            want = [oracles.soft_iou(m, pixel) * o for m, o in zip(masks, obj)]
            np.testing.assert_allclose(got, want, atol=1e-12)


class TestProposal:
    def test_tight_box(self):
        p = InstanceProposal(block_mask((6, 8), 1, 2, 4, 7), 0.5)
        assert p.box == [2, 1, 7, 4]

    def test_empty_rejected(self):
        with pytest.raises(PreconditionError):
            InstanceProposal(np.zeros((3, 3), bool), 0.5)

    @pytest.mark.parametrize("obj", [-0.1, 1.5])
    def test_objectness_range(self, obj):
        with pytest.raises(PreconditionError):
            InstanceProposal(np.ones((2, 2), bool), obj)


class TestBoost:
    def test_worked_example(self):
        pixel = np.array([[0.6, 0.8, 0.4]])
        mask = np.array([[True, True, False]])
        np.testing.assert_allclose(boost_mask(pixel, mask), [[1.0, 1.0, 0.2]])

    def test_zero_map(self):
        mask = block_mask((3, 3), 0, 0, 2, 2)
        np.testing.assert_array_equal(boost_mask(np.zeros((3, 3)), mask), 0.0)

    def test_ones_stay_one(self):
        mask = block_mask((3, 3), 0, 0, 2, 2)
        out = boost_mask(np.ones((3, 3)), mask)
        np.testing.assert_array_equal(out[mask], 1.0)

    def test_empty_mask(self):
        with pytest.raises(PreconditionError):
            boost_mask(np.ones((2, 2)), np.zeros((2, 2), bool))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        pixel = rng.uniform(size=(5, 5))
        mask = rng.uniform(size=(5, 5)) > 0.5
        mask[2, 2] = True
        out = boost_mask(pixel, mask)
        assert np.all(out[mask] >= pixel[mask])
        assert np.all(out[~mask] <= pixel[~mask])
        assert out.min() >= 0 and out.max() <= 1
        np.testing.assert_allclose(out, oracles.boost(pixel, mask), atol=1e-12)


class TestKalman:
    def test_box_round_trip(self):
        box = [3.0, 4.0, 13.0, 9.0]
        np.testing.assert_allclose(z_to_box(np.concatenate([box_to_z(box), np.zeros(3)])), box)

    def test_zero_velocity_keeps_box(self):
        box = [10, 12, 20, 30]
        pred, _ = kalman_predict(KalmanTrack.from_box(box))
        np.testing.assert_allclose(pred, box)

    def test_velocity_shifts_center(self):
        t = KalmanTrack.from_box([10, 12, 20, 30])
        t.x[4] = 5.0
        pred, _ = kalman_predict(t)
        np.testing.assert_allclose(pred, [15, 12, 25, 30])

    def test_predict_does_not_mutate_input(self):
        t = KalmanTrack.from_box([0, 0, 4, 4])
        t.x[4] = 1.0
        kalman_predict(t)
        kalman_update(t, [1, 0, 5, 4])
        assert t.x[0] == 2.0 and t.hits == 1

    def test_constant_velocity_track(self):
        boxes = [[5 + 3 * t, 8 + 2 * t, 17 + 3 * t, 18 + 2 * t] for t in range(10)]
        track = KalmanTrack.from_box(boxes[0])
        for b in boxes[1:6]:
            track.predict()
            track.update(b)
        pred = track.predict()
        np.testing.assert_allclose(pred, boxes[6], atol=1.0)

    def test_rejects_bad_covariance(self):
        t = KalmanTrack.from_box([0, 0, 4, 4])
        t.P = t.P.copy()
        t.P[0, 0] = -5.0
        with pytest.raises(PreconditionError):
            kalman_predict(t)
        t.P = P0.copy()
        t.P[0, 1] = 3.0
        with pytest.raises(PreconditionError):
            kalman_update(t, [0, 0, 4, 4])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((7, 7))
        P = a @ a.T + 0.1 * np.eye(7)
        x = np.array([rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(50, 400), rng.uniform(0.5, 2),
                      *rng.normal(0, 1, 3)])
        boxes = []
        for t in range(8):
            if rng.uniform() < 0.25:
                boxes.append(None)
            else:
                x0, y0 = rng.uniform(0, 40, 2)
                boxes.append([x0, y0, x0 + rng.uniform(4, 20), y0 + rng.uniform(4, 20)])
        trail = oracles.kalman_reference(x, P, boxes)
        track = KalmanTrack(x.copy(), P.copy())
        got = []
        for b in boxes:
            track.predict()
            got.append((track.x.copy(), track.P.copy()))
            if b is not None:
                track.update(b)
                got.append((track.x.copy(), track.P.copy()))
        assert len(got) == len(trail)
        for (gx, gP), (rx, rP) in zip(got, trail):
            np.testing.assert_allclose(gx, rx, rtol=0, atol=1e-9 * max(1.0, np.abs(rx).max()))
            np.testing.assert_allclose(gP, rP, rtol=0, atol=1e-9 * max(1.0, np.abs(rP).max()))


class TestSelectAndFuse:
    def test_single_proposal_no_track(self):
        pixel = np.full((8, 8), 0.3)
        prop = InstanceProposal(block_mask((8, 8), 2, 2, 5, 5), 0.9)
        fused, track, chosen = select_and_fuse(pixel, [prop], None)
        assert chosen == 0 and track is not None
        np.testing.assert_allclose(track.box, prop.box)
        np.testing.assert_allclose(fused, boost_mask(pixel, prop.mask))

    def test_gate_excludes_far_proposal(self):
        # the far proposal covers the whole pixel blob and has the higher
        # score, but the track expects the object near the top-left corner
        pixel = np.zeros((20, 20))
        pixel[12:18, 12:18] = 0.9
        near = InstanceProposal(block_mask((20, 20), 1, 1, 6, 6), 0.5)
        far = InstanceProposal(block_mask((20, 20), 12, 12, 18, 18), 1.0)
        raw = score_proposals([near, far], pixel)
        assert raw[1] > raw[0]
        track = KalmanTrack.from_box([1, 1, 6, 6])
        fused, new_track, chosen = select_and_fuse(pixel, [near, far], track)
        assert chosen == 0
        assert new_track.hits == 2
        np.testing.assert_allclose(fused, boost_mask(pixel, near.mask))

    def test_empty_list_coasts(self):
        pixel = np.random.default_rng(0).uniform(size=(6, 6))
        track = KalmanTrack.from_box([0, 0, 3, 3])
        fused, new_track, chosen = select_and_fuse(pixel, [], track)
        assert chosen is None
        np.testing.assert_array_equal(fused, pixel)
        assert new_track.misses == 1

    def test_track_dropped_after_coast_limit(self):
        track = KalmanTrack.from_box([0, 0, 3, 3])
        pixel = np.zeros((6, 6))
        for i in range(10):
            _, track, _ = select_and_fuse(pixel, [], track, coast_limit=10)
            assert track is not None
        _, track, _ = select_and_fuse(pixel, [], track, coast_limit=10)
        assert track is None

    def test_ties_go_to_lowest_index(self):
        m = block_mask((6, 6), 1, 1, 3, 3)
        pixel = np.zeros((6, 6))
        _, _, chosen = select_and_fuse(pixel, [InstanceProposal(m, 0.5), InstanceProposal(m, 0.5)])
        assert chosen == 0

    def test_fuse_sequence_deterministic(self, rng):
        probs = rng.uniform(size=(4, 8, 8))
        props = [[InstanceProposal(block_mask((8, 8), t, t, t + 3, t + 3), 0.7),
                  InstanceProposal(block_mask((8, 8), 4, 0, 8, 3), 0.6)] for t in range(4)]
        a, ca = fuse_sequence(probs, props)
        b, cb = fuse_sequence(probs, props)
        np.testing.assert_array_equal(a, b)
        assert ca == cb


def test_box_iou():
    assert box_iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    assert box_iou([0, 0, 2, 2], [2, 0, 4, 2]) == 0.0
