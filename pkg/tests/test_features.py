import math

import numpy as np
import pytest

from crosswise.features import (FEATURE_DIM, FEATURE_GROUPS,
                                WindowAssembler, geometric_features, mask_for_groups,
                                motion_features, pose_features, step_features,
                                temporal_filter)
from crosswise.geom import ZoneKind, ZoneType
from crosswise.ingest import PoseDetection


def hist(points):
    """(frame, (x, y)) pairs -> history entries with dummy boxes."""
    return [(f, p, (p[0] - 15, p[1] - 30, 30.0, 60.0)) for f, p in points]


def pose_with(nose, ls, rs, conf=0.9, nose_conf=None):
    kps = np.zeros((17, 3))
    kps[:, 2] = conf
    kps[0, :2] = nose
    kps[0, 2] = nose_conf if nose_conf is not None else conf
    kps[5, :2] = ls
    kps[6, :2] = rs
    return PoseDetection((0.0, 0.0, 40.0, 80.0), kps)


class TestMotionFeatures:
    def test_displacement_arithmetic(self):
        h = hist([(0, (0.0, 0.0)), (10, (3.0, 4.0))])
        speed, s, c = motion_features(h, fps=20)
        assert speed == pytest.approx(10.0)  # 5 px over 10 frames at 20 fps
        theta = math.atan2(4, 3)
        assert (s, c) == pytest.approx((math.sin(theta), math.cos(theta)))

    def test_stationary(self):
        h = hist([(0, (5.0, 5.0)), (10, (5.0, 5.0))])
        assert motion_features(h, fps=20) == (0.0, 0.0, 0.0)

    def test_metric_conversion(self):
        h = hist([(0, (0.0, 0.0)), (10, (3.0, 4.0))])
        speed, _, _ = motion_features(h, fps=20, px_per_meter=50.0)
        assert speed == pytest.approx(0.2)

    def test_diagonal_normalization(self):
        h = hist([(0, (0.0, 0.0)), (10, (3.0, 4.0))])
        speed, _, _ = motion_features(h, fps=20, frame_diagonal=100.0)
        assert speed == pytest.approx(0.1)

    def test_single_point(self):
        assert motion_features(hist([(0, (1.0, 1.0))]), fps=20) == (0.0, 0.0, 0.0)

    def test_uses_only_recent_span(self):
        # points older than 10 frames back are ignored
        h = hist([(0, (1000.0, 0.0)), (5, (0.0, 0.0)), (12, (7.0, 0.0))])
        speed, s, c = motion_features(h, fps=20)
        assert speed == pytest.approx(7.0 * 20 / 7)
        assert (s, c) == pytest.approx((0.0, 1.0))

    def test_sub_pixel_displacement_no_heading(self):
        h = hist([(0, (0.0, 0.0)), (10, (0.5, 0.0))])
        speed, s, c = motion_features(h, fps=20)
        assert speed > 0
        assert (s, c) == (0.0, 0.0)


class TestPoseFeatures:
    def test_hand_geometry(self):
        # shoulders 40 px apart on a horizontal line, nose 10 px above center
        p = pose_with(nose=(120, 190), ls=(100, 200), rs=(140, 200))
        bs, bc, fs, fc, dist = pose_features(p)
        assert dist == pytest.approx(40.0)
        assert (bs, bc) == pytest.approx((math.sin(-math.pi / 2),
                                          math.cos(-math.pi / 2)), abs=1e-12)
        assert (fs, fc) == pytest.approx((-1.0, 0.0), abs=1e-12)

    def test_nose_side_flip(self):
        p = pose_with(nose=(120, 210), ls=(100, 200), rs=(140, 200))
        bs, bc, _, _, _ = pose_features(p)
        assert (bs, bc) == pytest.approx((1.0, 0.0), abs=1e-12)  # +90 degrees

    def test_all_confidence_zero(self):
        p = pose_with(nose=(120, 190), ls=(100, 200), rs=(140, 200), conf=0.0)
        assert pose_features(p) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_missing_nose_keeps_shoulder_distance(self):
        p = pose_with(nose=(120, 190), ls=(100, 200), rs=(140, 200), nose_conf=0.1)
        bs, bc, fs, fc, dist = pose_features(p)
        assert (bs, bc, fs, fc) == (0.0, 0.0, 0.0, 0.0)
        assert dist == pytest.approx(40.0)

    def test_unit_circle_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            phi = rng.uniform(-math.pi, math.pi)
            mid = rng.uniform(50, 150, 2)
            perp = np.array([-math.sin(phi), math.cos(phi)])
            f = np.array([math.cos(phi), math.sin(phi)])
            p = pose_with(nose=tuple(mid + 12 * f), ls=tuple(mid + 20 * perp),
                          rs=tuple(mid - 20 * perp))
            bs, bc, fs, fc, _ = pose_features(p)
            assert bs**2 + bc**2 == pytest.approx(1.0, abs=1e-6)
            assert math.atan2(bs, bc) == pytest.approx(phi, abs=1e-9)
            assert math.atan2(fs, fc) == pytest.approx(phi, abs=1e-9)


class TestGeometricFeatures:
    def test_center_on_entry_a(self, geometry):
        d_a, d_b, _ = geometric_features(geometry.crosswalk_entries["A"], geometry)
        assert d_a == 0.0
        assert d_b > 0.0

    def test_symmetry(self, geometry):
        a = np.array(geometry.crosswalk_entries["A"])
        b = np.array(geometry.crosswalk_entries["B"])
        mid = tuple((a + b) / 2.0)
        d_a, d_b, _ = geometric_features(mid, geometry)
        assert d_a == pytest.approx(d_b)

    def test_compactness_arithmetic(self, geometry):
        # demo waiting area is 160 x 140 px in a 1280 x 720 frame
        _, _, compact = geometric_features((600.0, 480.0), geometry)
        assert compact == pytest.approx(160 * 140 / (1280 * 720))


class TestTemporalFilter:
    def test_idempotent_on_identical_vectors(self):
        v = np.zeros(FEATURE_DIM)
        v[0], v[2], v[5] = 0.3, 1.0, 2.0
        v[6], v[7] = math.sin(0.4), math.cos(0.4)
        out = temporal_filter([v.copy() for _ in range(10)])
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_mean_slot(self):
        frames = []
        for speed in range(1, 11):
            v = np.zeros(FEATURE_DIM)
            v[5] = float(speed)
            frames.append(v)
        assert temporal_filter(frames)[5] == pytest.approx(5.5)

    def test_angle_wraparound(self):
        a, b = math.radians(170), math.radians(-170)
        frames = []
        for ang in (a, b):
            v = np.zeros(FEATURE_DIM)
            v[6], v[7] = math.sin(ang), math.cos(ang)
            frames.append(v)
        out = temporal_filter(frames)
        assert math.atan2(out[6], out[7]) == pytest.approx(math.pi, abs=1e-9)

    def test_opposed_angles_collapse_to_zero(self):
        frames = []
        for ang in (0.0, math.pi):
            v = np.zeros(FEATURE_DIM)
            v[6], v[7] = math.sin(ang), math.cos(ang)
            frames.append(v)
        out = temporal_filter(frames)
        assert (out[6], out[7]) == (0.0, 0.0)

    def test_zone_mode(self):
        frames = []
        for slot in (2, 2, 2, 3):
            v = np.zeros(FEATURE_DIM)
            v[slot] = 1.0
            frames.append(v)
        out = temporal_filter(frames)
        assert out[2] == 1.0 and out[3] == 0.0

    def test_zone_tie_prefers_later_stage(self):
        frames = []
        for slot in (2, 2, 3, 3):
            v = np.zeros(FEATURE_DIM)
            v[slot] = 1.0
            frames.append(v)
        out = temporal_filter(frames)
        assert out[3] == 1.0 and out[2] == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        frames = [rng.uniform(-1, 1, FEATURE_DIM) for _ in range(7)]
        a = temporal_filter(frames)
        b = temporal_filter(frames[::-1])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            temporal_filter([])


class TestWindowAssembler:
    @pytest.mark.parametrize("n_steps,expected", [(0, 0), (3, 0), (4, 0), (5, 1),
                                                  (7, 3), (12, 8)])
    def test_window_count(self, n_steps, expected):
        asm = WindowAssembler(track_id=1)
        emitted = 0
        for k in range(n_steps):
            if asm.push(np.full(FEATURE_DIM, float(k)), end_frame_idx=10 * (k + 1)):
                emitted += 1
        assert emitted == expected == max(0, n_steps - 4)

    def test_rows_ordered_oldest_first(self):
        asm = WindowAssembler(track_id=2)
        win = None
        for k in range(6):
            win = asm.push(np.full(FEATURE_DIM, float(k)), 10 * (k + 1)) or win
        assert win.matrix[0, 0] == 1.0 and win.matrix[-1, 0] == 5.0


class TestStepFeatures:
    def test_no_nans_under_degeneracy(self, geometry):
        v = step_features((600.0, 480.0), ZoneKind(ZoneType.WAITING, "wait"),
                          hist([(0, (600.0, 480.0))]), None, 0.0, geometry)
        assert np.all(np.isfinite(v))
        assert v[2] == 1.0
        assert tuple(v[11:16]) == (0.0,) * 5

    def test_group_masks_cover_disjoint_slots(self):
        seen = set()
        for slots in FEATURE_GROUPS.values():
            assert not (seen & set(slots))
            seen.update(slots)
        assert seen == set(range(FEATURE_DIM))

    def test_mask_zeroes_exact_slots(self):
        keep = mask_for_groups(["P"])
        assert sorted(np.where(keep)[0]) == list(FEATURE_GROUPS["P"])
        with pytest.raises(ValueError):
            mask_for_groups(["X"])
