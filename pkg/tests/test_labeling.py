import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtrcnn.geometry import NUM_KEYPOINTS, Box, Keypoint, iou
from mtrcnn.labeling import (
    ACTIONS,
    DetLabel,
    Instance,
    build_samples,
    jitter_augment,
    label_action,
    label_detection,
    label_pose,
)

RUNNING = ACTIONS.index("running")


def kps_in(box, v=True):
    xs = np.linspace(box.x_min + 1, box.x_max - 1, NUM_KEYPOINTS)
    ys = np.linspace(box.y_min + 1, box.y_max - 1, NUM_KEYPOINTS)
    return tuple(Keypoint(float(x), float(y), v) for x, y in zip(xs, ys))


def inst(box, action=RUNNING, keypoints=True):
    return Instance(box, kps_in(box) if keypoints else None, action)


REGION = Box(0, 0, 10, 10)


def overlapping(o):
    """A box whose IoU with REGION is exactly ``o`` (width 10*o, full height)."""
    return Box(0, 0, 10 * o, 10)


class TestInstance:
    def test_keypoint_count_enforced(self):
        with pytest.raises(ValueError):
            Instance(REGION, kps_in(REGION)[:5], 0)

    def test_action_range_enforced(self):
        with pytest.raises(ValueError):
            Instance(REGION, None, len(ACTIONS))


class TestDetection:
    def test_identical_positive(self):
        assert label_detection(REGION, [inst(REGION)]) == DetLabel.POSITIVE

    def test_disjoint_negative(self):
        assert label_detection(REGION, [inst(Box(20, 20, 30, 30))]) == DetLabel.NEGATIVE

    def test_empty_negative(self):
        assert label_detection(REGION, []) == DetLabel.NEGATIVE

    def test_ignore_band(self):
        assert iou(REGION, overlapping(0.4)) == 0.4
        assert label_detection(REGION, [inst(overlapping(0.4))]) == DetLabel.IGNORE

    @pytest.mark.parametrize("o", [0.5, 0.3])
    def test_boundaries_ignored(self, o):
        assert iou(REGION, overlapping(o)) == o
        assert label_detection(REGION, [inst(overlapping(o))]) == DetLabel.IGNORE


class TestPose:
    def test_identity_targets(self):
        idx, targets = label_pose(REGION, [inst(REGION)])
        assert idx == 0
        assert all(-0.5 <= t.x <= 0.5 and -0.5 <= t.y <= 0.5 for t in targets)

    def test_insufficient_overlap(self):
        assert label_pose(REGION, [inst(overlapping(0.4))]) is None

    def test_boundary(self):
        assert label_pose(REGION, [inst(overlapping(0.5))]) is None

    def test_max_iou_wins(self):
        low = inst(Box(0, 0, 10, 5.5))  # IoU 0.55
        high = inst(overlapping(0.6))
        idx, targets = label_pose(REGION, [low, high])
        assert idx == 1
        assert targets[0].x == pytest.approx((high.keypoints[0].x - 5) / 10)

    def test_lowest_index_on_tie(self):
        a, b = inst(Box(0, 0, 6, 10)), inst(Box(4, 0, 10, 10))
        assert iou(REGION, a.box) == iou(REGION, b.box)
        assert label_pose(REGION, [a, b])[0] == 0
        assert label_pose(REGION, [b, a])[0] == 0

    def test_no_keypoints(self):
        assert label_pose(REGION, [inst(REGION, keypoints=False)]) is None


class TestAction:
    def test_identity(self):
        assert ACTIONS[label_action(REGION, [inst(REGION)])] == "running"

    def test_below_threshold(self):
        assert label_action(REGION, [inst(overlapping(0.6))]) is None

    def test_boundary(self):
        assert iou(REGION, overlapping(0.7)) == pytest.approx(0.7, abs=1e-15)
        box = Box(0, 0, 7, 10)
        assert iou(REGION, box) == 0.7
        assert label_action(REGION, [inst(box)]) is None

    def test_unannotated(self):
        assert label_action(REGION, [inst(overlapping(0.75), action=None)]) is None


class TestJitter:
    def test_count_and_floor(self):
        person = inst(Box(10, 10, 30, 60))
        out = jitter_augment(person, 100, 0.7, rng_seed=1)
        assert len(out) == 100
        assert all(iou(b, person.box) >= 0.7 for b in out)

    def test_zero_range_returns_box(self):
        person = inst(Box(10, 10, 30, 60))
        assert jitter_augment(person, 1, 1.0, center_range=0, scale_range=0) == [person.box]

    def test_deterministic(self):
        person = inst(Box(10, 10, 30, 60))
        assert jitter_augment(person, 20, rng_seed=5) == jitter_augment(person, 20, rng_seed=5)
        assert jitter_augment(person, 20, rng_seed=5) != jitter_augment(person, 20, rng_seed=6)

    def test_unreachable_fails(self):
        with pytest.raises(RuntimeError):
            jitter_augment(inst(Box(0, 0, 10, 10)), 2, min_iou=0.999999, rng_seed=0)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            jitter_augment(inst(REGION), 0)
        with pytest.raises(ValueError):
            jitter_augment(inst(REGION), 1, min_iou=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.3, 0.9))
    def test_floor_property(self, seed, floor):
        person = inst(Box(5, 5, 25, 45))
        assert all(iou(b, person.box) >= floor for b in jitter_augment(person, 10, floor, rng_seed=seed))


class TestBuildSamples:
    def test_empty_instances(self):
        out = build_samples([REGION, Box(3, 3, 9, 9)], [])
        assert all(s.det_label == DetLabel.NEGATIVE and not s.pose_active and not s.action_active for s in out)
        assert all(s.matched_instance is None for s in out)

    def test_perfect_proposal(self):
        (s,) = build_samples([REGION], [inst(REGION)])
        assert s.det_label == DetLabel.POSITIVE and s.pose_active and s.action_active
        assert s.matched_instance == 0 and s.action_label == RUNNING

    def test_middle_band(self):
        (s,) = build_samples([REGION], [inst(overlapping(0.6))])
        assert s.det_label == DetLabel.POSITIVE and s.pose_active and not s.action_active

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.05, 1.0), st.booleans(), st.booleans())
    def test_threshold_monotonicity(self, o, has_kps, has_action):
        person = inst(overlapping(o), action=RUNNING if has_action else None, keypoints=has_kps)
        (s,) = build_samples([REGION], [person])
        if s.action_active:
            assert label_pose(REGION, [inst(overlapping(o))]) is not None
        if s.pose_active:
            assert s.det_label == DetLabel.POSITIVE
        assert s.pose_active == (s.pose_targets is not None)
        assert not s.action_active or s.action_label is not None

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(range(3)))
    def test_permutation_invariance(self, perm):
        # no proposal ties between two people, so the match is order independent
        people = [inst(Box(0, 0, 10, 8)), inst(Box(2, 1, 12, 10), action=0), inst(Box(40, 40, 50, 60))]
        proposals = [REGION, Box(1, 0, 11, 9), Box(38, 42, 50, 58), Box(70, 70, 80, 80)]
        base = build_samples(proposals, people)
        shuffled = build_samples(proposals, [people[i] for i in perm])
        for a, b in zip(base, shuffled):
            assert a.det_label == b.det_label
            assert a.pose_targets == b.pose_targets
            assert a.action_label == b.action_label
