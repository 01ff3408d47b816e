import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strobe.geometry import (
    ClassId, DetBox, LabelTrack, Pose2, TrackRangeError, TrackState, box_corners, centroid_distance,
    polygon_area, pose_compose, relative_pose, rotated_iou, track_state_at, wrap_angle,
)

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
dim = st.floats(0.3, 6.0)
boxes = st.tuples(coord, coord, dim, dim, angle)


def mc_iou(a, b, n=400_000, seed=0):
    """Monte-Carlo IoU oracle: sample the joint bounding square, test both boxes."""
    rng = np.random.default_rng(seed)
    pts = np.array(box_corners(a) + box_corners(b))
    lo, hi = pts.min(0), pts.max(0)
    p = rng.uniform(lo, hi, size=(n, 2))

    def inside(box):
        cx, cy, l, w, h = box
        c, s = math.cos(h), math.sin(h)
        dx, dy = p[:, 0] - cx, p[:, 1] - cy
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / (ia | ib).sum()


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_pose_yaw_wrapped():
    assert Pose2(0, 0, 2 * math.pi + 0.5).yaw == pytest.approx(0.5)


def test_pose_compose_examples():
    p = Pose2(1.5, -2.0, 0.3)
    assert pose_compose(Pose2(), p) == p
    assert pose_compose(Pose2(1, 0, 0), Pose2(2, 0, 0)) == Pose2(3, 0, 0)
    q = pose_compose(Pose2(0, 0, math.pi / 2), Pose2(1, 0, 0))
    assert (q.x, q.y, q.yaw) == pytest.approx((0, 1, math.pi / 2))


@given(st.tuples(coord, coord, angle), st.tuples(coord, coord, angle), st.tuples(coord, coord, angle))
def test_pose_compose_associative(a, b, c):
    a, b, c = Pose2(*a), Pose2(*b), Pose2(*c)
    l = pose_compose(pose_compose(a, b), c)
    r = pose_compose(a, pose_compose(b, c))
    assert abs(l.x - r.x) <= 1e-12 * 200 and abs(l.y - r.y) <= 1e-12 * 200
    assert abs(wrap_angle(l.yaw - r.yaw)) <= 1e-12


@given(st.tuples(coord, coord, angle), st.tuples(coord, coord, angle))
def test_relative_pose_inverts_compose(a, b):
    a, b = Pose2(*a), Pose2(*b)
    r = pose_compose(a, relative_pose(a, b))
    assert (r.x, r.y) == pytest.approx((b.x, b.y), abs=1e-9)
    assert abs(wrap_angle(r.yaw - b.yaw)) < 1e-9


def _track(states, cls=ClassId.VEHICLE):
    return LabelTrack(0, cls, 4.8, 2.0, tuple(states))


def test_track_state_examples():
    still = _track([TrackState(0, Pose2(3, 4, 0.2)), TrackState(500_000, Pose2(3, 4, 0.2))])
    for t in (0, 123_456, 500_000):
        assert track_state_at(still, t)[0] == Pose2(3, 4, 0.2)
    moving = _track([TrackState(0, Pose2(0, 0, 0), (10.0, 0.0)), TrackState(1_000_000, Pose2(10, 0, 0), (10.0, 0.0))])
    pose, dims = track_state_at(moving, 100_000)
    assert (pose.x, pose.y) == pytest.approx((1.0, 0.0))
    assert dims == (4.8, 2.0)
    spin = _track([TrackState(0, Pose2(0, 0, 0), yaw_rate=1.0), TrackState(1_000_000, Pose2(0, 0, 1.0), yaw_rate=1.0)])
    assert track_state_at(spin, 500_000)[0].yaw == pytest.approx(0.5)


def test_track_state_verbatim_and_horizon():
    s = TrackState(200_000, Pose2(1.234567, -7.5, 0.1), (3.0, 1.0), 0.2)
    tr = _track([TrackState(0, Pose2(0, 0, 0), (3.0, 1.0), 0.2), s])
    assert track_state_at(tr, 200_000)[0] is s.pose
    track_state_at(tr, 210_000)
    track_state_at(tr, -10_000)
    with pytest.raises(TrackRangeError):
        track_state_at(tr, 210_001)
    with pytest.raises(TrackRangeError):
        track_state_at(tr, -10_001)


def test_track_states_sorted():
    with pytest.raises(ValueError):
        _track([TrackState(10, Pose2()), TrackState(5, Pose2())])


def test_detbox_invariants():
    DetBox(ClassId.PEDESTRIAN, 1, 2, score=0.3)
    with pytest.raises(ValueError):
        DetBox(ClassId.PEDESTRIAN, 1, 2, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        DetBox(ClassId.VEHICLE, 0, 0, 4.0, 2.0, 0.0, score=1.5)
    with pytest.raises(ValueError):
        DetBox(ClassId.CYCLIST, 0, 0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        DetBox(ClassId.VEHICLE, 0, 0)


def test_polygon_area_ccw():
    assert polygon_area(box_corners((0, 0, 4.8, 2.0, 0.7))) == pytest.approx(9.6)


def test_rotated_iou_examples():
    a = (0.0, 0.0, 4.8, 2.0, 0.0)
    assert rotated_iou(a, a) == pytest.approx(1.0)
    assert rotated_iou(a, (10.0, 0.0, 4.8, 2.0, 0.0)) == 0.0
    shifted = (1.0, 0.0, 4.8, 2.0, 0.0)
    assert rotated_iou(a, shifted) == pytest.approx(7.6 / 11.6, abs=1e-12)
    assert mc_iou(a, shifted) == pytest.approx(0.6552, abs=3e-3)
    # along an arbitrary heading the shift is the same
    h = 0.83
    b = (math.cos(h), math.sin(h), 4.8, 2.0, h)
    assert rotated_iou((0, 0, 4.8, 2.0, h), b) == pytest.approx(7.6 / 11.6, abs=1e-12)


def test_rotated_iou_matches_monte_carlo():
    rng = np.random.default_rng(7)
    for _ in range(6):
        a = (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5), rng.uniform(0.5, 2.5), rng.uniform(-3, 3))
        b = (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5), rng.uniform(0.5, 2.5), rng.uniform(-3, 3))
        assert rotated_iou(a, b) == pytest.approx(mc_iou(a, b, seed=int(rng.integers(1 << 30))), abs=5e-3)


@given(boxes, boxes)
def test_rotated_iou_symmetric_and_bounded(a, b):
    v = rotated_iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(rotated_iou(b, a), abs=1e-12)


@given(boxes, boxes, st.tuples(coord, coord, angle))
def test_rotated_iou_rigid_invariant(a, b, t):
    T = Pose2(*t)

    def move(box):
        x, y = T.apply(box[0], box[1])
        return (x, y, box[2], box[3], box[4] + T.yaw)

    assert rotated_iou(move(a), move(b)) == pytest.approx(rotated_iou(a, b), abs=1e-9)


def test_centroid_distance():
    p = DetBox(ClassId.PEDESTRIAN, 0, 0)
    assert centroid_distance(p, Pose2(0, 0)) == 0.0
    assert centroid_distance(p, Pose2(3, 4)) == 5.0
    assert centroid_distance(DetBox(ClassId.PEDESTRIAN, 1, 1), Pose2(1.3, 1.4)) == pytest.approx(0.5)


def test_class_id_labels():
    assert [c.label for c in ClassId] == ["vehicle", "pedestrian", "cyclist"]
    assert ClassId.parse("Cyclist") is ClassId.CYCLIST
