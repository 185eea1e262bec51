import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motforecast.core import (ZERO_BOX, BoundingBox, FrameObservations, center_distance_normalized,
                              cosine_distance, iou, iou_distance, velocities_from_boxes)

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 200, allow_nan=False)
boxes = st.builds(BoundingBox, coord, coord, size, size)


def test_iou_examples():
    assert iou((5, 5, 2, 2), (5, 5, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_degenerate_box_is_zero():
    assert iou(ZERO_BOX, ZERO_BOX) == 0.0
    assert iou((0, 0, 2, 2), (0, 0, 0, 2)) == 0.0
    assert iou((0, 0, -1, 2), (0, 0, 2, 2)) == 0.0


def test_iou_distance_examples():
    np.testing.assert_array_equal(iou_distance([(1, 1, 2, 2)], [(1, 1, 2, 2)]), [[0.0]])
    np.testing.assert_array_equal(iou_distance([(0, 0, 2, 2)], [(10, 10, 2, 2)]), [[1.0]])
    np.testing.assert_allclose(iou_distance([(0, 0, 2, 2)], [(1, 0, 2, 2)]), [[2 / 3]], atol=1e-15)
    assert iou_distance([], []).shape == (0, 0)
    assert iou_distance([(0, 0, 1, 1)], []).shape == (1, 0)


def test_cosine_examples():
    e = np.array([[1.0, 0.0]])
    assert cosine_distance(e, e)[0, 0] == 0.0
    assert cosine_distance(e, -e)[0, 0] == 2.0
    assert cosine_distance(e, [[0.0, 1.0]])[0, 0] == pytest.approx(1.0)


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine_distance([[1.0, 0.0]], [[1.0, 0.0, 0.0]])


def test_velocity_examples():
    assert velocities_from_boxes([(0, 0, 2, 2), (1, 1, 2, 2)]) == [(0, 0, 0, 0), (1, 1, 0, 0)]
    assert velocities_from_boxes([(3, 4, 2, 2)]) == [(0, 0, 0, 0)]
    assert velocities_from_boxes([(0, 0, 2, 2), (0, 0, 2, 2)]) == [(0, 0, 0, 0)] * 2
    assert velocities_from_boxes([]) == []


def test_center_distance_examples():
    assert center_distance_normalized((50, 30, 4, 4), 100, 60) == 0.0
    assert center_distance_normalized((0, 0, 4, 4), 100, 100) == pytest.approx(1.0)
    assert center_distance_normalized((75, 50, 4, 4), 100, 100) == pytest.approx(25 / (50 * math.sqrt(2)))
    # clamped outside the frame
    assert center_distance_normalized((-500, -500, 4, 4), 100, 100) == 1.0


def test_tlwh_round_trip():
    b = BoundingBox(10.5, 20.25, 4.0, 8.0)
    assert BoundingBox.from_tlwh(*b.to_tlwh()) == b


def test_frame_observations_normalizes_and_checks_lengths():
    obs = FrameObservations(1, [(0, 0, 2, 2)], [0.9], np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(np.linalg.norm(obs.embeddings, axis=1), 1.0)
    with pytest.raises(ValueError):
        FrameObservations(1, [(0, 0, 2, 2)], [0.9, 0.8], np.zeros((1, 2)) + 1)


@settings(max_examples=300)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


@settings(max_examples=200)
@given(st.lists(boxes, min_size=1, max_size=20))
def test_velocity_inverse(seq):
    vel = np.array(velocities_from_boxes(seq))
    rebuilt = np.asarray(seq[0]) + np.cumsum(vel, axis=0)
    np.testing.assert_allclose(rebuilt, np.asarray(seq), rtol=0, atol=1e-9)


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 5))
    b = rng.standard_normal((4, 5))
    d = cosine_distance(a, b)
    np.testing.assert_allclose(cosine_distance(a * scale, b), d, atol=1e-12)
    np.testing.assert_allclose(np.diag(cosine_distance(a, a)), 0.0, atol=1e-12)
    assert (d >= 0).all() and (d <= 2).all()
