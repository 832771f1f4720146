from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflab.geometry import (
    Box,
    correct_at_iou,
    iou,
    iou_exceeds,
    iou_float,
    iou_fraction,
    relation_holds,
)
from oracles import raster_iou


def box(x, y, w, h, id=0):
    return Box(id, x, y, w, h, "ball", "red", "big")


@st.composite
def grid_boxes(draw, grid=100):
    x0 = draw(st.integers(0, grid - 1))
    y0 = draw(st.integers(0, grid - 1))
    w = draw(st.integers(1, grid - x0))
    h = draw(st.integers(1, grid - y0))
    return box(x0 / grid, y0 / grid, w / grid, h / grid)


def test_identical_boxes():
    b = box(0.1, 0.2, 0.3, 0.4)
    assert iou(b, b) == 1.0


def test_disjoint_boxes():
    assert iou(box(0, 0, 0.2, 0.2), box(0.5, 0.5, 0.2, 0.2)) == 0.0


def test_touching_edges_do_not_overlap():
    assert iou(box(0, 0, 0.2, 0.2), box(0.2, 0, 0.2, 0.2)) == 0.0


def test_one_seventh():
    a, b = box(0, 0, 0.2, 0.2), box(0.1, 0.1, 0.2, 0.2)
    assert iou_fraction(a, b) == Fraction(1, 7)
    assert iou(a, b) == pytest.approx(0.142857, abs=1e-6)
    assert not correct_at_iou(a, b, 0.5)


def test_correct_at_iou_basic():
    a = box(0.1, 0.1, 0.4, 0.4)
    assert correct_at_iou(a, a, 0.5)
    assert not correct_at_iou(a, box(0.6, 0.6, 0.3, 0.3), 0.5)


def test_correct_at_iou_is_strict():
    # IoU exactly 1/2: a 0.2x0.2 box against the 0.2x0.4 box containing it
    a, b = box(0, 0, 0.2, 0.2), box(0, 0, 0.2, 0.4)
    assert iou_fraction(a, b) == Fraction(1, 2)
    assert not correct_at_iou(a, b, 0.5)
    assert correct_at_iou(a, b, 0.49)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(t):
    a = box(0, 0, 0.2, 0.2)
    with pytest.raises(ValueError):
        correct_at_iou(a, a, t)


@pytest.mark.parametrize(
    "args",
    [(0, 0, 0, 0.1), (0, 0, 0.1, -0.1), (-0.1, 0, 0.1, 0.1), (0.95, 0, 0.1, 0.1), (0, 0.5, 0.1, 0.6)],
)
def test_invalid_boxes(args):
    with pytest.raises(ValueError):
        box(*args)


@settings(max_examples=300, deadline=None)
@given(grid_boxes(), grid_boxes())
def test_matches_rasterization(a, b):
    assert iou_fraction(a, b) == raster_iou(a, b)


@settings(max_examples=300, deadline=None)
@given(grid_boxes(), grid_boxes())
def test_symmetry_and_bounds(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == a.same_extent(b)


@settings(max_examples=300, deadline=None)
@given(grid_boxes(grid=1000), grid_boxes(grid=1000), st.sampled_from([0.3, 0.5, 0.7]))
def test_float_path_agrees_with_exact(a, b, t):
    assert iou_exceeds(a, b, t) == (iou_fraction(a, b) > Fraction(str(t)))
    assert iou_float(a, b) == pytest.approx(iou(a, b), abs=1e-12)


def test_relation_examples():
    s, o = box(0.15, 0.4, 0.1, 0.1), box(0.75, 0.4, 0.1, 0.1)  # centers 0.2, 0.8
    assert relation_holds("left_of", s, o, 0.05)
    assert relation_holds("right_of", o, s, 0.05)
    assert not relation_holds("left_of", s, o, 0.05, negated=True)
    for rel in ("left_of", "right_of", "above", "below"):
        assert not relation_holds(rel, s, s, 0.05)
    near = box(0.47, 0.4, 0.1, 0.1)  # center 0.52
    mid = box(0.45, 0.4, 0.1, 0.1)  # center 0.50
    assert not relation_holds("left_of", mid, near, 0.05)


def test_above_means_smaller_y():
    top, bottom = box(0.4, 0.1, 0.1, 0.1), box(0.4, 0.7, 0.1, 0.1)
    assert relation_holds("above", top, bottom)
    assert relation_holds("below", bottom, top)
    assert not relation_holds("above", bottom, top)


def test_relation_errors():
    a = box(0, 0, 0.1, 0.1)
    with pytest.raises(ValueError):
        relation_holds("behind", a, a)
    with pytest.raises(ValueError):
        relation_holds("left_of", a, a, margin=-0.1)


@settings(max_examples=300, deadline=None)
@given(grid_boxes(), grid_boxes(), st.sampled_from(["left_of", "right_of", "above", "below"]),
       st.floats(0, 0.2))
def test_antisymmetry(a, b, rel, margin):
    if relation_holds(rel, a, b, margin):
        assert not relation_holds(rel, b, a, margin)
