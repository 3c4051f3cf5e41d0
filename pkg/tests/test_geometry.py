import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergetrain.geometry import (
    AnchorSpec,
    Box,
    GeometryError,
    GridCell,
    RelBox,
    clip,
    containing_cell,
    decode_to_image,
    encode_from_image,
    from_corners,
    iou,
    iou_matrix,
    max_iou,
)

from oracles import naive_iou, raster_iou


def corner_box(x0, y0, x1, y1, canvas):
    return from_corners(x0 / canvas, y0 / canvas, x1 / canvas, y1 / canvas)


def test_iou_self_and_disjoint():
    b = Box(0.4, 0.4, 0.2, 0.3)
    assert iou(b, b) == 1.0
    assert iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_iou_pixel_example():
    # (0,0,2,2) and (1,1,3,3) on a 4x4 canvas share one pixel out of seven
    assert iou(corner_box(0, 0, 2, 2, 4), corner_box(1, 1, 3, 3, 4)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_matches_raster_oracle_exactly(rng):
    canvas = 32
    for _ in range(1000):
        x0, x1 = sorted(rng.choice(canvas + 1, 2, replace=False))
        y0, y1 = sorted(rng.choice(canvas + 1, 2, replace=False))
        u0, u1 = sorted(rng.choice(canvas + 1, 2, replace=False))
        v0, v1 = sorted(rng.choice(canvas + 1, 2, replace=False))
        a, b = (x0, y0, x1, y1), (u0, v0, u1, v1)
        got = iou(corner_box(*a, canvas), corner_box(*b, canvas))
        # exact up to the float rounding of the normalized corners
        assert got == pytest.approx(raster_iou(a, b, canvas), abs=1e-12)


def test_iou_rejects_degenerate():
    with pytest.raises(GeometryError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(GeometryError):
        Box(0.5, 0.5, 0.1, -0.1)


boxes = st.builds(
    Box,
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(1e-3, 1),
    st.floats(1e-3, 1),
)


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert v == pytest.approx(naive_iou(a.as_tuple(), b.as_tuple()), abs=1e-12)


def test_iou_matrix_agrees_with_scalar(rng):
    a = np.column_stack([rng.uniform(0, 1, (20, 2)), rng.uniform(0.01, 0.5, (20, 2))])
    b = np.column_stack([rng.uniform(0, 1, (15, 2)), rng.uniform(0.01, 0.5, (15, 2))])
    m = iou_matrix(a, b)
    for i in range(20):
        for j in range(15):
            assert m[i, j] == pytest.approx(iou(Box(*a[i]), Box(*b[j])), abs=1e-12)


def test_max_iou():
    assert max_iou(Box(0.5, 0.5, 0.2, 0.2), []) == (0.0, None)
    b = Box(0.5, 0.5, 0.2, 0.2)
    assert max_iou(b, [b]) == (1.0, 0)


def test_max_iou_picks_largest():
    # widths chosen so the pairwise IoUs against a 0.2 x 0.2 box are 0.1, 0.6 and 0.3
    b = Box(0.5, 0.5, 0.2, 0.2)
    refs = [Box(0.5, 0.5, 0.2, 0.02), Box(0.5, 0.5, 0.2, 0.12), Box(0.5, 0.5, 0.2, 0.06)]
    v, k = max_iou(b, refs)
    assert k == 1 and v == pytest.approx(0.6)


def test_decode_examples():
    cell, anchor = GridCell(2, 1, 4), AnchorSpec(0, 0.1, 0.2)
    assert decode_to_image(RelBox(0, 0, 0, 0), cell, anchor) == Box(0.25, 0.5, 0.1, 0.2)
    assert decode_to_image(RelBox(0.1, 0.0, 0.0, 0.0), cell, anchor).cx == pytest.approx(0.35)
    assert decode_to_image(RelBox(0, 0, math.log(2), 0), cell, anchor).w == pytest.approx(0.2)


def test_decode_rejects_nonfinite():
    with pytest.raises(GeometryError):
        decode_to_image(RelBox(0, 0, float("inf"), 0), GridCell(0, 0, 4), AnchorSpec(0, 0.1, 0.1))


def test_encode_examples():
    cell, anchor = GridCell(1, 2, 4), AnchorSpec(0, 0.1, 0.2)
    rel = encode_from_image(Box(0.5, 0.25, 0.1, 0.2), cell, anchor)
    assert rel == RelBox(0.0, 0.0, 0.0, 0.0)
    assert encode_from_image(Box(0.55, 0.3, 0.2, 0.2), cell, anchor).w == pytest.approx(math.log(2))
    with pytest.raises(GeometryError):
        encode_from_image(Box(0.9, 0.9, 0.1, 0.1), cell, anchor)


def test_encode_decode_roundtrip(rng):
    worst = 0.0
    for _ in range(1000):
        g = int(rng.integers(2, 16))
        box = Box(*rng.uniform(0, 1, 2), *rng.uniform(0.01, 1, 2))
        cell = containing_cell(box, g)
        anchor = AnchorSpec(0, *rng.uniform(0.01, 1, 2))
        back = decode_to_image(encode_from_image(box, cell, anchor), cell, anchor)
        worst = max(worst, max(abs(x - y) for x, y in zip(back.as_tuple(), box.as_tuple())))
    assert worst < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3))
def test_decode_width_monotone(w_hat, step):
    cell, anchor = GridCell(0, 0, 4), AnchorSpec(0, 0.1, 0.1)
    lo = decode_to_image(RelBox(0, 0, w_hat, 0), cell, anchor).w
    hi = decode_to_image(RelBox(0, 0, w_hat + step, 0), cell, anchor).w
    assert hi > lo


def test_clip():
    inner = Box(0.5, 0.5, 0.2, 0.2)
    assert clip(inner) == inner
    c = clip(Box(1.0, 0.5, 0.4, 0.2))  # right edge at 1.2
    assert c.corners()[2] == pytest.approx(1.0)
    assert c.w == pytest.approx(0.2) and c.cx == pytest.approx(0.9)
    # a valid Box always has its center inside; force one outside to reach the error path
    outside = Box(0.5, 0.5, 0.1, 0.1)
    object.__setattr__(outside, "cx", 1.5)
    with pytest.raises(GeometryError):
        clip(outside)
