"""Box geometry: wire format, expansion, squarify, IoU."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vischain.boxes import (
    BBox,
    PaddingPlan,
    acc_at_iou,
    expand_box,
    iou,
    mean_iou,
    normalize_box,
    parse_box,
    serialize_box,
    squarify_box,
)
from vischain.errors import BoxParseError, InvalidBoxError


def iou_monte_carlo(a: BBox, b: BBox, n: int = 200_000, seed: int = 0) -> float:
    """Independent IoU estimate: uniform points over the union's bounding rect."""
    rng = np.random.default_rng(seed)
    x0 = min(a.x_min, b.x_min)
    y0 = min(a.y_min, b.y_min)
    x1 = max(a.x_max, b.x_max)
    y1 = max(a.y_max, b.y_max)
    xs = rng.uniform(x0, x1, n)
    ys = rng.uniform(y0, y1, n)

    def inside(box, xs, ys):
        return (xs >= box.x_min) & (xs <= box.x_max) & (ys >= box.y_min) & (ys <= box.y_max)

    in_a = inside(a, xs, ys)
    in_b = inside(b, xs, ys)
    union_hits = (in_a | in_b).sum()
    if union_hits == 0:
        return 0.0
    return (in_a & in_b).sum() / union_hits


def boxes_strategy():
    coord = st.floats(min_value=0.0, max_value=1.0, allow_nan=False, width=64)
    return st.tuples(coord, coord, coord, coord).map(
        lambda t: BBox(min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3]))
    )


# --- wire format -----------------------------------------------------------


def test_serialize_examples():
    assert serialize_box(BBox(0.0, 0.0, 1.0, 1.0)) == "[0.000, 0.000, 1.000, 1.000]"
    assert (
        serialize_box(BBox(0.125, 0.1875, 0.375, 0.3125))
        == "[0.125, 0.188, 0.375, 0.312]"
    )


@pytest.mark.parametrize(
    "value,expected",
    [
        (0.0005, "0.000"),
        (0.0015, "0.002"),
        (0.0025, "0.002"),
        (0.0035, "0.004"),
        (0.9995, "1.000"),
        (0.12349, "0.123"),
        (0.1235, "0.124"),
        (2 / 3, "0.667"),
        (1e-5, "0.000"),
        (1.0, "1.000"),
    ],
)
def test_serialize_rounds_half_to_even(value, expected):
    out = serialize_box(BBox(value, value, value, value))
    assert out == f"[{expected}, {expected}, {expected}, {expected}]"


def test_parse_round_trip_examples():
    b = parse_box("[0.125, 0.188, 0.375, 0.312]")
    assert b.as_tuple() == (0.125, 0.188, 0.375, 0.312)


def test_parse_tolerates_whitespace():
    b = parse_box("  [ 0.1 ,0.2,   0.3 , 0.4 ]  ")
    assert b.as_tuple() == (0.1, 0.2, 0.3, 0.4)


@pytest.mark.parametrize(
    "text,span_fragment",
    [
        ("[0.1, 0.2, 0.3]", "0.1"),
        ("[0.1, 0.2, 0.3, 0.4, 0.5]", "0.1"),
        ("[0.1, abc, 0.3, 0.4]", "abc"),
        ("[0.1, 0.2, 1.5, 0.4]", "1.5"),
        ("[0.1, 0.2, -0.1, 0.4]", "-0.1"),
        ("[0.5, 0.2, 0.3, 0.4]", "0.5"),
        ("0.1, 0.2, 0.3, 0.4", "0.1"),
        ("[nan, 0.2, 0.3, 0.4]", "nan"),
    ],
)
def test_parse_rejects_and_reports_span(text, span_fragment):
    with pytest.raises(BoxParseError) as err:
        parse_box(text)
    assert span_fragment in err.value.span


@given(boxes_strategy())
@settings(max_examples=200)
def test_round_trip_hits_wire_grid(box):
    parsed = parse_box(serialize_box(box))
    for orig, back in zip(box.as_tuple(), parsed.as_tuple()):
        assert abs(orig - back) <= 0.0005 + 1e-12
    # The wire format is a fixed point: one more round trip changes nothing.
    assert serialize_box(parsed) == serialize_box(box)


# --- construction and normalization ---------------------------------------


def test_bbox_validates():
    with pytest.raises(InvalidBoxError):
        BBox(0.5, 0.2, 0.3, 0.4)
    with pytest.raises(InvalidBoxError):
        BBox(-0.1, 0.0, 0.5, 0.5)
    with pytest.raises(InvalidBoxError):
        BBox(0.0, 0.0, 1.1, 0.5)
    assert BBox(0.3, 0.3, 0.3, 0.3).area == 0.0


def test_normalize_box():
    b = normalize_box((8, 12, 24, 20), (64, 64))
    assert b.as_tuple() == (0.125, 0.1875, 0.375, 0.3125)
    full = normalize_box((0, 0, 64, 64), (64, 64))
    assert full.as_tuple() == (0.0, 0.0, 1.0, 1.0)
    with pytest.raises(InvalidBoxError):
        normalize_box((10, 10, 5, 20), (64, 64))
    with pytest.raises(InvalidBoxError):
        normalize_box((0, 0, 65, 64), (64, 64))


# --- expansion -------------------------------------------------------------


def test_expand_examples():
    b = expand_box(BBox(0.4, 0.4, 0.6, 0.6), 0.2)
    assert b.as_tuple() == pytest.approx((0.38, 0.38, 0.62, 0.62), abs=1e-12)
    b = expand_box(BBox(0.0, 0.0, 0.5, 0.5), 0.8)
    assert b.as_tuple() == pytest.approx((0.0, 0.0, 0.7, 0.7), abs=1e-12)


def test_expand_rejects_negative_ratio():
    with pytest.raises(InvalidBoxError):
        expand_box(BBox(0.4, 0.4, 0.6, 0.6), -0.1)


@given(boxes_strategy())
@settings(max_examples=200)
def test_expand_zero_ratio_is_identity(box):
    out = expand_box(box, 0.0)
    assert out.as_tuple() == pytest.approx(box.as_tuple(), abs=1e-12)


@given(boxes_strategy(), st.floats(min_value=0.0, max_value=2.0))
@settings(max_examples=200)
def test_expand_contains_original_and_scales_area(box, ratio):
    out = expand_box(box, ratio)
    assert out.x_min <= box.x_min + 1e-12
    assert out.y_min <= box.y_min + 1e-12
    assert out.x_max >= box.x_max - 1e-12
    assert out.y_max >= box.y_max - 1e-12
    # Away from the border no clipping happens and the area scales exactly.
    cx, cy = box.center
    half_w = box.width * (1 + ratio) / 2
    half_h = box.height * (1 + ratio) / 2
    if 0 <= cx - half_w and cx + half_w <= 1 and 0 <= cy - half_h and cy + half_h <= 1:
        assert out.area == pytest.approx(box.area * (1 + ratio) ** 2, rel=1e-9, abs=1e-12)


# --- squarify --------------------------------------------------------------


def test_squarify_pad_crop_plans_symmetric_padding():
    plan = squarify_box(BBox(0.2, 0.3, 0.6, 0.5), mode="pad-crop")
    assert isinstance(plan, PaddingPlan)
    assert plan.box == BBox(0.2, 0.3, 0.6, 0.5)
    assert plan.side == pytest.approx(0.4)
    assert plan.pad_left == pytest.approx(0.0)
    assert plan.pad_top == pytest.approx(0.1)


def test_squarify_square_context_examples():
    out = squarify_box(BBox(0.2, 0.3, 0.6, 0.5), mode="square-context")
    assert isinstance(out, BBox)
    assert out.as_tuple() == pytest.approx((0.2, 0.2, 0.6, 0.6), abs=1e-12)
    out = squarify_box(BBox(0.0, 0.45, 0.8, 0.55), mode="square-context")
    assert out.as_tuple() == pytest.approx((0.0, 0.1, 0.8, 0.9), abs=1e-12)


def test_squarify_rejects_unknown_mode():
    with pytest.raises(InvalidBoxError):
        squarify_box(BBox(0.2, 0.3, 0.6, 0.5), mode="stretch")


@given(boxes_strategy())
@settings(max_examples=200)
def test_squarify_properties(box):
    plan = squarify_box(box, mode="pad-crop")
    assert plan.side == pytest.approx(max(box.width, box.height), abs=1e-12)
    assert plan.pad_left >= 0 and plan.pad_top >= 0
    # Content plus padding fills the square on each axis.
    assert 2 * plan.pad_left + box.width == pytest.approx(plan.side, abs=1e-12)
    assert 2 * plan.pad_top + box.height == pytest.approx(plan.side, abs=1e-12)

    sq = squarify_box(box, mode="square-context")
    assert sq.x_min <= box.x_min + 1e-12 and sq.x_max >= box.x_max - 1e-12
    assert sq.y_min <= box.y_min + 1e-12 and sq.y_max >= box.y_max - 1e-12
    side = max(box.width, box.height)
    assert sq.width <= side + 1e-12 and sq.height <= side + 1e-12


# --- IoU and accuracy ------------------------------------------------------


def test_iou_quarter_overlap_example():
    a = BBox(0.0, 0.0, 0.5, 0.5)
    b = BBox(0.25, 0.25, 0.75, 0.75)
    expected = 0.0625 / 0.4375  # intersection 0.25^2 over union 2*0.25 - 0.0625
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
    assert iou(a, b) == pytest.approx(iou_monte_carlo(a, b), abs=0.01)


def test_iou_edges():
    a = BBox(0.0, 0.0, 0.5, 0.5)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0.5, 0.5, 1.0, 1.0)) == 0.0  # shared corner only
    assert iou(a, BBox(0.6, 0.6, 1.0, 1.0)) == 0.0
    degenerate = BBox(0.2, 0.2, 0.2, 0.4)
    assert iou(degenerate, degenerate) == 0.0
    assert iou(a, degenerate) == 0.0


@given(boxes_strategy(), boxes_strategy())
@settings(max_examples=200)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if a.area > 0:
        assert iou(a, a) == 1.0


def test_acc_at_iou_and_mean_iou():
    gts = [BBox(0.0, 0.0, 0.5, 0.5), BBox(0.5, 0.5, 1.0, 1.0)]
    preds = [BBox(0.0, 0.0, 0.5, 0.5), None]
    assert acc_at_iou(preds, gts, 0.5) == 0.5
    assert mean_iou(preds, gts) == 0.5
    with pytest.raises(InvalidBoxError):
        acc_at_iou([None], gts, 0.5)
    with pytest.raises(InvalidBoxError):
        acc_at_iou([], [], 0.5)
