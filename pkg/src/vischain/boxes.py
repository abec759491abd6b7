"""Axis-aligned box geometry in normalized image coordinates.

Boxes are ``(x_min, y_min, x_max, y_max)`` with every coordinate in
``[0, 1]``; ``x`` grows rightward and ``y`` downward. Zero-width or
zero-height boxes are valid (and have zero area). The wire format used
in conversations is ``"[x_min, y_min, x_max, y_max]"`` with each
coordinate printed to exactly three decimals, ties rounded to even.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

from .errors import BoxParseError, InvalidBoxError

__all__ = [
    "BBox",
    "PaddingPlan",
    "normalize_box",
    "serialize_box",
    "parse_box",
    "expand_box",
    "squarify_box",
    "iou",
    "acc_at_iou",
    "mean_iou",
]


@dataclass(frozen=True)
class BBox:
    """Normalized axis-aligned box. Validates on construction."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name, v in zip(("x_min", "y_min", "x_max", "y_max"), self.as_tuple()):
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise InvalidBoxError(f"{name} is not a finite number: {v!r}")
            if not 0.0 <= v <= 1.0:
                raise InvalidBoxError(f"{name}={v} outside [0, 1]")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidBoxError(
                f"inverted box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)


@dataclass(frozen=True)
class PaddingPlan:
    """A crop region plus the symmetric zero-padding that squares it.

    ``box`` is the region to crop from the source image; the padded
    square has side ``side = max(box.width, box.height)`` in normalized
    units, with the cropped content centered: ``pad_left``/``pad_top``
    give the offset of the content inside the square.
    """

    box: BBox
    side: float
    pad_left: float
    pad_top: float


def normalize_box(
    rect: tuple[float, float, float, float], image_size: tuple[int, int]
) -> BBox:
    """Convert a pixel-space rectangle to a normalized box.

    ``rect`` is ``(x_min, y_min, x_max, y_max)`` in pixels with the max
    edges exclusive (so ``(0, 0, W, H)`` covers the whole image);
    ``image_size`` is ``(width, height)``.
    """
    width, height = image_size
    if width <= 0 or height <= 0:
        raise InvalidBoxError(f"non-positive image size: {image_size}")
    x0, y0, x1, y1 = rect
    if x0 > x1 or y0 > y1:
        raise InvalidBoxError(f"inverted pixel rect: {rect}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise InvalidBoxError(f"pixel rect {rect} outside {width}x{height} image")
    return BBox(x0 / width, y0 / height, x1 / width, y1 / height)


def _round3_decimal(x: float) -> str:
    d = Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN)
    return f"{d:.3f}"


def _round3(x: float) -> str:
    """Format to 3 decimals, rounding the shortest decimal repr half-to-even.

    Rounding the decimal digits rather than the binary double means a
    literal like ``0.0005`` behaves as the tie it looks like (-> "0.000")
    instead of the slightly-above-tie binary value it is stored as.
    """
    s = repr(float(x))
    if "e" in s or "E" in s:
        # Only tiny magnitudes (< 1e-4) print in exponent form for values
        # in [0, 1]; handle them through Decimal for generality.
        return _round3_decimal(x)
    int_part, _, frac = s.partition(".")
    if len(frac) <= 3:
        return f"{int_part}.{frac.ljust(3, '0')}"
    kept, rest = frac[:3], frac[3:]
    if rest[0] > "5":
        up = True
    elif rest[0] < "5":
        up = False
    else:
        exactly_half = rest[1:].strip("0") == ""
        up = (int(kept[-1]) % 2 == 1) if exactly_half else True
    if up:
        carry = int(kept) + 1
        if carry == 1000:
            return f"{int(int_part) + 1}.000"
        kept = f"{carry:03d}"
    return f"{int_part}.{kept}"


def serialize_box(box: BBox) -> str:
    """Render a box in the wire format: ``[x_min, y_min, x_max, y_max]``."""
    if not isinstance(box, BBox):
        box = BBox(*box)
    x0, y0, x1, y1 = box.as_tuple()
    return f"[{_round3(x0)}, {_round3(y0)}, {_round3(x1)}, {_round3(y1)}]"


def parse_box(text: str) -> BBox:
    """Parse the wire format back into a box.

    Tolerates arbitrary whitespace around brackets, commas, and numbers.
    Raises :class:`BoxParseError` carrying the offending span on wrong
    arity, non-numeric fields, out-of-range values, or inverted boxes.
    """
    s = text.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise BoxParseError("box text is not bracketed", text)
    inner = s[1:-1]
    parts = inner.split(",")
    if len(parts) != 4:
        raise BoxParseError(f"expected 4 coordinates, got {len(parts)}", inner.strip())
    values = []
    for part in parts:
        token = part.strip()
        try:
            v = float(token)
        except ValueError:
            raise BoxParseError("non-numeric coordinate", token) from None
        if not math.isfinite(v) or not 0.0 <= v <= 1.0:
            raise BoxParseError("coordinate outside [0, 1]", token)
        values.append(v)
    x0, y0, x1, y1 = values
    if x0 > x1 or y0 > y1:
        raise BoxParseError("inverted box", inner.strip())
    return BBox(x0, y0, x1, y1)


def expand_box(box: BBox, ratio: float) -> BBox:
    """Grow a box about its center, scaling each side by ``1 + ratio``.

    The result is clipped to the unit square, so boxes near the border
    expand less (or not at all) on the clipped sides.
    """
    if ratio < 0:
        raise InvalidBoxError(f"negative expansion ratio: {ratio}")
    cx, cy = box.center
    half_w = box.width * (1.0 + ratio) / 2.0
    half_h = box.height * (1.0 + ratio) / 2.0
    return BBox(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(1.0, cx + half_w),
        min(1.0, cy + half_h),
    )


def squarify_box(box: BBox, mode: str = "pad-crop") -> PaddingPlan | BBox:
    """Square a region ahead of re-encoding.

    ``"pad-crop"`` keeps the crop as-is and plans symmetric zero padding
    of the shorter axis up to ``max(width, height)``, returning a
    :class:`PaddingPlan`. ``"square-context"`` instead widens the box
    itself to a square about its center (pulling in real surrounding
    pixels), clipped to the unit square, returning a :class:`BBox`.
    """
    if mode == "pad-crop":
        side = max(box.width, box.height)
        return PaddingPlan(
            box=box,
            side=side,
            pad_left=(side - box.width) / 2.0,
            pad_top=(side - box.height) / 2.0,
        )
    if mode == "square-context":
        side = max(box.width, box.height)
        cx, cy = box.center
        half = side / 2.0
        return BBox(
            max(0.0, cx - half),
            max(0.0, cy - half),
            min(1.0, cx + half),
            min(1.0, cy + half),
        )
    raise InvalidBoxError(f"unknown squarify mode: {mode!r}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union. Zero-area operands yield 0.0."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def acc_at_iou(
    predictions: list[BBox | None], targets: list[BBox], threshold: float = 0.5
) -> float:
    """Fraction of predictions whose IoU with the paired target meets the threshold.

    ``None`` predictions (grounding failures) count as misses.
    """
    if len(predictions) != len(targets):
        raise InvalidBoxError(
            f"length mismatch: {len(predictions)} predictions vs {len(targets)} targets"
        )
    if not targets:
        raise InvalidBoxError("empty evaluation set")
    hits = sum(
        1 for p, t in zip(predictions, targets) if p is not None and iou(p, t) >= threshold
    )
    return hits / len(targets)


def mean_iou(predictions: list[BBox | None], targets: list[BBox]) -> float:
    """Mean IoU over pairs; ``None`` predictions contribute 0."""
    if len(predictions) != len(targets):
        raise InvalidBoxError(
            f"length mismatch: {len(predictions)} predictions vs {len(targets)} targets"
        )
    if not targets:
        raise InvalidBoxError("empty evaluation set")
    total = sum(0.0 if p is None else iou(p, t) for p, t in zip(predictions, targets))
    return total / len(targets)
