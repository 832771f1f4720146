"""Axis-aligned boxes in normalized image coordinates.

Coordinates live in [0, 1] with y growing downward, so "above" means a
smaller center y. IoU is computed in exact rational arithmetic on the
shortest decimal representation of each coordinate; for boxes placed on a
decimal grid this makes the closed form agree with cell counting exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

RELATIONS = ("left_of", "right_of", "above", "below")
INVERSE_RELATION = {
    "left_of": "right_of",
    "right_of": "left_of",
    "above": "below",
    "below": "above",
}
DEFAULT_MARGIN = 0.05
DEFAULT_IOU_THRESHOLD = 0.5

# float IoU is trusted when it sits farther than this from a decision threshold
_FLOAT_GUARD = 1e-9


@dataclass(frozen=True)
class Box:
    id: int
    x: float
    y: float
    w: float
    h: float
    category: str
    color: str
    size: str

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box {self.id}: width and height must be positive")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box {self.id}: negative origin")
        right = _q(self.x) + _q(self.w)
        bottom = _q(self.y) + _q(self.h)
        if right > 1 or bottom > 1:
            raise ValueError(f"box {self.id}: extends past the image")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def same_extent(self, other: "Box") -> bool:
        return (self.x, self.y, self.w, self.h) == (other.x, other.y, other.w, other.h)


@lru_cache(maxsize=1 << 16)
def _q(v: float) -> Fraction:
    return Fraction(repr(float(v)))


def _extent(b: Box) -> tuple[Fraction, Fraction, Fraction, Fraction]:
    x0, y0 = _q(b.x), _q(b.y)
    return x0, y0, x0 + _q(b.w), y0 + _q(b.h)


def iou_fraction(a: Box, b: Box) -> Fraction:
    """Exact IoU as a :class:`~fractions.Fraction`."""
    if a.same_extent(b):
        return Fraction(1)
    ax0, ay0, ax1, ay1 = _extent(a)
    bx0, by0, bx1, by1 = _extent(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    return float(iou_fraction(a, b))


def iou_float(a: Box, b: Box) -> float:
    """Plain floating-point IoU; accurate to a few ulps, used for screening."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_exceeds(a: Box, b: Box, threshold: float) -> bool:
    """``iou(a, b) > threshold``, falling back to exact arithmetic near the threshold."""
    if a.same_extent(b):
        return 1.0 > threshold
    approx = iou_float(a, b)
    if abs(approx - threshold) > _FLOAT_GUARD:
        return approx > threshold
    return iou_fraction(a, b) > _q(threshold)


def correct_at_iou(pred: Box, gold: Box, threshold: float = DEFAULT_IOU_THRESHOLD) -> bool:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return iou_exceeds(pred, gold, threshold)


def relation_holds(
    rel: str,
    subject: Box,
    obj: Box,
    margin: float = DEFAULT_MARGIN,
    negated: bool = False,
) -> bool:
    """Spatial relation between box centers, with a dead band of ``margin``.

    ``negated=True`` returns the boolean complement.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if rel == "left_of":
        holds = subject.cx < obj.cx - margin
    elif rel == "right_of":
        holds = subject.cx > obj.cx + margin
    elif rel == "above":
        holds = subject.cy < obj.cy - margin
    elif rel == "below":
        holds = subject.cy > obj.cy + margin
    else:
        raise ValueError(f"unknown relation {rel!r}")
    return holds != negated
