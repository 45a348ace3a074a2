"""Axis-aligned box algebra.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)``; width is
``x2 - x1`` with no +1 pixel convention.  Scalar functions work on
:class:`Box` values, the ``*_matrix`` / ``*_array`` kernels work on ``(n, 4)``
float arrays and share the exact same arithmetic so both paths agree bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidBoxError(f"box corners out of order {coords}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise InvalidBoxError(f"expected 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersect(a: Box, b: Box) -> Box | None:
    """Overlap rectangle of ``a`` and ``b``, or ``None`` if it has no area.

    >>> intersect(Box(0, 0, 10, 10), Box(5, 5, 15, 15))
    Box(x1=5, y1=5, x2=10, y2=10)
    >>> intersect(Box(0, 0, 4, 4), Box(5, 5, 9, 9)) is None
    True
    """
    x1 = max(a.x1, b.x1)
    y1 = max(a.y1, b.y1)
    x2 = min(a.x2, b.x2)
    y2 = min(a.y2, b.y2)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def _overlap_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    inter = _overlap_area(a, b)
    union = area(a) + area(b) - inter
    if union <= 0:
        # two zero-area boxes: never a match
        return 0.0
    return inter / union


def enclosing(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box left uncovered."""
    inter = _overlap_area(a, b)
    union = area(a) + area(b) - inter
    hull = area(enclosing(a, b))
    if hull <= 0:
        return 0.0
    base = inter / union if union > 0 else 0.0
    return base - (hull - union) / hull


def diou(a: Box, b: Box) -> float:
    """Distance IoU: IoU minus squared center distance over squared hull diagonal."""
    hull = enclosing(a, b)
    diag2 = hull.width ** 2 + hull.height ** 2
    if diag2 <= 0:
        return 0.0
    (ax, ay), (bx, by) = a.center, b.center
    return iou(a, b) - ((ax - bx) ** 2 + (ay - by) ** 2) / diag2


def alpha_iou(a: Box, b: Box, alpha: float = 3.0) -> float:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return iou(a, b) ** alpha


def union_bounds(boxes: Iterable[Box]) -> Box:
    """Coordinate-wise union: min of the top-left corners, max of the bottom-right."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union_bounds needs at least one box (empty group)")
    return Box(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


# ---------------------------------------------------------------------------
# array kernels

def as_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` arrays, shape ``(n, m)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((w > 0) & (h > 0), w * h, 0.0)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``(n, 4)`` arrays."""
    w = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    h = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.where((w > 0) & (h > 0), w * h, 0.0)
    union = area_array(a) + area_array(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
