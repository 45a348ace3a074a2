"""Regression targets and the losses evaluated on them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .boxes import Box, alpha_iou, diou, giou, intersect, iou

DEFAULT_PART_MIN_IOU = 0.1


class TargetMode(Enum):
    FULL_GROUND_TRUTH = "full"
    INTERSECTION = "intersection"
    QUADRANT_PART = "quadrant"


class IoUVariant(Enum):
    NONE = "none"
    IOU = "iou"
    GIOU = "giou"
    DIOU = "diou"
    ALPHA_IOU = "alpha-iou"


@dataclass(frozen=True)
class RegressionTarget:
    target_box: Box
    mode: TargetMode
    part_index: int | None = None


@dataclass(frozen=True)
class LossSpec:
    exponent_t: int = 1
    lam: float = 0.5
    iou_variant: IoUVariant = IoUVariant.NONE
    alpha: float = 3.0

    def __post_init__(self):
        if self.exponent_t not in (1, 2):
            raise ValueError(f"exponent_t must be 1 or 2, got {self.exponent_t}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")


def full_target(proposal: Box, gt: Box) -> RegressionTarget:
    return RegressionTarget(gt, TargetMode.FULL_GROUND_TRUTH)


def intersection_target(proposal: Box, gt: Box) -> RegressionTarget | None:
    """The visible part of ``gt`` inside ``proposal``; ``None`` leaves the proposal unassigned."""
    inter = intersect(proposal, gt)
    if inter is None:
        return None
    return RegressionTarget(inter, TargetMode.INTERSECTION)


def quadrant_partition(gt: Box) -> tuple[Box, Box, Box, Box]:
    """Split ``gt`` at its center into top-left, top-right, bottom-left, bottom-right."""
    if gt.width <= 0 or gt.height <= 0:
        raise ValueError(f"cannot partition degenerate box {gt}")
    cx, cy = gt.center
    return (
        Box(gt.x1, gt.y1, cx, cy),
        Box(cx, gt.y1, gt.x2, cy),
        Box(gt.x1, cy, cx, gt.y2),
        Box(cx, cy, gt.x2, gt.y2),
    )


def assign_to_part(proposal: Box, parts: Sequence[Box]) -> int:
    """Index of the part overlapping ``proposal`` best; ties go to the lowest index."""
    if not parts:
        raise ValueError("assign_to_part needs at least one part")
    best, best_iou = 0, -1.0
    for i, part in enumerate(parts):
        v = iou(proposal, part)
        if v > best_iou:
            best, best_iou = i, v
    return best


def part_target(proposal: Box, gt: Box,
                min_iou: float = DEFAULT_PART_MIN_IOU) -> RegressionTarget | None:
    """Quadrant target for query/grid style assignment, or ``None`` below ``min_iou``."""
    parts = quadrant_partition(gt)
    idx = assign_to_part(proposal, parts)
    if iou(proposal, parts[idx]) < min_iou:
        return None
    return RegressionTarget(parts[idx], TargetMode.QUADRANT_PART, idx)


def intersection_loss(pred: Box, target: Box, spec: LossSpec = LossSpec()) -> float:
    t = spec.exponent_t
    return sum(abs(p - g) ** t for p, g in zip(pred.as_tuple(), target.as_tuple()))


def _xywh(b: Box) -> tuple[float, float, float, float]:
    cx, cy = b.center
    return cx, cy, b.width, b.height


def refinement_loss(refined: Sequence[Box], gts: Sequence[Box],
                    spec: LossSpec = LossSpec()) -> float:
    """Summed absolute error in center/size coordinates over already paired boxes."""
    if len(refined) != len(gts):
        raise ValueError(f"length mismatch: {len(refined)} refined boxes vs {len(gts)} targets")
    total = 0.0
    for r, g in zip(refined, gts):
        total += sum(abs(a - b) for a, b in zip(_xywh(r), _xywh(g)))
    return total


def total_loss(l_int: float, l_ref: float, spec: LossSpec = LossSpec()) -> float:
    return l_int + spec.lam * l_ref


_VARIANTS = {
    IoUVariant.IOU: iou,
    IoUVariant.GIOU: giou,
    IoUVariant.DIOU: diou,
}


def iou_regression_loss(pred: Box, target: Box, variant: IoUVariant,
                        alpha: float = 3.0) -> float:
    if variant is IoUVariant.ALPHA_IOU:
        return 1.0 - alpha_iou(pred, target, alpha)
    if variant not in _VARIANTS:
        raise ValueError(f"no IoU loss for variant {variant}")
    return 1.0 - _VARIANTS[variant](pred, target)


def regression_loss(pred: Box, target: Box, spec: LossSpec = LossSpec()) -> float:
    """Per-box regression loss: the coordinate Lt sum, or an IoU-family loss if configured."""
    if spec.iou_variant is IoUVariant.NONE:
        return intersection_loss(pred, target, spec)
    return iou_regression_loss(pred, target, spec.iou_variant, spec.alpha)

