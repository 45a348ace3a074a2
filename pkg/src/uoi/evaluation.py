"""Detection metrics: COCO-style AP, LRP, localization mIoU and classification accuracy.

Matching is greedy by descending detection score (ties to the lower
detection index); each detection takes the unmatched ground truth of highest
IoU (ties to the lower ground-truth index) when that IoU reaches the
threshold.  AP uses 101-point interpolation averaged over classes that have
ground truth.  LRP follows the optimal-threshold convention: every class is
scored at the confidence cut minimizing its LRP, then classes are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import Box, area_array, as_array, iou_matrix
from .grouping import Detection

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32.0 ** 2
LARGE_AREA = 96.0 ** 2
SIZE_RANGES = {
    "S": (0.0, SMALL_AREA),
    "M": (SMALL_AREA, LARGE_AREA),
    "L": (LARGE_AREA, math.inf),
}


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    class_id: int = 0
    image_id: int = 0
    instance_id: int = 0


@dataclass(frozen=True)
class MatchResult:
    tp_pairs: tuple[tuple[int, int, float], ...]
    fp_indices: tuple[int, ...]
    fn_gt_indices: tuple[int, ...]


@dataclass
class MetricReport:
    map: float
    ap_at: dict[float, float]
    ap_size: dict[str, float]
    lrp: float
    lrp_loc: float
    lrp_fp: float
    lrp_fn: float
    loc_miou: float
    cls_acc: float
    flags: tuple[str, ...] = ()

    @property
    def ap50(self) -> float:
        return self.ap_at[0.5]

    @property
    def ap75(self) -> float:
        return self.ap_at[0.75]

    def as_dict(self) -> dict[str, float]:
        return {
            "map": self.map,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "aps": self.ap_size["S"],
            "apm": self.ap_size["M"],
            "apl": self.ap_size["L"],
            "lrp": self.lrp,
            "lrp_loc": self.lrp_loc,
            "lrp_fp": self.lrp_fp,
            "lrp_fn": self.lrp_fn,
            "loc_miou": self.loc_miou,
            "cls_acc": self.cls_acc,
        }


@dataclass
class ImageArrays:
    """Detections and ground truth of one image as flat arrays."""

    det_boxes: np.ndarray
    det_scores: np.ndarray
    det_classes: np.ndarray
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    det_ids: np.ndarray = field(default=None)
    gt_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.det_boxes = np.asarray(self.det_boxes, dtype=np.float64).reshape(-1, 4)
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        self.det_classes = np.asarray(self.det_classes, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        if self.det_ids is None:
            self.det_ids = np.arange(len(self.det_scores))
        if self.gt_ids is None:
            self.gt_ids = np.arange(len(self.gt_classes))


def group_images(dets: Sequence[Detection], gts: Sequence[GroundTruthBox]) -> list[ImageArrays]:
    by_image: dict[int, tuple[list[int], list[int]]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, ([], []))[0].append(i)
    for i, g in enumerate(gts):
        by_image.setdefault(g.image_id, ([], []))[1].append(i)
    images = []
    for _, (di, gi) in sorted(by_image.items()):
        images.append(ImageArrays(
            as_array(dets[i].box for i in di),
            [dets[i].score for i in di],
            [dets[i].class_id for i in di],
            as_array(gts[i].box for i in gi),
            [gts[i].class_id for i in gi],
            np.array(di, dtype=np.int64),
            np.array(gi, dtype=np.int64),
        ))
    return images


# ---------------------------------------------------------------------------
# matching

def _det_order(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), -scores))


def _match_block(ious: np.ndarray, taus: np.ndarray, gt_ignore: np.ndarray | None = None):
    """Greedy matching of score-sorted detections for several thresholds at once.

    ``ious`` is ``(d, g)`` with rows already in score order, ``taus`` has one
    entry per matching row.  Unignored ground truth is preferred over ignored
    ground truth.  Returns ``(det_gt, det_iou)``, both ``(len(taus), d)``,
    where ``det_gt`` is -1 for unmatched detections.
    """
    n_rows = len(taus)
    d, g = ious.shape
    det_gt = np.full((n_rows, d), -1, dtype=np.int64)
    det_iou = np.zeros((n_rows, d))
    if d == 0 or g == 0:
        return det_gt, det_iou
    bonus = np.zeros((n_rows, g)) if gt_ignore is None else 2.0 * (~gt_ignore)
    matched = np.zeros((n_rows, g), dtype=bool)
    rows = np.arange(n_rows)
    for i in range(d):
        row = ious[i]
        valid = ~matched & (row[None, :] >= taus[:, None])
        key = np.where(valid, row[None, :] + bonus, -1.0)
        j = key.argmax(axis=1)
        ok = key[rows, j] >= 0
        det_gt[ok, i] = j[ok]
        det_iou[ok, i] = row[j[ok]]
        matched[rows[ok], j[ok]] = True
    return det_gt, det_iou


def _blocks(images: Sequence[ImageArrays], class_agnostic: bool = False):
    """Yield ``(image_pos, class_id, det_idx, gt_idx, ious)`` with dets in score order."""
    for pos, im in enumerate(images):
        order = _det_order(im.det_scores)
        if class_agnostic:
            classes = [None]
        else:
            classes = np.union1d(im.det_classes, im.gt_classes)
        for c in classes:
            if c is None:
                di, gi = order, np.arange(len(im.gt_classes))
            else:
                di = order[im.det_classes[order] == c]
                gi = np.flatnonzero(im.gt_classes == c)
            ious = iou_matrix(im.det_boxes[di], im.gt_boxes[gi])
            yield pos, c, di, gi, ious


def match_images(images: Sequence[ImageArrays], tau: float,
                 class_agnostic: bool = False) -> MatchResult:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    tp, fp, fn = [], [], []
    for pos, _, di, gi, ious in _blocks(images, class_agnostic):
        im = images[pos]
        det_gt, det_iou = _match_block(ious, np.array([tau]))
        hit = np.zeros(len(gi), dtype=bool)
        for r, j in enumerate(det_gt[0]):
            if j >= 0:
                tp.append((int(im.det_ids[di[r]]), int(im.gt_ids[gi[j]]), float(det_iou[0, r])))
                hit[j] = True
            else:
                fp.append(int(im.det_ids[di[r]]))
        fn.extend(int(im.gt_ids[gi[j]]) for j in np.flatnonzero(~hit))
    return MatchResult(tuple(sorted(tp)), tuple(sorted(fp)), tuple(sorted(fn)))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], tau: float,
                     class_agnostic: bool = False) -> MatchResult:
    """Match detections to same-image (and, by default, same-class) ground truth."""
    return match_images(group_images(dets, gts), tau, class_agnostic)


# ---------------------------------------------------------------------------
# average precision

def ap_from_ranked(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags of score-ranked detections."""
    if n_gt == 0:
        return math.nan
    tp = np.asarray(tp, dtype=bool)
    if len(tp) == 0:
        return 0.0
    tpc = np.cumsum(tp)
    fpc = np.cumsum(~tp)
    recall = tpc / n_gt
    precision = tpc / (tpc + fpc)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    ok = idx < len(recall)
    return float(np.where(ok, envelope[np.minimum(idx, len(recall) - 1)], 0.0).mean())


def _nanmean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


class _ClassTable:
    """Per-class matching outcomes across images for a stack of (threshold, size) rows."""

    def __init__(self, n_rows: int):
        self.n_rows = n_rows
        self.keys: list[np.ndarray] = []
        self.tp: list[np.ndarray] = []
        self.ignored: list[np.ndarray] = []
        self.ious: list[np.ndarray] = []
        self.n_gt = np.zeros(n_rows, dtype=np.int64)

    def add(self, keys, tp, ignored, ious, n_gt):
        self.keys.append(keys)
        self.tp.append(tp)
        self.ignored.append(ignored)
        self.ious.append(ious)
        self.n_gt += n_gt

    def ranked(self):
        """Concatenate and sort by (-score, image position, detection index)."""
        if not self.keys:
            empty = np.zeros((self.n_rows, 0), dtype=bool)
            return np.zeros(0), empty, empty, np.zeros((self.n_rows, 0))
        keys = np.concatenate(self.keys, axis=0)
        order = np.lexsort((keys[:, 2], keys[:, 1], -keys[:, 0]))
        tp = np.concatenate(self.tp, axis=1)[:, order]
        ignored = np.concatenate(self.ignored, axis=1)[:, order]
        ious = np.concatenate(self.ious, axis=1)[:, order]
        return keys[order, 0], tp, ignored, ious


def _size_rows(taus: Sequence[float]):
    rows = [("all", t) for t in taus]
    for name in SIZE_RANGES:
        rows.extend((name, t) for t in taus)
    return rows


def _class_tables(images: Sequence[ImageArrays], rows) -> dict[int, _ClassTable]:
    taus = np.array([t for _, t in rows])
    lo = np.array([0.0 if r == "all" else SIZE_RANGES[r][0] for r, _ in rows])
    hi = np.array([math.inf if r == "all" else SIZE_RANGES[r][1] for r, _ in rows])
    tables: dict[int, _ClassTable] = {}
    for pos, c, di, gi, ious in _blocks(images):
        im = images[pos]
        gt_area = area_array(im.gt_boxes[gi])
        gt_ignore = (gt_area[None, :] < lo[:, None]) | (gt_area[None, :] >= hi[:, None])
        det_gt, det_iou = _match_block(ious, taus, gt_ignore)
        det_area = area_array(im.det_boxes[di])
        out_of_range = (det_area[None, :] < lo[:, None]) | (det_area[None, :] >= hi[:, None])
        matched = det_gt >= 0
        matched_ignored = np.take_along_axis(
            np.pad(gt_ignore, ((0, 0), (0, 1))), np.where(matched, det_gt, len(gi)), axis=1)
        ignored = np.where(matched, matched_ignored, out_of_range)
        keys = np.column_stack([im.det_scores[di], np.full(len(di), pos), di]).astype(np.float64)
        table = tables.setdefault(int(c), _ClassTable(len(rows)))
        table.add(keys, matched & ~ignored, ignored, det_iou, (~gt_ignore).sum(axis=1))
    return tables


def _ap_rows(tables: dict[int, _ClassTable], n_rows: int) -> np.ndarray:
    """AP per row averaged over classes with ground truth in that row (NaN if none)."""
    per_class = []
    for table in tables.values():
        _, tp, ignored, _ = table.ranked()
        per_class.append([ap_from_ranked(tp[r][~ignored[r]], int(table.n_gt[r]))
                          for r in range(n_rows)])
    if not per_class:
        return np.full(n_rows, math.nan)
    return np.array([_nanmean(col) for col in zip(*per_class)])


def average_precision_images(images: Sequence[ImageArrays], tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    rows = [("all", tau)]
    return float(_ap_rows(_class_tables(images, rows), 1)[0])


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                      tau: float) -> float:
    """Class-averaged 101-point AP at IoU threshold ``tau``."""
    return average_precision_images(group_images(dets, gts), tau)


def _coco_from_tables(tables, taus) -> tuple[float, dict[float, float], dict[str, float]]:
    rows = _size_rows(taus)
    aps = _ap_rows(tables, len(rows))
    n = len(taus)
    ap_at = {t: float(aps[i]) for i, t in enumerate(taus)}
    ap_size = {name: _nanmean(aps[n * (s + 1): n * (s + 2)])
               for s, name in enumerate(SIZE_RANGES)}
    return _nanmean(aps[:n]), ap_at, ap_size


def map_coco_images(images: Sequence[ImageArrays], taus: Sequence[float] = COCO_THRESHOLDS):
    return _coco_from_tables(_class_tables(images, _size_rows(taus)), taus)


def map_coco(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             taus: Sequence[float] = COCO_THRESHOLDS):
    """``(map, ap_at, ap_size)`` over the COCO threshold ladder and size buckets."""
    return map_coco_images(group_images(dets, gts), taus)


# ---------------------------------------------------------------------------
# LRP

@dataclass(frozen=True)
class LRPResult:
    lrp: float
    lrp_loc: float
    lrp_fp: float
    lrp_fn: float
    loc_defined: bool = True


def lrp_from_ranked(scores: np.ndarray, tp: np.ndarray, ious: np.ndarray, n_gt: int,
                    tau: float = 0.5) -> LRPResult:
    """Optimal LRP over confidence cuts for one class.

    ``scores``, ``tp`` and ``ious`` describe score-ranked detections; a cut can
    only fall between distinct scores.  The empty cut is a candidate too.
    """
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    loc = np.where(tp, (1.0 - np.asarray(ious, dtype=np.float64)) / (1.0 - tau), 0.0)
    n = len(scores)
    cuts = [0] + [i + 1 for i in range(n) if i == n - 1 or scores[i + 1] != scores[i]]
    ntp = np.concatenate([[0], np.cumsum(tp)])[cuts]
    nfp = np.array(cuts) - ntp
    nfn = n_gt - ntp
    loc_sum = np.concatenate([[0.0], np.cumsum(loc)])[cuts]
    total = ntp + nfp + nfn
    lrp = np.where(total > 0, (loc_sum + nfp + nfn) / np.maximum(total, 1), 0.0)
    best = int(np.argmin(lrp))
    t, f, m = int(ntp[best]), int(nfp[best]), int(nfn[best])
    loc_defined = t > 0
    return LRPResult(
        lrp=float(lrp[best]),
        lrp_loc=float(loc_sum[best] / t) if loc_defined else 1.0,
        lrp_fp=f / (t + f) if t + f > 0 else 0.0,
        lrp_fn=m / (t + m) if t + m > 0 else 0.0,
        loc_defined=loc_defined,
    )


def _lrp_from_tables(tables: dict[int, _ClassTable], tau: float) -> tuple[LRPResult, bool]:
    results = []
    for table in tables.values():
        if table.n_gt[0] == 0:
            continue
        scores, tp, _, ious = table.ranked()
        results.append(lrp_from_ranked(scores, tp[0], ious[0], int(table.n_gt[0]), tau))
    if not results:
        return LRPResult(1.0, 1.0, 0.0, 1.0, False), False
    locs = [r.lrp_loc for r in results if r.loc_defined]
    return LRPResult(
        float(np.mean([r.lrp for r in results])),
        float(np.mean(locs)) if locs else 1.0,
        float(np.mean([r.lrp_fp for r in results])),
        float(np.mean([r.lrp_fn for r in results])),
        bool(locs),
    ), True


def lrp_images(images: Sequence[ImageArrays], tau: float = 0.5) -> LRPResult:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return _lrp_from_tables(_class_tables(images, [("all", tau)]), tau)[0]


def lrp(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], tau: float = 0.5) -> LRPResult:
    """Optimal LRP and its localization / false-positive / false-negative components."""
    return lrp_images(group_images(dets, gts), tau)


# ---------------------------------------------------------------------------
# localization vs classification

def localization_classification(images: Sequence[ImageArrays],
                                tau: float = 0.5) -> tuple[float, float, bool]:
    """Class-agnostic spatial matching: ``(mean IoU, class accuracy, any_matches)``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    ious, correct = [], []
    for pos, _, di, gi, block in _blocks(images, class_agnostic=True):
        im = images[pos]
        det_gt, det_iou = _match_block(block, np.array([tau]))
        for r, j in enumerate(det_gt[0]):
            if j >= 0:
                ious.append(det_iou[0, r])
                correct.append(im.det_classes[di[r]] == im.gt_classes[gi[j]])
    if not ious:
        return 0.0, 0.0, False
    return float(np.mean(ious)), float(np.mean(correct)), True


def localization_miou(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                      tau: float = 0.5) -> float:
    return localization_classification(group_images(dets, gts), tau)[0]


def classification_accuracy(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                            tau: float = 0.5) -> float:
    return localization_classification(group_images(dets, gts), tau)[1]


# ---------------------------------------------------------------------------
# full report

def evaluate_images(images: Sequence[ImageArrays], tau: float = 0.5,
                    taus: Sequence[float] = COCO_THRESHOLDS) -> MetricReport:
    """Every metric in one pass over shared matching tables.

    ``tau`` drives LRP and the localization/classification split; ``taus`` is
    the AP threshold ladder (it must contain 0.5 and 0.75).
    """
    taus = tuple(taus)
    flags = []
    rows = _size_rows(taus)
    tables = _class_tables(images, rows)
    map_, ap_at, ap_size = _coco_from_tables(tables, taus)
    if math.isnan(map_):
        flags.append("no_ground_truth")
    for name, v in ap_size.items():
        if math.isnan(v):
            flags.append(f"no_ground_truth_{name}")
    if tau in taus:
        lrp_tables = {c: _row_view(t, taus.index(tau)) for c, t in tables.items()}
    else:
        lrp_tables = _class_tables(images, [("all", tau)])
    lrp_res, any_gt = _lrp_from_tables(lrp_tables, tau)
    if not lrp_res.loc_defined:
        flags.append("lrp_loc_undefined")
    miou, acc, any_match = localization_classification(images, tau)
    if not any_match:
        flags.append("no_spatial_matches")
    return MetricReport(map_, ap_at, ap_size, lrp_res.lrp, lrp_res.lrp_loc, lrp_res.lrp_fp,
                        lrp_res.lrp_fn, miou, acc, tuple(flags))


def _row_view(table: _ClassTable, row: int) -> _ClassTable:
    view = _ClassTable(1)
    view.keys = table.keys
    view.tp = [tp[row:row + 1] for tp in table.tp]
    view.ignored = [ig[row:row + 1] for ig in table.ignored]
    view.ious = [io[row:row + 1] for io in table.ious]
    view.n_gt = table.n_gt[row:row + 1].copy()
    return view


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             tau: float = 0.5) -> MetricReport:
    return evaluate_images(group_images(dets, gts), tau)


def detections_from_arrays(boxes: np.ndarray, scores: Iterable[float], classes: Iterable[int],
                           image_id: int = 0) -> list[Detection]:
    return [Detection(Box(*map(float, b)), float(s), int(c), image_id)
            for b, s, c in zip(boxes, scores, classes)]
