"""Post-processing engines: the NMS family, box voting and union-over-intersections.

Every engine is built from the same greedy seed loop over a score ordering
(descending score, ties to the lower record index), so the number of
union-over-intersections detections always equals the number of boxes
greedy NMS keeps at the same threshold on the proposals.

The ``*_arrays`` functions are the batch kernels used by the simulator; they
take ``(n, 4)`` float arrays for a single image.  The record-level functions
accept :class:`ProposalRecord` lists spanning any number of images.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .boxes import Box, as_array, iou_matrix, union_bounds


class BoxKey(Enum):
    PROPOSAL = "proposal"
    REGRESSED = "regressed"


class SoftMode(Enum):
    LINEAR = "linear"
    GAUSSIAN = "gaussian"


Refiner = Callable[[Box], Box]


def identity_refiner(box: Box) -> Box:
    return box


@dataclass(frozen=True)
class ProposalRecord:
    proposal: Box
    regressed: Box
    score: float
    class_id: int = 0
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")

    def box(self, key: BoxKey) -> Box:
        return self.proposal if key is BoxKey.PROPOSAL else self.regressed


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int = 0
    image_id: int = 0
    proposal: Box | None = None


@dataclass(frozen=True)
class Group:
    seed_index: int
    member_indices: tuple[int, ...]
    suppressed_indices: tuple[int, ...] = ()
    class_id: int = 0


@dataclass(frozen=True)
class PostprocessConfig:
    k: float = 0.5
    m: int = 5
    score_floor: float = 0.05
    refiner: Refiner | None = None
    per_class: bool = True
    nms_key: BoxKey = BoxKey.PROPOSAL

    def __post_init__(self):
        if not 0.0 < self.k < 1.0:
            raise ValueError(f"k must lie in (0, 1), got {self.k}")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")


# ---------------------------------------------------------------------------
# kernels

def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def seed_group_kernel(boxes: np.ndarray, scores: np.ndarray, k: float,
                      m: int | None) -> list[tuple[int, list[int], list[int]]]:
    """Greedy seed grouping.

    Returns ``(seed, members, suppressed)`` triples in seed order.  ``members``
    holds the top-``m`` of everything the seed absorbs (seed first), the rest
    of the absorbed records land in ``suppressed``.
    """
    n = len(scores)
    if n == 0:
        return []
    order = score_order(scores)
    overlaps = iou_matrix(boxes, boxes)
    taken = np.zeros(n, dtype=bool)
    groups = []
    for seed in order:
        if taken[seed]:
            continue
        absorbed = order[~taken[order] & (overlaps[seed, order] >= k)]
        taken[absorbed] = True
        taken[seed] = True
        absorbed = [int(i) for i in absorbed if i != seed]
        members = [int(seed)] + absorbed
        cap = len(members) if m is None else m
        groups.append((int(seed), members[:cap], members[cap:]))
    return groups


def nms_kernel(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    return [seed for seed, _, _ in seed_group_kernel(boxes, scores, iou_thresh, 1)]


def cluster_nms_kernel(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Matrix-form NMS iterated to its fixed point (kept set equals greedy NMS)."""
    n = len(scores)
    if n == 0:
        return []
    order = score_order(scores)
    sorted_boxes = np.asarray(boxes, dtype=np.float64)[order]
    upper = np.triu(iou_matrix(sorted_boxes, sorted_boxes), k=1)
    keep = np.ones(n, dtype=bool)
    # entry j is final after j sweeps, so n sweeps always reach the fixed point
    for _ in range(n + 1):
        keep_next = (upper * keep[:, None]).max(axis=0) < iou_thresh
        if np.array_equal(keep_next, keep):
            break
        keep = keep_next
    return [int(i) for i in order[keep]]


def soft_nms_kernel(boxes: np.ndarray, scores: np.ndarray, sigma: float = 0.5,
                    mode: SoftMode = SoftMode.GAUSSIAN, score_floor: float = 0.001,
                    iou_thresh: float = 0.3) -> tuple[list[int], np.ndarray]:
    """Soft-NMS rescoring.

    Returns the surviving indices in pick order and the full array of decayed
    scores.  Gaussian decay multiplies by ``exp(-iou**2 / sigma)``; linear decay
    by ``1 - iou`` once the overlap reaches ``iou_thresh``.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = len(scores)
    new_scores = np.asarray(scores, dtype=np.float64).copy()
    if n == 0:
        return [], new_scores
    overlaps = iou_matrix(boxes, boxes)
    remaining = np.ones(n, dtype=bool)
    picked = []
    index = np.arange(n)
    for _ in range(n):
        cand = index[remaining]
        best = cand[score_order(new_scores[cand])[0]]
        picked.append(int(best))
        remaining[best] = False
        rest = index[remaining]
        ov = overlaps[best, rest]
        if mode is SoftMode.GAUSSIAN:
            decay = np.exp(-(ov * ov) / sigma)
        else:
            decay = np.where(ov >= iou_thresh, 1.0 - ov, 1.0)
        new_scores[rest] *= decay
    kept = [i for i in picked if new_scores[i] >= score_floor]
    return kept, new_scores


# ---------------------------------------------------------------------------
# single-image array pipelines

def _class_partitions(classes: np.ndarray, per_class: bool) -> list[np.ndarray]:
    if not per_class:
        return [np.arange(len(classes))]
    return [np.flatnonzero(classes == c) for c in np.unique(classes)]


def _grouped(keys, scores, classes, k, m, per_class, floor=None):
    out = []
    candidates = np.arange(len(scores)) if floor is None else np.flatnonzero(scores >= floor)
    for sub in _class_partitions(classes[candidates], per_class):
        part = candidates[sub]
        for seed, members, suppressed in seed_group_kernel(keys[part], scores[part], k, m):
            out.append((int(part[seed]), part[members], part[suppressed]))
    out.sort(key=lambda g: (-scores[g[0]], g[0]))
    return out


def _apply_refiner(merged: np.ndarray, refiner: Refiner | None) -> np.ndarray:
    if refiner is None or len(merged) == 0:
        return merged
    return as_array(refiner(Box(*map(float, row))) for row in merged)


def uoi_arrays(proposals, regressed, scores, classes, config: PostprocessConfig):
    """Union-over-intersections for one image.

    Returns ``(boxes, scores, classes, seed_indices)``.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    regressed = np.asarray(regressed, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    groups = _grouped(proposals, scores, classes, config.k, config.m, config.per_class,
                      config.score_floor)
    merged = np.empty((len(groups), 4))
    for j, (_, members, _) in enumerate(groups):
        sub = regressed[members]
        merged[j, :2] = sub[:, :2].min(axis=0)
        merged[j, 2:] = sub[:, 2:].max(axis=0)
    merged = _apply_refiner(merged, config.refiner)
    seeds = np.array([g[0] for g in groups], dtype=np.int64)
    return merged, scores[seeds], classes[seeds], seeds


def wta_arrays(proposals, regressed, scores, classes, config: PostprocessConfig):
    """Winner-takes-all: greedy NMS on ``config.nms_key`` boxes, emitting the winners' regressed boxes."""
    regressed = np.asarray(regressed, dtype=np.float64).reshape(-1, 4)
    keys = regressed if config.nms_key is BoxKey.REGRESSED else \
        np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    groups = _grouped(keys, scores, classes, config.k, 1, config.per_class, config.score_floor)
    seeds = np.array([g[0] for g in groups], dtype=np.int64)
    return regressed[seeds].reshape(-1, 4), scores[seeds], classes[seeds], seeds


def box_voting_arrays(proposals, regressed, scores, classes, config: PostprocessConfig):
    """Box voting: group regressed boxes, average every member weighted by score."""
    regressed = np.asarray(regressed, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    groups = _grouped(regressed, scores, classes, config.k, None, config.per_class,
                      config.score_floor)
    merged = np.empty((len(groups), 4))
    for j, (_, members, _) in enumerate(groups):
        merged[j] = _weighted_mean(regressed[members], scores[members])
    seeds = np.array([g[0] for g in groups], dtype=np.int64)
    return merged, scores[seeds], classes[seeds], seeds


def _weighted_mean(boxes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if total <= 0:
        return boxes.mean(axis=0)
    out = (boxes * (weights / total)[:, None]).sum(axis=0)
    # rounding can push a coordinate a hair outside the members' span
    return np.clip(out, boxes.min(axis=0), boxes.max(axis=0))


# ---------------------------------------------------------------------------
# record-level API

def _key_array(records: Sequence[ProposalRecord], key: BoxKey) -> np.ndarray:
    return as_array(r.box(key) for r in records)


def greedy_nms(records: Sequence[ProposalRecord], iou_thresh: float,
               key: BoxKey = BoxKey.PROPOSAL) -> list[int]:
    """Indices kept by greedy NMS, in descending score order.

    Class and image ids are ignored; partition the records first if needed.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    scores = np.array([r.score for r in records], dtype=np.float64)
    return nms_kernel(_key_array(records, key), scores, iou_thresh)


def cluster_nms(records: Sequence[ProposalRecord], iou_thresh: float,
                key: BoxKey = BoxKey.PROPOSAL) -> list[int]:
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    scores = np.array([r.score for r in records], dtype=np.float64)
    return cluster_nms_kernel(_key_array(records, key), scores, iou_thresh)


def soft_nms(records: Sequence[ProposalRecord], sigma: float = 0.5,
             mode: SoftMode = SoftMode.GAUSSIAN, score_floor: float = 0.001,
             iou_thresh: float = 0.3, key: BoxKey = BoxKey.REGRESSED) -> list[ProposalRecord]:
    """Rescored records in pick order, dropping those whose decayed score falls below the floor."""
    scores = np.array([r.score for r in records], dtype=np.float64)
    kept, new_scores = soft_nms_kernel(_key_array(records, key), scores, sigma, mode,
                                       score_floor, iou_thresh)
    return [replace(records[i], score=float(new_scores[i])) for i in kept]


def _image_partitions(records: Sequence[ProposalRecord], candidates) -> dict[int, np.ndarray]:
    by_image: dict[int, list[int]] = {}
    for i in candidates:
        by_image.setdefault(records[i].image_id, []).append(i)
    return {img: np.array(idx, dtype=np.int64) for img, idx in sorted(by_image.items())}


def _above_floor(records, floor):
    return [i for i, r in enumerate(records) if r.score >= floor]


def _groups_for(records, candidates, k, m, per_class, key) -> list[Group]:
    groups = []
    for idx in _image_partitions(records, candidates).values():
        keys = _key_array([records[i] for i in idx], key)
        scores = np.array([records[i].score for i in idx])
        classes = np.array([records[i].class_id for i in idx])
        for seed, members, suppressed in _grouped(keys, scores, classes, k, m, per_class):
            groups.append(Group(int(idx[seed]), tuple(int(i) for i in idx[members]),
                                tuple(int(i) for i in idx[suppressed]),
                                records[idx[seed]].class_id))
    return groups


def group_by_seed(records: Sequence[ProposalRecord],
                  config: PostprocessConfig = PostprocessConfig()) -> list[Group]:
    """Group proposals around greedy seeds by overlap of the original proposal boxes.

    Each image (and, with ``per_class``, each class) is grouped independently.
    Groups come out per image in seed order.
    """
    return _groups_for(records, range(len(records)), config.k, config.m, config.per_class,
                       BoxKey.PROPOSAL)


def uoi_merge(group: Group, records: Sequence[ProposalRecord]) -> Box:
    return union_bounds(records[i].regressed for i in group.member_indices)


def box_voting_merge(group: Group, records: Sequence[ProposalRecord]) -> Box:
    members = [records[i] for i in group.member_indices]
    if not members:
        raise ValueError("cannot merge an empty group")
    merged = _weighted_mean(as_array(r.regressed for r in members),
                            np.array([r.score for r in members]))
    return Box(*map(float, merged))


def _emit(records, groups: list[Group], boxes: list[Box]) -> list[Detection]:
    dets = []
    for g, b in zip(groups, boxes):
        seed = records[g.seed_index]
        dets.append(Detection(b, seed.score, seed.class_id, seed.image_id, seed.proposal))
    order = sorted(range(len(dets)),
                   key=lambda j: (dets[j].image_id, -dets[j].score, groups[j].seed_index))
    return [dets[j] for j in order]


def postprocess_uoi(records: Sequence[ProposalRecord],
                    config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    """Group by proposals, take the union of the members' regressed intersections, refine.

    Each group yields one detection scored with its seed's score.
    """
    candidates = _above_floor(records, config.score_floor)
    groups = _groups_for(records, candidates, config.k, config.m, config.per_class,
                         BoxKey.PROPOSAL)
    refine = config.refiner or identity_refiner
    return _emit(records, groups, [refine(uoi_merge(g, records)) for g in groups])


def postprocess_wta(records: Sequence[ProposalRecord],
                    config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    candidates = _above_floor(records, config.score_floor)
    groups = _groups_for(records, candidates, config.k, 1, config.per_class, config.nms_key)
    return _emit(records, groups, [records[g.seed_index].regressed for g in groups])


def postprocess_box_voting(records: Sequence[ProposalRecord],
                           config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    candidates = _above_floor(records, config.score_floor)
    groups = _groups_for(records, candidates, config.k, None, config.per_class,
                         BoxKey.REGRESSED)
    return _emit(records, groups, [box_voting_merge(g, records) for g in groups])


def postprocess_cluster_nms(records: Sequence[ProposalRecord],
                            config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    candidates = _above_floor(records, config.score_floor)
    groups = []
    for idx in _image_partitions(records, candidates).values():
        classes = np.array([records[i].class_id for i in idx])
        for part in _class_partitions(classes, config.per_class):
            sub = idx[part]
            kept = cluster_nms([records[i] for i in sub], config.k, config.nms_key)
            groups.extend(Group(int(sub[i]), (int(sub[i]),)) for i in kept)
    return _emit(records, groups, [records[g.seed_index].regressed for g in groups])


def postprocess_soft_nms(records: Sequence[ProposalRecord],
                         config: PostprocessConfig = PostprocessConfig(),
                         sigma: float = 0.5, mode: SoftMode = SoftMode.GAUSSIAN,
                         iou_thresh: float = 0.3) -> list[Detection]:
    dets = []
    for idx in _image_partitions(records, range(len(records))).values():
        classes = np.array([records[i].class_id for i in idx])
        for part in _class_partitions(classes, config.per_class):
            sub = [records[i] for i in idx[part]]
            for r in soft_nms(sub, sigma, mode, config.score_floor, iou_thresh, config.nms_key):
                dets.append(Detection(r.regressed, r.score, r.class_id, r.image_id, r.proposal))
    dets.sort(key=lambda d: (d.image_id, -d.score))
    return dets


POSTPROCESSORS = {
    "nms": postprocess_wta,
    "soft-nms": postprocess_soft_nms,
    "cluster-nms": postprocess_cluster_nms,
    "box-voting": postprocess_box_voting,
    "uoi": postprocess_uoi,
}


def postprocess(records: Sequence[ProposalRecord], method: str,
                config: PostprocessConfig = PostprocessConfig(), **kwargs) -> list[Detection]:
    try:
        fn = POSTPROCESSORS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(POSTPROCESSORS)}") from None
    return fn(records, config, **kwargs)

