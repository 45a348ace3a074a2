"""Monte-Carlo ablation harness with oracle regressors and classifiers.

Every scene draws from its own stream ``SeedSequence([rng_seed, scene_index])``
so a run gives identical numbers at any level of parallelism.

A scene is generated in two layers.  :class:`SceneDraws` holds everything
geometric (ground truth, proposals, score noise) plus the raw uniforms and
normals behind the classifier and the regressor.  :func:`realize` turns the
draws into concrete class ids and regressed boxes for one classifier accuracy,
regressor mode and noise level.  Sweeps over those knobs reuse the same draws,
so neighbouring sweep points differ only in the knob being swept.

Noise model.  An intersection regressor predicts ``intersect(P, G)`` with
per-coordinate noise of std ``sigma0 * sqrt(area(G))``.  A full-box regressor
predicts ``G`` and pays an extra ``kappa * d`` of std per coordinate, where ``d``
is how far that coordinate of ``G`` lies outside the proposal.  The ``kappa``
term is a modelling assumption: predicting edges the proposal cannot see is
taken to be harder.  Nothing outside this module depends on it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .boxes import Box, iou_matrix, iou_pairs
from .evaluation import GroundTruthBox, ImageArrays, MetricReport, evaluate_images
from .grouping import (PostprocessConfig, ProposalRecord, box_voting_arrays, uoi_arrays,
                       wta_arrays)

MAX_PROPOSAL_DRAWS = 10_000
_BATCH = 64


class SimConfigError(ValueError):
    pass


class RegressorMode(Enum):
    INTERSECTION = "intersection"
    FULL_BOX = "fullbox"


class Pipeline(Enum):
    WTA = "wta"
    UOI = "uoi"
    BOX_VOTING = "voting"


_PIPELINE_FN = {
    Pipeline.WTA: wta_arrays,
    Pipeline.UOI: uoi_arrays,
    Pipeline.BOX_VOTING: box_voting_arrays,
}


@dataclass(frozen=True)
class SimConfig:
    rng_seed: int = 7
    n_scenes: int = 1000
    objects_per_scene: tuple[int, int] = (1, 8)
    image_size: tuple[int, int] = (640, 480)
    object_size: tuple[float, float] = (12.0, 320.0)
    proposals_per_object: tuple[int, int] = (3, 10)
    proposal_iou_band: tuple[float, float] = (0.5, 0.9)
    regressor_mode: RegressorMode = RegressorMode.INTERSECTION
    sigma0: float = 0.02
    kappa: float = 0.15
    classifier_accuracy: float = 1.0
    n_classes: int = 3
    score_noise: float = 0.1
    refine_strength: float = 0.0
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    pipeline: Pipeline = Pipeline.UOI

    def __post_init__(self):
        errors = validate(self)
        if errors:
            raise SimConfigError("; ".join(errors))


def validate(cfg: SimConfig) -> list[str]:
    """Field-by-field problems with ``cfg`` (empty when valid)."""
    errors = []
    if cfg.n_scenes < 0:
        errors.append(f"n_scenes: must be >= 0, got {cfg.n_scenes}")
    lo, hi = cfg.objects_per_scene
    if not 0 <= lo <= hi:
        errors.append(f"objects_per_scene: need 0 <= lo <= hi, got {cfg.objects_per_scene}")
    lo, hi = cfg.proposals_per_object
    if not 1 <= lo <= hi:
        errors.append(f"proposals_per_object: need 1 <= lo <= hi, got {cfg.proposals_per_object}")
    w, h = cfg.image_size
    if w <= 0 or h <= 0:
        errors.append(f"image_size: must be positive, got {cfg.image_size}")
    smin, smax = cfg.object_size
    if not 0 < smin <= smax:
        errors.append(f"object_size: need 0 < min <= max, got {cfg.object_size}")
    elif smin > min(w, h):
        errors.append(f"object_size: smallest object {smin} does not fit image {cfg.image_size}")
    lo, hi = cfg.proposal_iou_band
    if not 0.0 <= lo < hi <= 1.0:
        errors.append(f"proposal_iou_band: need 0 <= lo < hi <= 1, got {cfg.proposal_iou_band}")
    if cfg.sigma0 < 0:
        errors.append(f"sigma0: must be >= 0, got {cfg.sigma0}")
    if cfg.kappa < 0:
        errors.append(f"kappa: must be >= 0, got {cfg.kappa}")
    if not 0.0 <= cfg.classifier_accuracy <= 1.0:
        errors.append(f"classifier_accuracy: must lie in [0, 1], got {cfg.classifier_accuracy}")
    if cfg.n_classes < 1:
        errors.append(f"n_classes: must be >= 1, got {cfg.n_classes}")
    elif cfg.n_classes == 1 and cfg.classifier_accuracy < 1.0:
        errors.append("classifier_accuracy: below 1 needs n_classes >= 2")
    if cfg.score_noise < 0:
        errors.append(f"score_noise: must be >= 0, got {cfg.score_noise}")
    if not 0.0 <= cfg.refine_strength <= 1.0:
        errors.append(f"refine_strength: must lie in [0, 1], got {cfg.refine_strength}")
    return errors


def scene_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_index]))


# ---------------------------------------------------------------------------
# oracle models

def _sample_proposals(gt: np.ndarray, count: int, band: tuple[float, float],
                      image_size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    lo, hi = band
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    spread = min(1.0, 1.05 - lo)
    scale = np.array([w, h, w, h])
    out = np.empty((0, 4))
    draws = 0
    cap = MAX_PROPOSAL_DRAWS * count
    while len(out) < count:
        if draws >= cap:
            raise SimConfigError(
                f"proposal_iou_band {band} unreachable for box {gt.tolist()} "
                f"after {draws} draws")
        mag = rng.uniform(0.0, spread, size=(_BATCH, 1))
        cand = gt + scale * mag * rng.uniform(-1.0, 1.0, size=(_BATCH, 4))
        draws += _BATCH
        cand[:, [0, 2]] = np.clip(cand[:, [0, 2]], 0.0, image_size[0])
        cand[:, [1, 3]] = np.clip(cand[:, [1, 3]], 0.0, image_size[1])
        ok = (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
        cand = cand[ok]
        q = iou_pairs(cand, np.broadcast_to(gt, cand.shape))
        out = np.vstack([out, cand[(q >= lo) & (q <= hi)]])
    return out[:count]


def generate_proposals(gt: Box, config: SimConfig, rng: np.random.Generator) -> list[Box]:
    """Proposals around ``gt`` whose IoU with it falls inside ``proposal_iou_band``."""
    lo, hi = config.proposals_per_object
    count = int(rng.integers(lo, hi + 1))
    arr = _sample_proposals(np.array(gt.as_tuple()), count, config.proposal_iou_band,
                            config.image_size, rng)
    return [Box(*map(float, row)) for row in arr]


def _regress(proposals: np.ndarray, gts: np.ndarray, z: np.ndarray, mode: RegressorMode,
             sigma0: float, kappa: float) -> np.ndarray:
    scale = np.sqrt((gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1]))[:, None]
    if mode is RegressorMode.INTERSECTION:
        target = np.concatenate([np.maximum(proposals[:, :2], gts[:, :2]),
                                 np.minimum(proposals[:, 2:], gts[:, 2:])], axis=1)
        std = sigma0 * scale
    else:
        target = gts
        inside = np.concatenate([np.clip(gts[:, [0, 2]], proposals[:, [0]], proposals[:, [2]]),
                                 np.clip(gts[:, [1, 3]], proposals[:, [1]], proposals[:, [3]])],
                                axis=1)[:, [0, 2, 1, 3]]
        std = sigma0 * scale + kappa * np.abs(target - inside)
    out = target + std * z
    # collapse corners that noise pushed past each other
    for a, b in ((0, 2), (1, 3)):
        bad = out[:, a] > out[:, b]
        mid = (out[bad, a] + out[bad, b]) / 2
        out[bad, a] = mid
        out[bad, b] = mid
    return out


def oracle_regress(proposal: Box, gt: Box, config: SimConfig, rng: np.random.Generator,
                   mode: RegressorMode | None = None) -> Box:
    """Noisy regression of one proposal towards its intersection or full-box target."""
    mode = mode or config.regressor_mode
    p = np.array([proposal.as_tuple()])
    g = np.array([gt.as_tuple()])
    if iou_pairs(p, g)[0] <= 0:
        raise ValueError(f"proposal {proposal} does not overlap ground truth {gt}")
    z = rng.standard_normal((1, 4))
    return Box(*map(float, _regress(p, g, z, mode, config.sigma0, config.kappa)[0]))


def _classify(true_classes: np.ndarray, u: np.ndarray, wrong: np.ndarray,
              accuracy: float) -> np.ndarray:
    return np.where(u < accuracy, true_classes, wrong)


def oracle_classify(true_class: int, config: SimConfig, rng: np.random.Generator) -> int:
    """The true class with probability ``classifier_accuracy``, else a uniformly drawn wrong one."""
    u = rng.random()
    if config.n_classes < 2 or u < config.classifier_accuracy:
        return true_class
    other = int(rng.integers(config.n_classes - 1))
    return other + (other >= true_class)


# ---------------------------------------------------------------------------
# scenes

@dataclass
class SceneDraws:
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    proposals: np.ndarray
    owner: np.ndarray
    scores: np.ndarray
    class_u: np.ndarray
    wrong_class: np.ndarray
    noise: np.ndarray
    refine_noise: np.ndarray


@dataclass
class Scene:
    gts: list[GroundTruthBox]
    proposals: list[ProposalRecord]
    owners: list[int]


def draw_scene(config: SimConfig, scene_index: int) -> SceneDraws:
    rng = scene_rng(config.rng_seed, scene_index)
    lo, hi = config.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    W, H = config.image_size
    smin, smax = config.object_size
    sides = np.exp(rng.uniform(math.log(smin), math.log(smax), size=(n_obj, 2)))
    sides = np.minimum(sides, [W, H])
    corner = rng.uniform(0.0, 1.0, size=(n_obj, 2)) * ([W, H] - sides)
    gt_boxes = np.concatenate([corner, corner + sides], axis=1)
    gt_classes = rng.integers(config.n_classes, size=n_obj)

    plo, phi = config.proposals_per_object
    props, owner = [], []
    for j in range(n_obj):
        count = int(rng.integers(plo, phi + 1))
        props.append(_sample_proposals(gt_boxes[j], count, config.proposal_iou_band,
                                       config.image_size, rng))
        owner.extend([j] * count)
    proposals = np.concatenate(props, axis=0) if props else np.zeros((0, 4))
    owner = np.array(owner, dtype=np.int64)
    n = len(owner)
    quality = iou_pairs(proposals, gt_boxes[owner]) if n else np.zeros(0)
    scores = np.clip(quality + config.score_noise * rng.standard_normal(n), 0.01, 1.0)
    class_u = rng.random(n)
    wrong = rng.integers(max(config.n_classes - 1, 1), size=n)
    true_cls = gt_classes[owner]
    wrong_class = wrong + (wrong >= true_cls) if config.n_classes > 1 else true_cls
    noise = rng.standard_normal((n, 4))
    refine_noise = rng.standard_normal((n, 4))
    return SceneDraws(gt_boxes, gt_classes, proposals, owner, scores, class_u,
                      wrong_class, noise, refine_noise)


def realize(draws: SceneDraws, config: SimConfig, mode: RegressorMode):
    """Class ids and regressed boxes for the given accuracy and regressor."""
    gts = draws.gt_boxes[draws.owner] if len(draws.owner) else np.zeros((0, 4))
    regressed = _regress(draws.proposals, gts, draws.noise, mode, config.sigma0, config.kappa)
    classes = _classify(draws.gt_classes[draws.owner], draws.class_u, draws.wrong_class,
                        config.classifier_accuracy)
    return regressed, classes


def generate_scene(config: SimConfig, scene_index: int,
                   mode: RegressorMode | None = None) -> Scene:
    """Ground truth and scored, classified, regressed proposals for one scene."""
    draws = draw_scene(config, scene_index)
    regressed, classes = realize(draws, config, mode or config.regressor_mode)
    gts = [GroundTruthBox(Box(*map(float, b)), int(c), scene_index, i)
           for i, (b, c) in enumerate(zip(draws.gt_boxes, draws.gt_classes))]
    proposals = [ProposalRecord(Box(*map(float, p)), Box(*map(float, r)), float(s), int(c),
                                scene_index)
                 for p, r, s, c in zip(draws.proposals, regressed, draws.scores, classes)]
    return Scene(gts, proposals, [int(o) for o in draws.owner])


def _oracle_refine(boxes: np.ndarray, draws: SceneDraws, seeds: np.ndarray,
                   config: SimConfig) -> np.ndarray:
    """Move each merged box a fraction of the way to its best-overlapping ground truth."""
    if config.refine_strength == 0 or len(boxes) == 0 or len(draws.gt_boxes) == 0:
        return boxes
    best = iou_matrix(boxes, draws.gt_boxes).argmax(axis=1)
    target = draws.gt_boxes[best]
    scale = np.sqrt((target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1]))[:, None]
    out = boxes + config.refine_strength * (target - boxes)
    out = out + config.sigma0 * scale * draws.refine_noise[seeds]
    lo = np.minimum(out[:, :2], out[:, 2:])
    hi = np.maximum(out[:, :2], out[:, 2:])
    return np.concatenate([lo, hi], axis=1)


def run_scene(draws: SceneDraws, config: SimConfig, pipeline: Pipeline) -> ImageArrays:
    regressed, classes = realize(draws, config, config.regressor_mode)
    boxes, scores, det_classes, seeds = _PIPELINE_FN[pipeline](
        draws.proposals, regressed, draws.scores, classes, config.postprocess)
    if pipeline is Pipeline.UOI:
        boxes = _oracle_refine(boxes, draws, seeds, config)
    return ImageArrays(boxes, scores, det_classes, draws.gt_boxes, draws.gt_classes)


# ---------------------------------------------------------------------------
# runners

def worker_count() -> int:
    env = os.environ.get("UOI_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SimConfigError(f"UOI_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _draw_chunk(args) -> list[SceneDraws]:
    config, indices = args
    return [draw_scene(config, i) for i in indices]


def draw_scenes(config: SimConfig, workers: int | None = None) -> list[SceneDraws]:
    workers = worker_count() if workers is None else workers
    indices = list(range(config.n_scenes))
    if workers <= 1 or config.n_scenes < 2 * workers:
        return _draw_chunk((config, indices))
    chunks = [indices[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_draw_chunk, [(config, c) for c in chunks]))
    out: list[SceneDraws | None] = [None] * config.n_scenes
    for chunk, part in zip(chunks, parts):
        for i, d in zip(chunk, part):
            out[i] = d
    return out


def evaluate_draws(scenes: Sequence[SceneDraws], config: SimConfig,
                   pipeline: Pipeline) -> MetricReport:
    return evaluate_images([run_scene(d, config, pipeline) for d in scenes])


def run_pipelines(config: SimConfig, pipelines: Iterable[Pipeline],
                  scenes: Sequence[SceneDraws] | None = None) -> dict[Pipeline, MetricReport]:
    scenes = draw_scenes(config) if scenes is None else scenes
    return {p: evaluate_draws(scenes, config, p) for p in pipelines}


def run_experiment(config: SimConfig) -> MetricReport:
    """Generate, regress, post-process and evaluate ``config.n_scenes`` scenes."""
    return run_pipelines(config, [config.pipeline])[config.pipeline]


# ---------------------------------------------------------------------------
# sweeps

class SweepAxis(Enum):
    PROPOSAL_QUALITY = "proposal-quality"
    GROUP_SIZE = "group-size"
    CLASSIFIER_ACCURACY = "classifier-accuracy"
    GROUPING_THRESHOLD_K = "threshold-k"
    REGRESSOR_MODE = "regressor-mode"


# axes whose values leave the geometric draws untouched
_SHARED_DRAWS = {SweepAxis.GROUP_SIZE, SweepAxis.CLASSIFIER_ACCURACY,
                 SweepAxis.GROUPING_THRESHOLD_K, SweepAxis.REGRESSOR_MODE}


@dataclass(frozen=True)
class SweepRow:
    value: object
    pipeline: Pipeline
    report: MetricReport


def with_axis(config: SimConfig, axis: SweepAxis, value) -> SimConfig:
    if axis is SweepAxis.PROPOSAL_QUALITY:
        lo, hi = value
        return replace(config, proposal_iou_band=(float(lo), float(hi)))
    if axis is SweepAxis.GROUP_SIZE:
        return replace(config, postprocess=replace(config.postprocess, m=int(value)))
    if axis is SweepAxis.CLASSIFIER_ACCURACY:
        return replace(config, classifier_accuracy=float(value))
    if axis is SweepAxis.GROUPING_THRESHOLD_K:
        return replace(config, postprocess=replace(config.postprocess, k=float(value)))
    if axis is SweepAxis.REGRESSOR_MODE:
        return replace(config, regressor_mode=RegressorMode(value))
    raise ValueError(f"unknown axis {axis}")


def sweep(config: SimConfig, axis: SweepAxis, values: Sequence,
          pipelines: Sequence[Pipeline] = (Pipeline.WTA, Pipeline.UOI)) -> list[SweepRow]:
    """One evaluation per (value, pipeline); rows follow the order of ``values``."""
    configs = [with_axis(config, axis, v) for v in values]
    shared = draw_scenes(config) if axis in _SHARED_DRAWS else None
    rows = []
    for v, cfg in zip(values, configs):
        reports = run_pipelines(cfg, pipelines, shared)
        rows.extend(SweepRow(v, p, reports[p]) for p in pipelines)
    return rows
