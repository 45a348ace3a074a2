import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strategies import boxes, records
from uoi.boxes import Box, as_array, iou
from uoi.grouping import (BoxKey, Detection, Group, PostprocessConfig, ProposalRecord, SoftMode,
                          box_voting_merge, cluster_nms, cluster_nms_kernel, greedy_nms,
                          group_by_seed, nms_kernel, postprocess, postprocess_box_voting,
                          postprocess_uoi, postprocess_wta, seed_group_kernel, soft_nms,
                          soft_nms_kernel, uoi_merge)
from uoi.targets import quadrant_partition


def brute_nms(bs, scores, thresh):
    """Textbook greedy NMS over plain lists."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(bs[i], bs[j]) < thresh for j in keep):
            keep.append(i)
    return keep


def rec(box, score, cls=0, img=0, reg=None):
    return ProposalRecord(box, reg or box, score, cls, img)


# frozen trace from a pure-python reference implementation
SOFT_BOXES = [(14, 27, 39, 49), (14, 16, 40, 30), (5, 25, 29, 48), (20, 19, 33, 30),
              (14, 9, 26, 19), (17, 25, 47, 53), (1, 19, 21, 41), (20, 23, 47, 51),
              (5, 19, 13, 43), (2, 1, 11, 15)]
SOFT_SCORES = [0.92, 0.72, 0.84, 0.53, 0.71, 0.44, 0.46, 0.51, 0.3, 0.36]
GAUSS_ORDER = [0, 4, 1, 2, 3, 9, 6, 7, 8, 5]
GAUSS_FINAL = [0.92, 0.699492284577, 0.600095717515, 0.382797275553, 0.71, 0.061720495236,
               0.344448357178, 0.285404370959, 0.198471328251, 0.36]
LINEAR_ORDER = [0, 1, 4, 2, 9, 3, 6, 7, 8, 5]
LINEAR_FINAL = [0.92, 0.72, 0.503786531131, 0.321785714286, 0.71, 0.044014993259, 0.3,
                0.269932432432, 0.184210526316, 0.36]


@pytest.mark.parametrize("mode,order,final", [
    (SoftMode.GAUSSIAN, GAUSS_ORDER, GAUSS_FINAL),
    (SoftMode.LINEAR, LINEAR_ORDER, LINEAR_FINAL),
])
def test_soft_nms_frozen_trace(mode, order, final):
    kept, scores = soft_nms_kernel(np.array(SOFT_BOXES, float), np.array(SOFT_SCORES), 0.5, mode,
                                   score_floor=0.0)
    assert kept == order
    assert scores == pytest.approx(final, abs=1e-11)
    kept, _ = soft_nms_kernel(np.array(SOFT_BOXES, float), np.array(SOFT_SCORES), 0.5, mode,
                              score_floor=0.1)
    assert 5 not in kept


def test_soft_nms_records_and_bad_sigma():
    rs = [rec(Box(*b), s) for b, s in zip(SOFT_BOXES, SOFT_SCORES)]
    out = soft_nms(rs, score_floor=0.0)
    assert [r.score for r in out] == pytest.approx([GAUSS_FINAL[i] for i in GAUSS_ORDER], abs=1e-11)
    with pytest.raises(ValueError):
        soft_nms_kernel(np.zeros((1, 4)), np.ones(1), sigma=0)


def test_nms_ties_prefer_lower_index():
    rs = [rec(Box(0, 0, 10, 10), 0.5), rec(Box(0, 0, 10, 10), 0.5)]
    assert greedy_nms(rs, 0.5) == [0]
    assert cluster_nms(rs, 0.5) == [0]


def test_threshold_validation():
    with pytest.raises(ValueError):
        greedy_nms([], 1.0)
    with pytest.raises(ValueError):
        PostprocessConfig(k=0)
    with pytest.raises(ValueError):
        PostprocessConfig(m=0)
    with pytest.raises(ValueError):
        ProposalRecord(Box(0, 0, 1, 1), Box(0, 0, 1, 1), 1.5)
    with pytest.raises(ValueError):
        postprocess([], "nope")


def test_grouping_example():
    rs = [rec(Box(0, 0, 10, 10), 0.9), rec(Box(1, 0, 11, 10), 0.8), rec(Box(0, 1, 10, 11), 0.7),
          rec(Box(50, 50, 60, 60), 0.6)]
    groups = group_by_seed(rs, PostprocessConfig(m=2))
    assert groups == [Group(0, (0, 1), (2,), 0), Group(3, (3,), (), 0)]


def test_uoi_merge_is_union_of_regressed():
    rs = [ProposalRecord(Box(0, 0, 10, 10), Box(0, 0, 5, 5), 0.9),
          ProposalRecord(Box(0, 0, 10, 9), Box(5, 5, 10, 9), 0.8)]
    out = postprocess_uoi(rs)
    assert len(out) == 1
    assert out[0].box == Box(0, 0, 10, 9) and out[0].score == 0.9 and out[0].proposal == rs[0].proposal


def test_box_voting_weighted_mean():
    rs = [ProposalRecord(Box(0, 0, 10, 10), Box(0, 0, 10, 10), 0.75),
          ProposalRecord(Box(0, 0, 10, 10), Box(2, 0, 12, 10), 0.25)]
    out = postprocess_box_voting(rs)
    assert len(out) == 1
    assert out[0].box.x1 == pytest.approx(0.5) and out[0].box.x2 == pytest.approx(10.5)
    assert box_voting_merge(Group(0, (0,)), rs) == rs[0].regressed


def test_refiner_and_floor():
    rs = [rec(Box(0, 0, 4, 4), 0.9), rec(Box(20, 20, 24, 24), 0.01)]
    shift = lambda b: Box(b.x1 + 1, b.y1, b.x2 + 1, b.y2)
    out = postprocess_uoi(rs, PostprocessConfig(refiner=shift))
    assert [d.box for d in out] == [Box(1, 0, 5, 4)]


def test_images_are_independent():
    rs = [rec(Box(0, 0, 4, 4), 0.5, img=1), rec(Box(0, 0, 4, 4), 0.9, img=0)]
    out = postprocess_wta(rs)
    assert [(d.image_id, d.score) for d in out] == [(0, 0.9), (1, 0.5)]


@settings(max_examples=200)
@given(st.lists(boxes(min_side=0.5), max_size=30), st.data(), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_oracle(bs, data, thresh):
    scores = [data.draw(st.integers(0, 10)) / 10 for _ in bs]
    arr, sc = as_array(bs), np.array(scores, dtype=float)
    expected = brute_nms(bs, scores, thresh)
    assert nms_kernel(arr, sc, thresh) == expected
    assert sorted(cluster_nms_kernel(arr, sc, thresh)) == sorted(expected)


@settings(max_examples=150)
@given(records(n_classes=2, n_images=2), st.sampled_from([0.3, 0.5, 0.7]), st.integers(1, 6))
def test_grouping_invariants(rs, k, m):
    cfg = PostprocessConfig(k=k, m=m)
    groups = group_by_seed(rs, cfg)
    covered = []
    for g in groups:
        seed = rs[g.seed_index]
        assert g.member_indices[0] == g.seed_index and len(g.member_indices) <= m
        for i in g.member_indices[1:] + g.suppressed_indices:
            assert rs[i].class_id == seed.class_id and rs[i].image_id == seed.image_id
            assert iou(seed.proposal, rs[i].proposal) >= k
            assert (-seed.score, g.seed_index) < (-rs[i].score, i)
        covered += list(g.member_indices) + list(g.suppressed_indices)
    assert sorted(covered) == list(range(len(rs)))
    # seeds are exactly the greedy NMS kept set of each (image, class) cell
    for img in (0, 1):
        for c in (0, 1):
            idx = [i for i, r in enumerate(rs) if r.image_id == img and r.class_id == c]
            kept = greedy_nms([rs[i] for i in idx], k)
            assert sorted(idx[j] for j in kept) == sorted(
                g.seed_index for g in groups if rs[g.seed_index].image_id == img
                and rs[g.seed_index].class_id == c)


@settings(max_examples=150)
@given(records(n_classes=2, n_images=2), st.sampled_from([0.3, 0.5, 0.7]))
def test_uoi_reductions(rs, k):
    wta = postprocess_wta(rs, PostprocessConfig(k=k))
    assert postprocess_uoi(rs, PostprocessConfig(k=k, m=1)) == wta
    uoi = postprocess_uoi(rs, PostprocessConfig(k=k))
    assert len(uoi) == len(wta)
    groups = {g.seed_index: g for g in group_by_seed(rs, PostprocessConfig(k=k))}
    for d in uoi:
        seed = next(i for i, r in enumerate(rs) if r.proposal == d.proposal and r.score == d.score
                    and r.image_id == d.image_id and r.class_id == d.class_id and i in groups)
        g = groups[seed]
        if len(g.member_indices) == 1:
            assert d.box == rs[seed].regressed
        assert all(d.box.contains(rs[i].regressed) for i in g.member_indices)


@given(boxes(min_side=1.0))
def test_exact_quadrant_recovery(g):
    parts = quadrant_partition(g)
    rs = [ProposalRecord(g, p, 0.9 - 0.1 * i) for i, p in enumerate(parts)]
    merged = uoi_merge(Group(0, (0, 1, 2, 3)), rs)
    assert merged == g and iou(merged, g) == 1.0


@given(records(n_images=1))
def test_soft_nms_never_raises_scores(rs):
    for r in soft_nms(rs, score_floor=0.0):
        assert r.score <= max(x.score for x in rs)
    assert len(soft_nms(rs, score_floor=0.0)) == len(rs)
