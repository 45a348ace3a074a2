"""Slow, loop-based reference implementations used to check the library."""

import math

from uoi.boxes import Box, area, iou
from uoi.evaluation import GroundTruthBox
from uoi.grouping import Detection

TAUS = [0.5 + 0.05 * i for i in range(10)]
BUCKETS = {"all": (0.0, math.inf), "S": (0.0, 32.0 ** 2), "M": (32.0 ** 2, 96.0 ** 2),
           "L": (96.0 ** 2, math.inf)}


def match(dets, gts, tau, lo=0.0, hi=math.inf):
    """COCO-style greedy matching of one image/class.

    Returns per-detection (status, iou) with status in {"tp", "fp", "ignore"},
    plus the number of non-ignored ground truths.
    """
    gt_ignore = [not (lo <= area(g.box) < hi) for g in gts]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gorder = sorted(range(len(gts)), key=lambda j: gt_ignore[j])
    taken = [False] * len(gts)
    out = {}
    for i in order:
        best, best_iou = -1, tau
        for j in gorder:
            if taken[j]:
                continue
            if best >= 0 and not gt_ignore[best] and gt_ignore[j]:
                break
            v = iou(dets[i].box, gts[j].box)
            if v < best_iou:
                continue
            if best >= 0 and v == best_iou and gt_ignore[best] == gt_ignore[j]:
                continue
            best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            out[i] = ("ignore" if gt_ignore[best] else "tp", iou(dets[i].box, gts[best].box))
        elif not (lo <= area(dets[i].box) < hi):
            out[i] = ("ignore", 0.0)
        else:
            out[i] = ("fp", 0.0)
    return out, sum(not x for x in gt_ignore)


def _cells(dets, gts):
    keys = {(d.image_id, d.class_id) for d in dets} | {(g.image_id, g.class_id) for g in gts}
    for img, c in sorted(keys):
        yield c, ([d for d in dets if d.image_id == img and d.class_id == c],
                  [g for g in gts if g.image_id == img and g.class_id == c])


def ranked(dets, gts, cls, tau, bucket="all"):
    lo, hi = BUCKETS[bucket]
    rows, n_gt = [], 0
    for c, (ds, gs) in _cells(dets, gts):
        if c != cls:
            continue
        res, n = match(ds, gs, tau, lo, hi)
        n_gt += n
        rows += [(ds[i].score, status, v) for i, (status, v) in res.items()]
    rows = [r for r in rows if r[1] != "ignore"]
    rows.sort(key=lambda r: -r[0])
    return rows, n_gt


def ap(rows, n_gt):
    if n_gt == 0:
        return math.nan
    tp = fp = 0
    pr = []
    for _, status, _ in rows:
        tp += status == "tp"
        fp += status == "fp"
        pr.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        total += max([p for rec, p in pr if rec >= r], default=0.0)
    return total / 101


def classes(dets, gts):
    return sorted({g.class_id for g in gts})


def mean_ap(dets, gts, taus=TAUS, bucket="all"):
    vals = []
    for tau in taus:
        per = [ap(*ranked(dets, gts, c, tau, bucket)) for c in classes(dets, gts)]
        per = [v for v in per if not math.isnan(v)]
        if per:
            vals.append(sum(per) / len(per))
    return sum(vals) / len(vals) if vals else math.nan


def lrp(dets, gts, tau=0.5):
    """Optimal LRP per class by trying every score cut, averaged over classes."""
    results = []
    for c in classes(dets, gts):
        rows, n_gt = ranked(dets, gts, c, tau)
        cut_scores = [math.inf] + sorted({r[0] for r in rows}, reverse=True)
        best = None
        for s in cut_scores:
            kept = [r for r in rows if r[0] >= s]
            tps = [r[2] for r in kept if r[1] == "tp"]
            nfp = len(kept) - len(tps)
            nfn = n_gt - len(tps)
            loc = sum((1 - v) / (1 - tau) for v in tps)
            total = len(tps) + nfp + nfn
            value = (loc + nfp + nfn) / total
            if best is None or value < best[0]:
                t = len(tps)
                best = (value, loc / t if t else None, nfp / (t + nfp) if t + nfp else 0.0,
                        nfn / (t + nfn) if t + nfn else 0.0)
        results.append(best)
    n = len(results)
    # classes without a true positive have no localization error to average
    locs = [r[1] for r in results if r[1] is not None]
    return (sum(r[0] for r in results) / n, sum(locs) / len(locs) if locs else 1.0,
            sum(r[2] for r in results) / n, sum(r[3] for r in results) / n)


def box(x1, y1, x2, y2):
    return Box(float(x1), float(y1), float(x2), float(y2))


def fixture_mixed():
    """Two classes, one image: duplicates, a false positive and a miss."""
    gts = [GroundTruthBox(box(0, 0, 100, 100), 0, 0, 0), GroundTruthBox(box(200, 200, 260, 250), 0, 0, 1),
           GroundTruthBox(box(300, 0, 340, 40), 1, 0, 2), GroundTruthBox(box(400, 400, 410, 410), 1, 0, 3)]
    dets = [Detection(box(0, 0, 100, 90), 0.95, 0, 0), Detection(box(5, 5, 100, 100), 0.9, 0, 0),
            Detection(box(205, 200, 262, 248), 0.6, 0, 0), Detection(box(500, 500, 520, 520), 0.7, 0, 0),
            Detection(box(300, 5, 338, 40), 0.85, 1, 0), Detection(box(200, 200, 260, 250), 0.3, 1, 0),
            Detection(box(10, 0, 100, 100), 0.8, 0, 0)]
    return dets, gts


def fixture_sizes():
    """Three images with small, medium and large objects and cross-size near misses."""
    gts, dets = [], []
    specs = [
        (0, box(10, 10, 30, 30), [(box(11, 10, 30, 31), 0.9), (box(0, 0, 40, 40), 0.5)]),
        (0, box(100, 100, 160, 150), [(box(100, 100, 155, 150), 0.8)]),
        (1, box(0, 0, 200, 150), [(box(10, 0, 200, 160), 0.95), (box(0, 0, 120, 150), 0.65)]),
        (1, box(300, 300, 320, 325), []),
        (2, box(50, 50, 90, 100), [(box(52, 50, 90, 95), 0.55), (box(40, 40, 100, 110), 0.75)]),
        (2, box(200, 0, 230, 30), [(box(230, 0, 260, 30), 0.85)]),
    ]
    for n, (img, g, ds) in enumerate(specs):
        gts.append(GroundTruthBox(g, n % 2, img, n))
        dets += [Detection(b, s, n % 2, img) for b, s in ds]
    return dets, gts


def fixture_perfect():
    gts = [GroundTruthBox(box(10 * i, 0, 10 * i + 8, 8 + i), i % 3, i // 4, i) for i in range(10)]
    dets = [Detection(g.box, 1.0, g.class_id, g.image_id) for g in gts]
    return dets, gts


def fixture_single_tp():
    g = box(0, 0, 100, 100)
    return [Detection(box(0, 0, 100, 75), 0.9, 0, 0)], [GroundTruthBox(g, 0, 0, 0)]


FIXTURES = {"mixed": fixture_mixed, "sizes": fixture_sizes, "perfect": fixture_perfect}
