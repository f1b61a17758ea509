"""Slow, independent reference implementations used as test oracles.

Everything here is plain Python with exact rational arithmetic where it matters, and
shares nothing with the package beyond the keypoint name list. Thresholds are read
as decimals, so 0.3 means exactly 3/10.
"""

import math
from fractions import Fraction

import numpy as np

from mtrcnn.geometry import KEYPOINT_NAMES


def box_iou(a, b):
    """Exact IoU of two (x0, y0, x1, y1) tuples with rational coordinates."""
    ax0, ay0, ax1, ay1 = map(Fraction, a)
    bx0, by0, bx1, by1 = map(Fraction, b)
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    inter = w * h if w > 0 and h > 0 else Fraction(0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def as_tuple(box):
    return (box.x_min, box.y_min, box.x_max, box.y_max)


def rank(scores):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def ap_from_flags(scores, tp, n_pos, method="continuous"):
    """AP from ranked TP flags, with points only after each block of tied scores."""
    if n_pos == 0:
        return 0.0
    points = []
    for t in sorted(set(scores), reverse=True):
        sel = [f for s, f in zip(scores, tp) if s >= t]
        k = sum(sel)
        points.append((Fraction(k, n_pos), Fraction(k, len(sel))))
    total = Fraction(0)
    prev_r = Fraction(0)
    for i, (r, p) in enumerate(points):
        if method == "raw":
            level = p
        else:
            level = max(q for _, q in points[i:])
        total += (r - prev_r) * level
        prev_r = r
    return float(total)


def greedy_box_flags(preds, gts, thr=0.5):
    """TP flag per prediction (input order) for greedy matching in rank order.

    ``preds`` is a list of (image, score, box tuple); ``gts`` maps image to box tuples.
    """
    thr = Fraction(str(thr))
    used = {img: [False] * len(b) for img, b in gts.items()}
    flags = [False] * len(preds)
    for i in rank([p[1] for p in preds]):
        img, _, box = preds[i]
        best, best_o = None, None
        for j, g in enumerate(gts.get(img, ())):
            o = box_iou(box, g)
            if used[img][j] or not o > thr:
                continue
            if best is None or o > best_o:
                best, best_o = j, o
        if best is not None:
            used[img][best] = True
            flags[i] = True
    return flags


def detection_ap(preds, gts, thr=0.5, method="continuous"):
    flags = greedy_box_flags(preds, gts, thr)
    n_pos = sum(len(v) for v in gts.values())
    return ap_from_flags([p[1] for p in preds], flags, n_pos, method)


def torso(kps):
    """Shoulder-midpoint to hip-midpoint distance from (x, y, v) triples, None if undefined."""
    rs, ls, rh, lh = (kps[KEYPOINT_NAMES.index(n)] for n in ("R_Shoulder", "L_Shoulder", "R_Hip", "L_Hip"))
    if not all(k[2] for k in (rs, ls, rh, lh)):
        return None
    h = math.hypot((rs[0] + ls[0]) / 2 - (rh[0] + lh[0]) / 2, (rs[1] + ls[1]) / 2 - (rh[1] + lh[1]) / 2)
    return h if h > 0 else None


def apk_flags(preds, people, k, alpha=0.2):
    """TP flags for keypoint type ``k``; ``preds`` are (image, score, (x, y)),
    ``people`` maps image to lists of 13 (x, y, v) triples."""
    table = {img: [(p, torso(p)) for p in plist] for img, plist in people.items()}
    table = {img: [(p, alpha * h) for p, h in rows if h is not None] for img, rows in table.items()}
    used = {img: [False] * len(rows) for img, rows in table.items()}
    flags = [False] * len(preds)
    for i in rank([p[1] for p in preds]):
        img, _, (x, y) = preds[i]
        best, best_rel = None, None
        for j, (person, radius) in enumerate(table.get(img, ())):
            px, py, v = person[k]
            d = math.hypot(px - x, py - y)
            if used[img][j] or not v or not d < radius:
                continue
            if best is None or d / radius < best_rel:
                best, best_rel = j, d / radius
        if best is not None:
            used[img][best] = True
            flags[i] = True
    return flags


def apk_positives(people, k):
    return sum(1 for plist in people.values() for p in plist if torso(p) is not None and p[k][2])


def all_matchings(n_pred, n_gt):
    """Every injective partial assignment of predictions to ground truths."""
    out = [{}]
    for i in range(n_pred):
        grown = []
        for m in out:
            grown.append(m)
            for j in range(n_gt):
                if j not in m.values():
                    grown.append({**m, i: j})
        out = grown
    return out


def exhaustive_greedy_flags(preds, gts, thr=0.5):
    """Greedy matching recovered by enumeration.

    Images are independent, so each is solved separately: among all feasible injective
    assignments, pick the one that is lexicographically best when read in rank order,
    each prediction preferring (matched, higher IoU, lower ground-truth index).
    """
    flags = [False] * len(preds)
    order = rank([p[1] for p in preds])
    for img in {p[0] for p in preds}:
        mine = [i for i in order if preds[i][0] == img]
        g = gts.get(img, ())
        iou = {(i, j): box_iou(preds[i][2], g[j]) for i in mine for j in range(len(g))}
        feasible = []
        for m in all_matchings(len(mine), len(g)):
            if all(iou[(mine[a], j)] > Fraction(str(thr)) for a, j in m.items()):
                feasible.append(m)

        def key(m):
            return [(1, iou[(mine[a], m[a])], -m[a]) if a in m else (0, 0, 0) for a in range(len(mine))]

        best = max(feasible, key=key)
        for a in best:
            flags[mine[a]] = True
    return flags


def nms_keep(boxes, scores, thr):
    keep = []
    for i in rank(scores):
        if all(not box_iou(boxes[i], boxes[j]) > Fraction(str(thr)) for j in keep):
            keep.append(i)
    return keep


def monotone(scores):
    s = np.asarray(scores, dtype=np.float64)
    return np.exp(2.0 * s) + s**3 + 5.0


# random small cases


def random_box(rng, span=12):
    x0, y0 = rng.integers(0, span, 2)
    w, h = rng.integers(2, 8, 2)
    return (int(x0), int(y0), int(x0 + w), int(y0 + h))


def random_detection_case(rng):
    imgs = ["a", "b"]
    gts = {img: [random_box(rng) for _ in range(rng.integers(0, 3))] for img in imgs}
    while sum(len(v) for v in gts.values()) > 4:
        gts["b"].pop()
    preds = []
    for _ in range(rng.integers(0, 7)):
        img = imgs[rng.integers(2)]
        if gts[img] and rng.random() < 0.6:
            g = gts[img][rng.integers(len(gts[img]))]
            d = rng.integers(-2, 3, 4)
            box = (g[0] + d[0], g[1] + d[1], max(g[2] + d[2], g[0] + d[0] + 1), max(g[3] + d[3], g[1] + d[1] + 1))
        else:
            box = random_box(rng)
        preds.append((img, float(rng.integers(0, 4)), tuple(int(v) for v in box)))
    return preds, gts


def random_people(rng, n_max=2):
    """Up to ``n_max`` people per image as lists of 13 (x, y, v) triples, some keypoints hidden."""
    people = {}
    for img in ("a", "b"):
        people[img] = []
        for _ in range(rng.integers(0, n_max + 1)):
            x, y = (int(v) for v in rng.integers(0, 8, 2))
            kps = [(float(x + rng.integers(0, 6)), float(y + rng.integers(0, 10)), bool(rng.random() < 0.85)) for _ in range(13)]
            people[img].append(kps)
    return people


def random_keypoint_preds(rng, people, k, n_max=6):
    """(image, score, (x, y)) guesses for keypoint type ``k``, half of them near a true keypoint."""
    preds = []
    for _ in range(rng.integers(0, n_max + 1)):
        img = ("a", "b")[rng.integers(2)]
        if people[img] and rng.random() < 0.5:
            px, py, _ = people[img][rng.integers(len(people[img]))][k]
            xy = (px + float(rng.choice([0.0, 0.25, 0.5, 1.0, 2.0])), py)
        else:
            xy = tuple(float(v) for v in rng.integers(0, 16, 2) + rng.choice([0.0, 0.5], 2))
        preds.append((img, float(rng.integers(0, 4)), xy))
    return preds
