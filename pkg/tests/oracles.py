"""Independent reference implementations used as test oracles.

Each one is written straight from the definitions, loop by loop, and shares
no code with the package beyond plain data containers.
"""

from __future__ import annotations

import math

import numpy as np


def raster_iou(a, b, canvas):
    """IoU by counting pixels of two integer corner boxes (x0, y0, x1, y1), exclusive ends."""
    ma = np.zeros((canvas, canvas), dtype=bool)
    mb = np.zeros((canvas, canvas), dtype=bool)
    ma[a[1]:a[3], a[0]:a[2]] = True
    mb[b[1]:b[3], b[0]:b[2]] = True
    union = np.logical_or(ma, mb).sum()
    return 0.0 if union == 0 else np.logical_and(ma, mb).sum() / union


def naive_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return 0.0 if inter <= 0 or union <= 0 else inter / union


def naive_loss(raw, gts, g, anchors, K, tau, lam_cls, lam_coor, lam_obj, eps=1e-7):
    """Class, coordinate and objectness losses evaluated anchor by anchor from a raw [g, g, A, 5+K] float64 array.

    ``gts`` is a list of (cx, cy, w, h, class_id).  Assignment: the gt's center
    cell; colliding gts resolved in favour of the larger area (first index on ties);
    anchor = argmax of centered IoU, recorded only if > tau.
    """
    A = len(anchors)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    # assignment
    t = [[[0.0] * A for _ in range(g)] for _ in range(g)]
    target = {}
    taken = set()
    order = sorted(range(len(gts)), key=lambda k: (-(gts[k][2] * gts[k][3]), k))
    for k in order:
        cx, cy, w, h, c = gts[k]
        i, j = min(int(cy * g), g - 1), min(int(cx * g), g - 1)
        if (i, j) in taken:
            continue
        taken.add((i, j))
        best_a, best = None, -1.0
        for a, (aw, ah) in enumerate(anchors):
            v = naive_iou((0, 0, w, h), (0, 0, aw, ah))
            if v > best:
                best, best_a = v, a
        if best > tau:
            t[i][j][best_a] = 1.0
            target[(i, j, best_a)] = (cx, cy, w, h, c)

    l_cls = l_coor = l_obj = 0.0
    for i in range(g):
        for j in range(g):
            for a in range(A):
                v = raw[i, j, a]
                p_obj = sig(v[4])
                logits = v[5:]
                mx = max(logits)
                z = sum(math.exp(x - mx) for x in logits)
                p_cls = [math.exp(x - mx) / z for x in logits]
                tt = t[i][j][a]
                l_obj += -(tt * math.log(max(p_obj, eps)) + (1 - tt) * math.log(max(1 - p_obj, eps)))
                if (i, j, a) in target:
                    cx, cy, w, h, c = target[(i, j, a)]
                    l_cls += -math.log(max(p_cls[c - 1], eps))
                    bx = j / g + sig(v[0]) / g
                    by = i / g + sig(v[1]) / g
                    bw = anchors[a][0] * math.exp(v[2])
                    bh = anchors[a][1] * math.exp(v[3])
                    l_coor += (cx - bx) ** 2 + (cy - by) ** 2 + (w - bw) ** 2 + (h - bh) ** 2
    return lam_cls * l_cls + lam_coor * l_coor + lam_obj * l_obj


def enumerate_ap(flags, n_gt):
    """All-point AP by explicit PR enumeration: for each recall level take the best precision at or beyond it."""
    points = []
    tp = fp = 0
    for f in flags:
        tp += bool(f)
        fp += not f
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev_r:
            continue
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * best
        prev_r = r
    return ap


def lloyd(points, init, iters=100):
    c = np.array(init, dtype=np.float64)
    for _ in range(iters):
        d = ((points[:, None, :] - c[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        new = np.array([points[lab == k].mean(0) if np.any(lab == k) else c[k] for k in range(len(c))])
        if np.allclose(new, c):
            break
        c = new
    return c
