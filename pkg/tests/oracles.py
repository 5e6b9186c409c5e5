"""Literal, loop-based reference evaluators. Deliberately naive and independent of the package."""
import math


def softmax_list(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def oc_mask_literal(z, tags):
    best = 0
    for k in range(1, len(z)):
        if z[k] > z[best]:
            best = k
    return 1 if (best != 0 and best not in tags) else 0


def anchor_literal(z, tags):
    cands = [0] + sorted(tags)
    best = cands[0]
    for k in cands[1:]:
        if z[k] > z[best]:
            best = k
    return best


def ada_ic_literal(z, tags, m, t):
    p = softmax_list(z)
    a = anchor_literal(z, tags)
    ic = set()
    for k in [0] + sorted(tags):
        if k == a or p[a] - p[k] * m[a][k] < t:
            ic.add(k)
    return ic


def oc_group_literal(num_total, tags):
    return {k for k in range(1, num_total) if k not in tags}


def rect_loss_literal(z, ic, oc, delta):
    a = sum(math.exp(-z[k]) for k in ic)
    b = sum(math.exp(z[l] + delta) for l in oc)
    return math.log(1.0 + a * b)


def cooccurrence_literal(tag_lists, c):
    n = len(tag_lists)
    out = [[0.0] * (c + 1) for _ in range(c + 1)]
    for k in range(c + 1):
        for l in range(c + 1):
            cnt = 0
            for tags in tag_lists:
                s = set(tags) | {0}
                if k in s and l in s:
                    cnt += 1
            out[k][l] = cnt / n
    return out


def miou_literal(preds, gts, num_total, ignore=255):
    tp = [0] * num_total
    fp = [0] * num_total
    fn = [0] * num_total
    for pred, gt in zip(preds, gts):
        for prow, grow in zip(pred, gt):
            for p, g in zip(prow, grow):
                if g == ignore:
                    continue
                if p == g:
                    tp[g] += 1
                else:
                    fp[p] += 1
                    fn[g] += 1
    ious = []
    for c in range(num_total):
        d = tp[c] + fp[c] + fn[c]
        ious.append(tp[c] / d if d else None)
    vals = [v for v in ious if v is not None]
    return ious, sum(vals) / len(vals)


def ce_literal(logits, pseudo, ignore=255):
    k, h, w = len(logits), len(logits[0]), len(logits[0][0])
    tot, n = 0.0, 0
    for y in range(h):
        for x in range(w):
            if pseudo[y][x] == ignore:
                continue
            col = [logits[c][y][x] for c in range(k)]
            p = softmax_list(col)
            tot -= math.log(p[pseudo[y][x]])
            n += 1
    return tot / n if n else 0.0
