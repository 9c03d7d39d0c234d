"""Loop-based reference implementations used as test oracles.

The metric oracles work from the raw label maps, never from a confusion
matrix, so they check the matrix path independently.
"""

import math

import numpy as np


def _pairs(pred_pre, pred_post, gt_pre, gt_post):
    out = []
    for pred, gt in ((pred_pre, gt_pre), (pred_post, gt_post)):
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            out.append((g, p))
    return out


def oa(pairs):
    return 100.0 * sum(1 for g, p in pairs if g == p) / len(pairs)


def binary_ious(pairs):
    nc_inter = sum(1 for g, p in pairs if g == 0 and p == 0)
    nc_union = sum(1 for g, p in pairs if g == 0 or p == 0)
    c_inter = sum(1 for g, p in pairs if g != 0 and p != 0)
    c_union = sum(1 for g, p in pairs if g != 0 or p != 0)
    iou_nc = nc_inter / nc_union if nc_union else 1.0
    iou_c = c_inter / c_union if c_union else 1.0
    return iou_nc, iou_c


def miou(pairs):
    a, b = binary_ious(pairs)
    return 100.0 * (a + b) / 2


def sek(pairs, num_classes):
    kept = [(g, p) for g, p in pairs if not (g == 0 and p == 0)]
    if not kept:
        return 0.0
    n = len(kept)
    rho = sum(1 for g, p in kept if g == p) / n
    eta = 0.0
    for k in range(num_classes):
        eta += (sum(1 for g, _ in kept if g == k) / n) * (sum(1 for _, p in kept if p == k) / n)
    kappa = 0.0 if eta == 1 else (rho - eta) / (1 - eta)
    _, iou_c = binary_ious(pairs)
    return 100.0 * kappa * math.exp(iou_c) / math.e


def fscd(pairs):
    tp = sum(1 for g, p in pairs if g != 0 and p == g)
    pred_c = sum(1 for _, p in pairs if p != 0)
    gt_c = sum(1 for g, _ in pairs if g != 0)
    prec = tp / pred_c if pred_c else 0.0
    rec = tp / gt_c if gt_c else 0.0
    return 0.0 if prec + rec == 0 else 100.0 * 2 * prec * rec / (prec + rec)


def all_metrics(pred_pre, pred_post, gt_pre, gt_post, num_classes):
    pairs = _pairs(pred_pre, pred_post, gt_pre, gt_post)
    return {"oa": oa(pairs), "f1": fscd(pairs), "miou": miou(pairs), "sek": sek(pairs, num_classes)}


def multi_sample_metrics(quads, num_classes):
    pairs = []
    for q in quads:
        pairs += _pairs(*q)
    return {"oa": oa(pairs), "f1": fscd(pairs), "miou": miou(pairs), "sek": sek(pairs, num_classes)}


def bce_loop(logits, target):
    total = 0.0
    flat_l, flat_t = logits.ravel().tolist(), target.ravel().tolist()
    for x, y in zip(flat_l, flat_t):
        p = 1.0 / (1.0 + math.exp(-x))
        total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total / len(flat_l)


def ce_loop(logits, gt):
    """Mean softmax cross-entropy over pixels with gt != 0. logits: (C, H, W)."""
    C, H, W = logits.shape
    total, n = 0.0, 0
    for y in range(H):
        for x in range(W):
            g = int(gt[y, x])
            if g == 0:
                continue
            m = max(logits[c, y, x] for c in range(C))
            lse = m + math.log(sum(math.exp(logits[c, y, x] - m) for c in range(C)))
            total += lse - logits[g, y, x]
            n += 1
    return total / n if n else 0.0


def cost_volume(tokens, text, grid):
    """Per-pixel, per-class cosine similarity with explicit loops."""
    tokens = tokens.double().numpy()
    text = text.double().numpy()
    B, N, D = tokens.shape
    C = text.shape[-2]
    out = np.zeros((B, C, N))
    for b in range(B):
        for n in range(N):
            f = tokens[b, n]
            fn = math.sqrt(sum(v * v for v in f))
            for c in range(C):
                t = text[b, c] if text.ndim == 3 else text[c]
                tn = math.sqrt(sum(v * v for v in t))
                dot = sum(x * y for x, y in zip(f, t))
                out[b, c, n] = 0.0 if fn == 0 or tn == 0 else dot / (fn * tn)
    return out.reshape(B, C, *grid)
