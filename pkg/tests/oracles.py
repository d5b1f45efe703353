"""Independent brute-force oracles. Deliberately loop-based and library-free."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch


def cosine_argmax(points, anchors, eps=1e-12):
    """Assignment by explicit double loop over (point, anchor) pairs."""
    out = []
    for p in points:
        pn = math.sqrt(sum(float(v) * float(v) for v in p)) + eps
        best, best_i = -math.inf, -1
        for i, a in enumerate(anchors):
            an = math.sqrt(sum(float(v) * float(v) for v in a)) + eps
            s = sum(float(x) * float(y) for x, y in zip(p, a)) / (pn * an)
            if s > best:
                best, best_i = s, i
        out.append(best_i)
    return out


def greedy_windows(values, n, crop):
    """Sequential exhaustive scan of every window, with explicit masking."""
    values = [list(map(float, row)) for row in values]
    h, w = len(values), len(values[0])
    hc, wc = crop
    masked = [[False] * w for _ in range(h)]
    picks = []
    for _ in range(n):
        best, best_rc = -math.inf, None
        for r in range(h - hc + 1):
            for c in range(w - wc + 1):
                cells = [(r + i, c + j) for i in range(hc) for j in range(wc)]
                if any(masked[i][j] for i, j in cells):
                    continue
                score = np.mean([values[i][j] for i, j in cells])
                if score > best:
                    best, best_rc = score, (r, c)
        if best_rc is None:
            raise ValueError("no window left")
        picks.append(best_rc)
        r, c = best_rc
        for i in range(hc):
            for j in range(wc):
                masked[r + i][c + j] = True
    return picks


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def weighted_centre(anchor_value, member_values, gates):
    """(v_c + sum s_j v_j) / (1 + sum s_j) in exact rational arithmetic."""
    av = [Fraction(float(v)) for v in anchor_value]
    num = list(av)
    den = Fraction(1)
    for v, s in zip(member_values, gates):
        s = Fraction(float(s))
        den += s
        num = [n + s * Fraction(float(x)) for n, x in zip(num, v)]
    return [float(n / den) for n in num]


def finite_difference_check(loss_fn, params, step=1e-5, sample=None, generator=None):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``params``: list of tensors requiring grad. ``sample``: fraction of scalar entries
    to check (all when None). Returns (max relative error, number of entries checked),
    where relative error is max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            grad = p.grad.reshape(-1)
            n = flat.numel()
            if sample is None:
                idx = range(n)
            else:
                k = max(1, int(round(sample * n)))
                idx = torch.randperm(n, generator=generator)[:k].tolist()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                analytic.append(grad[i].item())
                numeric.append((up - down) / (2 * step))
    a = np.array(analytic)
    nm = np.array(numeric)
    scale = max(np.abs(a).max(), np.abs(nm).max(), 1e-300)
    return float(np.abs(a - nm).max() / scale), len(a)


def lattice_anchor_features(grid, anchor_grid, k):
    """Anchor features on an (h, w, d) grid by explicit loops with edge clamping."""
    h, w = len(grid), len(grid[0])
    nh, nw = anchor_grid
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if k == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    feats = []
    for i in range(nh):
        for j in range(nw):
            r = math.floor((i + 0.5) * h / nh)
            c = math.floor((j + 0.5) * w / nw)
            cells = [(r, c)] + [(min(max(r + dr, 0), h - 1), min(max(c + dc, 0), w - 1)) for dr, dc in offsets]
            d = len(grid[r][c])
            feats.append([sum(float(grid[y][x][t]) for y, x in cells) / len(cells) for t in range(d)])
    return feats
