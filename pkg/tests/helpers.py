"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written as plain scalar loops over numpy
float64 so it shares no code path with the vectorized implementations.
"""
from __future__ import annotations

import math

import numpy as np


def unit_grid(rng: np.random.Generator, d: int, c: int) -> np.ndarray:
    """Random (d, d, c) float64 grid of unit-normalized feature vectors."""
    g = rng.normal(size=(d, d, c))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def naive_info_nce(q, k_pos, negatives, tau: float) -> float:
    num = math.exp(float(np.dot(q, k_pos)) / tau)
    denom = num + sum(math.exp(float(np.dot(q, n)) / tau) for n in negatives)
    return -math.log(num / denom)


def naive_within_image(fa, fb, ya, yb, tau: float) -> float:
    """Quadruple-loop reference for the within-image dense loss."""
    fa = fa.reshape(-1, fa.shape[-1]).astype(np.float64)
    fb = fb.reshape(-1, fb.shape[-1]).astype(np.float64)
    ya = np.asarray(ya).reshape(-1)
    yb = np.asarray(yb).reshape(-1)
    n = len(fa)
    total, n_valid = 0.0, 0
    for p in range(n):
        positives = [q for q in range(n) if yb[q] == ya[p]]
        if not positives:
            continue
        denom = sum(math.exp(float(np.dot(fa[p], fb[k])) / tau) for k in range(n))
        s = 0.0
        for q in positives:
            e_pq = math.exp(float(np.dot(fa[p], fb[q])) / tau)
            s += math.log(e_pq / denom)
        total += -s / len(positives)
        n_valid += 1
    return total / n_valid if n_valid else 0.0


def naive_cross_image(fa, fb, fj, ya, yb, yj, tau: float) -> float:
    """Nested-loop reference for the cross-image dense loss."""
    fa = fa.reshape(-1, fa.shape[-1]).astype(np.float64)
    fb = fb.reshape(-1, fb.shape[-1]).astype(np.float64)
    fj = fj.reshape(-1, fj.shape[-1]).astype(np.float64)
    ya = np.asarray(ya).reshape(-1)
    yb = np.asarray(yb).reshape(-1)
    yj = np.asarray(yj).reshape(-1)
    n = len(fa)
    total, n_valid = 0.0, 0
    for p in range(n):
        pos_b = [q for q in range(n) if yb[q] == ya[p]]
        pos_j = [q for q in range(n) if yj[q] == ya[p]]
        n_pos = len(pos_b) + len(pos_j)
        if n_pos == 0:
            continue
        denom = sum(math.exp(float(np.dot(fa[p], fb[k])) / tau) for k in range(n))
        denom += sum(math.exp(float(np.dot(fa[p], fj[k])) / tau) for k in pos_j)
        s = 0.0
        for q in pos_b:
            s += math.log(math.exp(float(np.dot(fa[p], fb[q])) / tau) / denom)
        for q in pos_j:
            s += math.log(math.exp(float(np.dot(fa[p], fj[q])) / tau) / denom)
        total += -s / n_pos
        n_valid += 1
    return total / n_valid if n_valid else 0.0


def naive_downsample(label: np.ndarray, d: int) -> np.ndarray:
    """Per-block histogram argmax; ties resolve to the lowest class."""
    h, w = label.shape
    bh, bw = h // d, w // d
    out = np.zeros((d, d), dtype=np.int64)
    for i in range(d):
        for j in range(d):
            counts = {}
            for r in range(i * bh, (i + 1) * bh):
                for c in range(j * bw, (j + 1) * bw):
                    counts[label[r, c]] = counts.get(label[r, c], 0) + 1
            best = max(counts.values())
            out[i, j] = min(k for k, v in counts.items() if v == best)
    return out


def naive_confusion_f1(pred: np.ndarray, target: np.ndarray,
                       classes) -> dict[int, float]:
    """Per-class F1 from scalar-counted confusion entries; absent classes map to nan."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    scores = {}
    for c in classes:
        tp = fp = fn = 0
        for p, t in zip(pred.tolist(), target.tolist()):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        scores[c] = float("nan") if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return scores


def point_in_polygon(x: float, y: float, vertices: np.ndarray) -> bool:
    """Even-odd rule via a scalar crossing count of a ray cast to the right."""
    inside = False
    v = np.asarray(vertices, dtype=np.float64)
    for i in range(len(v)):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % len(v)]
        if y1 == y2:
            continue
        lo, hi = (y1, y2) if y1 < y2 else (y2, y1)
        if lo <= y < hi:
            t = (y - y1) / (y2 - y1)
            if x < x1 + t * (x2 - x1):
                inside = not inside
    return inside


def finite_difference_gradient(fn, tensors, eps: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of a scalar torch function per input tensor."""
    import torch

    grads = []
    for idx, t in enumerate(tensors):
        g = np.zeros(t.numel(), dtype=np.float64)
        flat = t.reshape(-1)
        for i in range(t.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
            plus = float(fn(*tensors).detach())
            with torch.no_grad():
                flat[i] = orig - eps
            minus = float(fn(*tensors).detach())
            with torch.no_grad():
                flat[i] = orig
            g[i] = (plus - minus) / (2 * eps)
        grads.append(g.reshape(tuple(t.shape)))
    return grads


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
