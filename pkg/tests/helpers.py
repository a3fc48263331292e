"""Independent oracles shared by the tests."""
from fractions import Fraction

import numpy as np
import torch


def central_diff(fn, tensor, index=None, eps=1e-6):
    """Central finite differences of scalar ``fn()`` w.r.t. ``tensor`` entries (perturbed in place)."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = []
    for i in idx:
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
        flat[i] = orig
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def analytic_grad(fn, tensor, index=None):
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    g = tensor.grad.detach().reshape(-1).numpy()
    return g if index is None else g[list(index)]


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def otsu_oracle(gray):
    """Exhaustive search over t in 0..255 with exact rational between-class variance."""
    px = np.asarray(gray, dtype=np.int64).ravel()
    n = len(px)
    if len(np.unique(px)) == 1:
        return int(px[0])
    best_t, best = 0, Fraction(-1)
    for t in range(256):
        lo, hi = px[px <= t], px[px > t]
        if len(lo) == 0 or len(hi) == 0:
            score = Fraction(0)
        else:
            w0, w1 = Fraction(len(lo), n), Fraction(len(hi), n)
            mu0, mu1 = Fraction(int(lo.sum()), len(lo)), Fraction(int(hi.sum()), len(hi))
            score = w0 * w1 * (mu0 - mu1) ** 2
        if score > best:
            best_t, best = t, score
    return best_t


def loop_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def loop_overlap(pred, gt):
    """(dsc, iou, recall, precision, f2) from a per-pixel loop, using set-size definitions."""
    tp, fp, fn, _ = loop_confusion(pred, gt)
    a, b = tp + fp, tp + fn  # |pred|, |gt|
    if a == 0 and b == 0:
        return (1.0,) * 5
    dsc = 2 * tp / (a + b)
    iou = tp / (a + b - tp)
    recall = tp / b if b else 0.0
    precision = tp / a if a else 0.0
    if precision + recall == 0:
        f2 = 0.0
    else:
        f2 = 5 * precision * recall / (4 * precision + recall)
    return dsc, iou, recall, precision, f2


def brute_hausdorff(a, b):
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float(np.hypot(*np.shape(a)))
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(1).max(), d.min(0).max()))


def flood_fill_components(mask):
    """8-connected component sizes by explicit stack flood fill."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    sizes = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                stack, count = [(y, x)], 0
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    count += 1
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                stack.append((ny, nx))
                sizes.append(count)
    return sizes


