"""Independent brute-force oracles used by the self-test battery and the
test suite.  Everything here is deliberately naive: direct summation loops
and central finite differences, sharing no code with the fast paths they
check."""

from __future__ import annotations

import numpy as np


def conv2d_reference(x: np.ndarray, w: np.ndarray, bias=None, padding: int = 0) -> np.ndarray:
    """Six-nested-loop cross-correlation with zero padding."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = h + 2 * padding - kh + 1
    wo = wd + 2 * padding - kw + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i + u, j + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


def ssim_reference(x: np.ndarray, y: np.ndarray, window: np.ndarray,
                   k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Per-pixel double-loop SSIM with valid-region gaussian statistics."""
    h, w = x.shape
    k = window.shape[0]
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            px = x[i : i + k, j : j + k]
            py = y[i : i + k, j : j + k]
            mx = (window * px).sum()
            my = (window * py).sum()
            sxx = (window * px * px).sum() - mx * mx
            syy = (window * py * py).sum() - my * my
            sxy = (window * px * py).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sxx + syy + c2))
            )
    return float(np.mean(vals))


def central_difference(f, arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of scalar f(arr) by central differences, element by element."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries
    from dominating as pure noise."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
