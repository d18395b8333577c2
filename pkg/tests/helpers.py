"""Finite-difference oracle shared by the gradient tests.

Kept free of any package imports so it stays independent of the code it checks.
"""
import numpy as np

FD_STEP = 1e-6


def numerical_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` with respect to every element of ``x`` (in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def brute_conv(x, w):
    """Nested-loop same-padded cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, o, h, wd))
    for b in range(n):
        for oc in range(o):
            for r in range(h):
                for s in range(wd):
                    acc = 0.0
                    for ic in range(c):
                        for a in range(k):
                            for e in range(k):
                                rr, ss = r + a - p, s + e - p
                                if 0 <= rr < h and 0 <= ss < wd:
                                    acc += x[b, ic, rr, ss] * w[oc, ic, a, e]
                    out[b, oc, r, s] = acc
    return out
