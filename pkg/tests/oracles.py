"""Reference implementations used only by the tests."""
import numpy as np


def newton_logistic(X, y, w=None, tol=1e-14, max_iter=200):
    """Plain Newton-Raphson on the (fractional) binomial log likelihood."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if w is None else np.asarray(w, float)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        g = X.T @ (w * (y - p))
        H = X.T @ (X * (w * p * (1 - p))[:, None])
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return beta
    raise RuntimeError("newton oracle did not converge")


def qr_least_squares(X, y, w=None):
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    sw = np.ones(len(y)) if w is None else np.sqrt(np.asarray(w, float))
    q, r = np.linalg.qr(X * sw[:, None])
    return np.linalg.solve(r, q.T @ (y * sw))


def sort_quantile(v, p):
    """Linear interpolation between order statistics at position p*(n-1)."""
    s = sorted(v)
    h = (len(s) - 1) * p
    lo = int(np.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])
