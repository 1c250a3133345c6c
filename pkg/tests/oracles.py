"""Independent brute-force reference implementations used by the tests.

None of these share code with the package; they favour obviousness over speed.
"""
import itertools
from fractions import Fraction

import numpy as np


def pair_count_auroc(scores, labels) -> Fraction:
    """Mann-Whitney statistic by counting every (positive, negative) pair."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def isotonic_by_enumeration(y, w=None) -> list[Fraction]:
    """Best non-decreasing fit over all contiguous block partitions, exact arithmetic.

    The least-squares isotonic solution is piecewise constant with each piece
    equal to the weighted mean of its block, so enumerating every way of
    cutting the sequence into blocks and keeping the cheapest monotone
    candidate is an exhaustive search over the monotone step functions that
    can be optimal.
    """
    y = [Fraction(v) for v in y]
    w = [Fraction(1)] * len(y) if w is None else [Fraction(v) for v in w]
    n = len(y)
    best, best_cost = None, None
    for cuts in itertools.product((False, True), repeat=n - 1):
        blocks, start = [], 0
        for i, cut in enumerate(cuts, start=1):
            if cut:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        fit = []
        for lo, hi in blocks:
            m = sum(w[i] * y[i] for i in range(lo, hi)) / sum(w[lo:hi])
            fit.extend([m] * (hi - lo))
        if any(a > b for a, b in zip(fit, fit[1:])):
            continue
        cost = sum(wi * (yi - fi) ** 2 for wi, yi, fi in zip(w, y, fit))
        if best_cost is None or cost < best_cost:
            best, best_cost = fit, cost
    return best


def exhaustive_root_split(X, y, min_leaf=1, lam=0.0):
    """Best first split of a logistic boosting tree by trying every threshold.

    Gradients and hessians are taken at the log-odds prior. Returns a list of
    (gain, feature, threshold, left mask) sorted by decreasing gain.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = y.mean()
    g = p - y
    h = np.full(len(y), p * (1 - p))
    total = g.sum() ** 2 / (h.sum() + lam)
    out = []
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2
            left = X[:, f] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            gain = (g[left].sum() ** 2 / (h[left].sum() + lam)
                    + g[~left].sum() ** 2 / (h[~left].sum() + lam) - total)
            out.append((gain, f, thr, left))
    out.sort(key=lambda t: -t[0])
    return out


def finite_difference_grads(loss_fn, params: dict, eps: float = 1e-6) -> dict:
    """Central differences of a scalar loss with respect to every parameter entry."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_fn()
            arr[idx] = old - eps
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
