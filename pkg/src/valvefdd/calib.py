"""Post-hoc probability calibration and calibration metrics."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

METHODS = ("identity", "platt", "isotonic")


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.float64)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be non-empty and of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("calibration needs both classes present")
    return s, y


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Calibrator:
    """Monotone map from a raw score in [0, 1] to a probability."""

    kind: str = "identity"
    a: float = 1.0
    b: float = 0.0
    x: tuple = ()
    y: tuple = ()

    def __call__(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=np.float64)
        if self.kind == "identity":
            return s.copy()
        if self.kind == "platt":
            return _sigmoid(self.a * s + self.b)
        if self.kind == "isotonic":
            return np.interp(s, np.asarray(self.x), np.asarray(self.y))
        raise ValueError(f"unknown calibrator kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": float(self.a), "b": float(self.b),
                "x": [float(v) for v in self.x], "y": [float(v) for v in self.y]}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibrator":
        return cls(d["kind"], d["a"], d["b"], tuple(d["x"]), tuple(d["y"]))


def fit_platt(scores, labels, max_iter: int = 100, tol: float = 1e-12) -> Calibrator:
    """Logistic fit p = sigmoid(a*s + b) minimising the log-loss.

    Uses Newton steps with step halving, which converge far faster than
    plain gradient descent on this two-parameter convex problem.
    """
    s, y = _check_binary(scores, labels)
    X = np.column_stack([s, np.ones_like(s)])

    def nll(theta):
        z = X @ theta
        return float(np.sum(np.logaddexp(0.0, z) - y * z))

    theta = np.zeros(2)
    f = nll(theta)
    for _ in range(max_iter):
        p = _sigmoid(X @ theta)
        grad = X.T @ (p - y)
        hess = X.T @ (X * (p * (1 - p))[:, None]) + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = nll(cand)
            if fc <= f:
                break
            t *= 0.5
        else:
            break
        done = f - fc <= tol * max(1.0, abs(f))
        theta, f = cand, fc
        if done:
            break
    return Calibrator("platt", a=float(theta[0]), b=float(theta[1]))


def pava(x, y, w=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted isotonic (non-decreasing) least-squares fit.

    Points with equal ``x`` are pooled first. Returns the distinct sorted x
    values and the fitted value at each.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    ux, inv = np.unique(x, return_inverse=True)
    inv = inv.ravel()
    ws = np.bincount(inv, weights=w, minlength=len(ux))
    sums = np.bincount(inv, weights=w * y, minlength=len(ux))
    # stack of blocks: (weighted sum, weight, count of distinct x)
    bsum, bw, bn = [], [], []
    for i in range(len(ux)):
        bsum.append(sums[i])
        bw.append(ws[i])
        bn.append(1)
        while len(bw) > 1 and bsum[-2] * bw[-1] >= bsum[-1] * bw[-2]:
            s2, w2, n2 = bsum.pop(), bw.pop(), bn.pop()
            bsum[-1] += s2
            bw[-1] += w2
            bn[-1] += n2
    fitted = np.repeat(np.array(bsum) / np.array(bw), bn)
    return ux, fitted


def fit_isotonic(scores, labels) -> Calibrator:
    s, y = _check_binary(scores, labels)
    ux, fitted = pava(s, y)
    return Calibrator("isotonic", x=tuple(ux.tolist()), y=tuple(fitted.tolist()))


def fit_calibrator(scores, labels, method: str) -> Calibrator:
    if method == "identity":
        _check_binary(scores, labels)
        return Calibrator("identity")
    if method == "platt":
        return fit_platt(scores, labels)
    if method == "isotonic":
        return fit_isotonic(scores, labels)
    raise ValueError(f"unknown calibration method {method!r}")


@dataclass(frozen=True)
class OvaCalibrator:
    """One-vs-all per-class calibrators followed by row renormalisation."""

    calibrators: tuple

    def __call__(self, scores) -> np.ndarray:
        S = np.asarray(scores, dtype=np.float64)
        if S.ndim != 2 or S.shape[1] != len(self.calibrators):
            raise ValueError(f"expected scores of shape (n, {len(self.calibrators)})")
        P = np.column_stack([c(S[:, k]) for k, c in enumerate(self.calibrators)])
        tot = P.sum(axis=1, keepdims=True)
        K = P.shape[1]
        return np.where(tot > 0, P / np.where(tot > 0, tot, 1.0), 1.0 / K)

    def to_dict(self) -> dict:
        return {"ova": [c.to_dict() for c in self.calibrators]}

    @classmethod
    def from_dict(cls, d: dict) -> "OvaCalibrator":
        return cls(tuple(Calibrator.from_dict(c) for c in d["ova"]))


def calibrate_multiclass(scores, labels, method: str) -> OvaCalibrator:
    """Fit one binary calibrator per class column (class k vs rest).

    ``labels`` are column indices in ``[0, K)``.
    """
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ValueError("need a score matrix with K >= 2 columns")
    K = S.shape[1]
    present = set(np.unique(y).tolist())
    missing = [k for k in range(K) if k not in present]
    if missing:
        raise ValueError(f"classes {missing} absent from calibration set")
    return OvaCalibrator(tuple(fit_calibrator(S[:, k], (y == k).astype(int), method) for k in range(K)))


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityData:
    mean_pred: np.ndarray  # e_i
    frac_pos: np.ndarray  # o_i
    mass: np.ndarray  # pi_i
    n_bins: int
    strategy: str = "quantile"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin,mean_predicted,fraction_positive,mass\n")
        for i, (e, o, m) in enumerate(zip(self.mean_pred, self.frac_pos, self.mass)):
            buf.write(f"{i},{e!r},{o!r},{m!r}\n")
        return buf.getvalue()


def reliability(probs, labels, n_bins: int = 5) -> ReliabilityData:
    """Quantile-binned reliability data; empty bins are dropped."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("need non-empty probabilities and labels of equal length")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.quantile(p, np.linspace(0.0, 1.0, n_bins + 1))
    ids = np.searchsorted(edges[1:-1], p, side="left")
    cnt = np.bincount(ids, minlength=n_bins).astype(np.float64)
    sp = np.bincount(ids, weights=p, minlength=n_bins)
    sy = np.bincount(ids, weights=y, minlength=n_bins)
    nz = cnt > 0
    return ReliabilityData(sp[nz] / cnt[nz], sy[nz] / cnt[nz], cnt[nz] / p.size, n_bins)


def top_label(P, labels) -> tuple[np.ndarray, np.ndarray]:
    """Top-label confidence and correctness for multiclass probabilities."""
    P = np.asarray(P, dtype=np.float64)
    pred = np.argmax(P, axis=1)
    return P[np.arange(len(P)), pred], (pred == np.asarray(labels)).astype(np.float64)


def ece(rel: ReliabilityData) -> float:
    if len(rel.mass) == 0:
        raise ValueError("empty reliability data")
    return float(np.sum(rel.mass * np.abs(rel.frac_pos - rel.mean_pred)))


def mce(rel: ReliabilityData) -> float:
    if len(rel.mass) == 0:
        raise ValueError("empty reliability data")
    return float(np.max(np.abs(rel.frac_pos - rel.mean_pred)))


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("need non-empty probabilities and labels of equal length")
    return float(np.mean((y - p) ** 2))


def calibration_table(probs, labels, bins=(5, 10, 15, 20)) -> list[dict]:
    """ECE/MCE/Brier for binary probabilities across several bin counts."""
    rows = []
    for nb in bins:
        rel = reliability(probs, labels, nb)
        rows.append({"n_bins": nb, "ece": ece(rel), "mce": mce(rel), "brier": brier(probs, labels)})
    return rows
