"""Histogram gradient-boosted decision trees (logistic and softmax losses).

Features are discretised into at most ``n_bins`` quantile bins. Trees grow
best-first: the leaf whose best split has the highest gain is split next,
subject to ``max_depth`` and ``max_leaf_nodes``. A split at bin ``b`` sends
samples with ``bin <= b`` (raw value ``<= edge[b]``) to the left child.

Identical (row, label) pairs are merged into one row carrying the summed
weight before fitting, so integer sample weights and duplicated rows give
bit-identical ensembles.
"""
from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container


@dataclass(frozen=True)
class GbtConfig:
    max_iter: int = 88
    max_depth: int = 6
    max_leaf_nodes: int = 23
    min_samples_leaf: float = 16
    learning_rate: float = 0.05
    l2_regularization: float = 0.0
    n_bins: int = 255
    loss: str = "logistic"

    def __post_init__(self):
        for name in ("max_iter", "max_depth", "max_leaf_nodes", "min_samples_leaf", "learning_rate", "n_bins"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_regularization < 0:
            raise ValueError("l2_regularization must be >= 0")
        if self.max_leaf_nodes < 2:
            raise ValueError("max_leaf_nodes must be >= 2")
        if not 2 <= self.n_bins <= 256:
            raise ValueError("n_bins must be in [2, 256]")
        if self.loss not in ("logistic", "softmax"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


BINARY_DEFAULTS = GbtConfig()
MULTICLASS_DEFAULTS = GbtConfig(max_iter=105, max_depth=9, max_leaf_nodes=50, min_samples_leaf=21,
                                learning_rate=0.21, l2_regularization=0.0, loss="softmax")


def bin_edges(x: np.ndarray, n_bins: int, w: np.ndarray | None = None) -> np.ndarray:
    """Split thresholds for one feature.

    With at most ``n_bins`` distinct values every midpoint between
    neighbouring values is a threshold; otherwise thresholds sit at weighted
    quantiles, again placed midway between adjacent distinct values.
    """
    vals, inv = np.unique(x, return_inverse=True)
    if len(vals) <= 1:
        return np.zeros(0)
    mids = (vals[:-1] + vals[1:]) / 2.0
    if len(vals) <= n_bins:
        return mids
    w = np.ones(len(x)) if w is None else np.asarray(w, dtype=np.float64)
    cw = np.cumsum(np.bincount(inv, weights=w, minlength=len(vals)))
    levels = cw[-1] * np.arange(1, n_bins) / n_bins
    pos = np.searchsorted(cw, levels, side="left")
    pos = np.unique(np.clip(pos, 0, len(vals) - 2))
    return mids[pos]


def apply_bins(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.uint8)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


@dataclass
class Tree:
    feature: np.ndarray  # -1 for leaves
    threshold: np.ndarray  # bin index; left iff bin <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    weight: np.ndarray  # summed sample weight reaching the node
    depth: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, B: np.ndarray) -> np.ndarray:
        node = np.zeros(len(B), dtype=np.int64)
        for _ in range(int(self.depth.max()) + 1):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            idx = np.flatnonzero(inner)
            go_left = B[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
        return node

    def predict(self, B: np.ndarray) -> np.ndarray:
        return self.value[self.apply(B)]


@dataclass
class _Split:
    gain: float
    feature: int
    bin: int
    gl: float
    hl: float
    wl: float


def _best_split(Bn, g, h, w, n_edges, cfg: GbtConfig, nb: int):
    """Best split of one node from its gradient histograms."""
    n, d = Bn.shape
    flat = (Bn.astype(np.int64) + np.arange(d) * nb).ravel()
    size = d * nb
    G = np.bincount(flat, weights=np.repeat(g, d), minlength=size).reshape(d, nb)
    H = np.bincount(flat, weights=np.repeat(h, d), minlength=size).reshape(d, nb)
    W = np.bincount(flat, weights=np.repeat(w, d), minlength=size).reshape(d, nb)
    Gt, Ht, Wt = g.sum(), h.sum(), w.sum()
    lam = cfg.l2_regularization
    GL, HL, WL = np.cumsum(G, axis=1), np.cumsum(H, axis=1), np.cumsum(W, axis=1)
    GR, HR, WR = Gt - GL, Ht - HL, Wt - WL
    valid = np.arange(nb)[None, :] < n_edges[:, None]
    valid &= (WL >= cfg.min_samples_leaf) & (WR >= cfg.min_samples_leaf)
    valid &= (HL + lam > 1e-12) & (HR + lam > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - Gt ** 2 / (Ht + lam)
    gain = np.where(valid, gain, -np.inf)
    # argmax over the row-major flattening = lowest feature, then lowest bin on ties
    k = int(np.argmax(gain))
    f, b = divmod(k, nb)
    if not np.isfinite(gain[f, b]) or gain[f, b] <= 0:
        return None
    return _Split(float(gain[f, b]), f, b, float(GL[f, b]), float(HL[f, b]), float(WL[f, b]))


def _grow_tree(B, g, h, w, n_edges, cfg: GbtConfig, nb: int) -> Tree:
    lam = cfg.l2_regularization
    feature, threshold, left, right, value, weight, depth = [], [], [], [], [], [], []

    def new_node(idx, d):
        G, H = g[idx].sum(), h[idx].sum()
        feature.append(-1)
        threshold.append(0)
        left.append(-1)
        right.append(-1)
        value.append(-G / (H + lam) * cfg.learning_rate if H + lam > 0 else 0.0)
        weight.append(float(w[idx].sum()))
        depth.append(d)
        return len(feature) - 1

    heap = []
    members = {}

    def consider(node, idx):
        members[node] = idx
        if depth[node] >= cfg.max_depth:
            return
        sp = _best_split(B[idx], g[idx], h[idx], w[idx], n_edges, cfg, nb)
        if sp is not None:
            heapq.heappush(heap, (-sp.gain, node, sp))

    root = new_node(np.arange(len(g)), 0)
    consider(root, np.arange(len(g)))
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaf_nodes:
        _, node, sp = heapq.heappop(heap)
        idx = members.pop(node)
        mask = B[idx, sp.feature] <= sp.bin
        li, ri = idx[mask], idx[~mask]
        feature[node] = sp.feature
        threshold[node] = sp.bin
        value[node] = 0.0
        ln = new_node(li, depth[node] + 1)
        rn = new_node(ri, depth[node] + 1)
        left[node], right[node] = ln, rn
        n_leaves += 1
        consider(ln, li)
        consider(rn, ri)
    return Tree(np.array(feature, np.int64), np.array(threshold, np.int64), np.array(left, np.int64),
                np.array(right, np.int64), np.array(value, np.float64), np.array(weight, np.float64),
                np.array(depth, np.int64))


def _softmax(M):
    M = M - M.max(axis=1, keepdims=True)
    E = np.exp(M)
    return E / E.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GbtEnsemble:
    config: GbtConfig
    edges: list
    classes: np.ndarray
    base_score: np.ndarray  # (K_trees,)
    trees: list = field(default_factory=list)  # per iteration: list of K_trees trees
    train_loss: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def decision_function(self, X) -> np.ndarray:
        X = _check_X(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        B = apply_bins(X, self.edges)
        M = np.tile(self.base_score, (len(X), 1))
        for it in self.trees:
            for k, tree in enumerate(it):
                M[:, k] += tree.predict(B)
        return M

    def predict_scores(self, X) -> np.ndarray:
        """Class probabilities, shape (n, K), rows summing to one."""
        M = self.decision_function(X)
        if self.n_classes == 2:
            p = _sigmoid(M[:, 0])
            return np.column_stack([1.0 - p, p])
        return _softmax(M)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.predict_scores(X), axis=1)]

    # -- persistence -----------------------------------------------------------

    def to_arrays(self, prefix: str = "") -> tuple[dict, dict]:
        meta = {"config": self.config.to_dict(), "classes": [int(c) for c in self.classes],
                "n_iter": len(self.trees), "k_trees": len(self.base_score),
                "train_loss": [float(v) for v in self.train_loss]}
        flat = [t for it in self.trees for t in it]
        arrays = {
            prefix + "edge_counts": np.array([len(e) for e in self.edges], "<i8"),
            prefix + "edges": np.concatenate([np.asarray(e, "<f8") for e in self.edges]) if self.edges else np.zeros(0),
            prefix + "base_score": np.asarray(self.base_score, "<f8"),
            prefix + "node_counts": np.array([len(t.feature) for t in flat], "<i8"),
        }
        for name in ("feature", "threshold", "left", "right", "depth"):
            arrays[prefix + name] = np.concatenate([getattr(t, name) for t in flat]).astype("<i8") if flat else np.zeros(0, "<i8")
        for name in ("value", "weight"):
            arrays[prefix + name] = np.concatenate([getattr(t, name) for t in flat]).astype("<f8") if flat else np.zeros(0)
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, prefix: str = "") -> "GbtEnsemble":
        counts = arrays[prefix + "edge_counts"]
        edges = np.split(arrays[prefix + "edges"], np.cumsum(counts)[:-1]) if len(counts) else []
        nc = arrays[prefix + "node_counts"]
        bounds = np.concatenate([[0], np.cumsum(nc)])
        flat = []
        for i in range(len(nc)):
            sl = slice(bounds[i], bounds[i + 1])
            flat.append(Tree(*(np.asarray(arrays[prefix + n][sl]) for n in
                               ("feature", "threshold", "left", "right", "value", "weight", "depth"))))
        k = meta["k_trees"]
        trees = [flat[i:i + k] for i in range(0, len(flat), k)]
        return cls(GbtConfig(**meta["config"]), [np.asarray(e) for e in edges], np.array(meta["classes"]),
                   np.asarray(arrays[prefix + "base_score"]), trees, list(meta["train_loss"]))

    def save(self, path, config_hash: str = "") -> None:
        meta, arrays = self.to_arrays()
        meta["config_hash"] = config_hash
        container.write(path, "gbt", meta, arrays)

    @classmethod
    def load(cls, path, config_hash: str | None = None) -> "GbtEnsemble":
        meta, arrays = container.read(path, kind="gbt", config_hash=config_hash)
        return cls.from_arrays(meta, arrays)


def _check_X(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if np.isnan(X).any():
        raise ValueError("NaN feature values are not supported")
    return X


def _dedupe(X, y, w):
    key = np.column_stack([X, y.astype(np.float64)])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    wsum = np.bincount(inv, weights=w, minlength=len(uniq))
    return uniq[:, :-1], uniq[:, -1], wsum


def _log_loss(P, Y, w):
    eps = 1e-15
    return float(-np.sum(w * np.log(np.clip((P * Y).sum(axis=1), eps, 1.0))) / w.sum())


def fit(X, y, sample_weight=None, config: GbtConfig = BINARY_DEFAULTS) -> GbtEnsemble:
    """Fit a boosted ensemble.

    Args:
        X: features, shape (n, d).
        y: class labels (any integers); two classes use the logistic loss,
            more than two the softmax loss with one tree per class per
            iteration.
        sample_weight: optional non-negative weights.
        config: hyperparameters; ``config.loss`` is informational, the loss
            follows from the number of classes.
    """
    X = _check_X(X)
    y = np.asarray(y)
    if len(X) != len(y) or len(X) < 2:
        raise ValueError("need n >= 2 samples with matching labels")
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != y.shape or np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("sample weights must be finite, non-negative and match y")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    yi = np.searchsorted(classes, y)
    keep = w > 0
    Xd, yd, wd = _dedupe(X[keep], yi[keep], w[keep])
    yd = yd.astype(np.int64)
    edges = [bin_edges(Xd[:, j], config.n_bins, wd) for j in range(Xd.shape[1])]
    n_edges = np.array([len(e) for e in edges])
    nb = int(n_edges.max(initial=0)) + 1
    B = apply_bins(Xd, edges)
    K = len(classes)
    Y = np.eye(K)[yd]
    prior = np.array([wd[yd == k].sum() for k in range(K)]) / wd.sum()
    if np.any(prior == 0):
        raise ValueError("every class needs positive total weight")
    if K == 2:
        base = np.array([np.log(prior[1] / prior[0])])
    else:
        base = np.log(prior)
    model = GbtEnsemble(config, edges, classes, base)
    M = np.tile(base, (len(yd), 1))

    def probs(M):
        if K == 2:
            p = _sigmoid(M[:, 0])
            return np.column_stack([1.0 - p, p])
        return _softmax(M)

    P = probs(M)
    model.train_loss.append(_log_loss(P, Y, wd))
    for _ in range(config.max_iter):
        if K == 2:
            p = P[:, 1]
            targets = [(p - Y[:, 1], p * (1.0 - p))]
        else:
            targets = [(P[:, k] - Y[:, k], P[:, k] * (1.0 - P[:, k])) for k in range(K)]
        it = []
        for k, (g, h) in enumerate(targets):
            tree = _grow_tree(B, g * wd, h * wd, wd, n_edges, config, nb)
            M[:, k] += tree.predict(B)
            it.append(tree)
        model.trees.append(it)
        P = probs(M)
        model.train_loss.append(_log_loss(P, Y, wd))
    return model
