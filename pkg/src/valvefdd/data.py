"""Splitting, min-max scaling, sliding windows and class-imbalance resampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .sim import N_CHANNELS, Trajectory

SPLITS = ("train", "val", "val2", "test")


@dataclass(frozen=True)
class Scaler:
    """Per-channel min-max scaler fitted on the train split.

    Values outside the fitted range are clamped to [0, 1]; a constant channel
    (min == max) maps to 0.
    """

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=np.float64)
        maxs = np.asarray(self.maxs, dtype=np.float64)
        if mins.shape != maxs.shape or mins.ndim != 1:
            raise ValueError("mins and maxs must be 1-D arrays of equal length")
        if np.any(maxs < mins):
            raise ValueError("max < min for some channel")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Scale an array whose channel axis is the second-to-last one."""
        x = np.asarray(x, dtype=np.float64)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        out = (x - self.mins[:, None]) / safe[:, None]
        out = np.where((span > 0)[:, None], out, 0.0)
        return np.clip(out, 0.0, 1.0)

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return y * self.span[:, None] + self.mins[:, None]

    def to_dict(self) -> dict:
        return {"mins": [float(v) for v in self.mins], "maxs": [float(v) for v in self.maxs]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mins"]), np.array(d["maxs"]))

    def digest(self) -> str:
        return container.hash_obj(self.to_dict())


def fit_scaler(train: list[Trajectory]) -> Scaler:
    if not train:
        raise ValueError("cannot fit a scaler on an empty train set")
    mins = np.min([t.data.min(axis=1) for t in train], axis=0)
    maxs = np.max([t.data.max(axis=1) for t in train], axis=0)
    return Scaler(mins, maxs)


def n_windows(length: int, T: int, step: int) -> int:
    if step < 1 or T < 1:
        raise ValueError("window length and step must be >= 1")
    if length < T:
        return 0
    return (length - T) // step + 1


@dataclass(frozen=True)
class Window:
    values: np.ndarray  # (n_channels, T), scaled to [0, 1]
    label: int
    traj_id: int
    start_index: int


@dataclass
class WindowSet:
    """Columnar batch of windows; indexing yields ``Window`` records."""

    values: np.ndarray  # (n, n_channels, T) float32
    labels: np.ndarray
    traj_ids: np.ndarray
    starts: np.ndarray
    traj_types: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.values)
        if self.traj_types is None:
            self.traj_types = np.full(n, "", dtype="<U2")
        for arr in (self.labels, self.traj_ids, self.starts, self.traj_types):
            if len(arr) != n:
                raise ValueError("window columns must have equal length")

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Window(self.values[i], int(self.labels[i]), int(self.traj_ids[i]), int(self.starts[i]))
        return WindowSet(self.values[i], self.labels[i], self.traj_ids[i], self.starts[i],
                         self.traj_types[i])

    @classmethod
    def concat(cls, sets: list["WindowSet"], T: int | None = None) -> "WindowSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            T = T or 0
            return cls(np.zeros((0, N_CHANNELS, T), np.float32), np.zeros(0, np.int64),
                       np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, "<U2"))
        return cls(np.concatenate([s.values for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.traj_ids for s in sets]),
                   np.concatenate([s.starts for s in sets]),
                   np.concatenate([s.traj_types for s in sets]))


def windows(traj: Trajectory, scaler: Scaler, T: int, step: int) -> WindowSet:
    """Overlapping scaled windows of one trajectory.

    Raises:
        ValueError: if the trajectory is shorter than ``T`` or ``step < 1``.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if len(traj) < T:
        raise ValueError(f"trajectory {traj.id} has {len(traj)} samples, shorter than window {T}")
    m = n_windows(len(traj), T, step)
    scaled = scaler.transform(traj.data).astype(np.float32)
    starts = np.arange(m) * step
    view = np.lib.stride_tricks.sliding_window_view(scaled, T, axis=1)[:, starts]  # (c, m, T)
    vals = np.ascontiguousarray(view.transpose(1, 0, 2))
    return WindowSet(vals, np.full(m, traj.label), np.full(m, traj.id), starts,
                     np.full(m, traj.traj_type, dtype="<U2"))


def save_windows(ws: WindowSet, path, scaled: bool = True, meta: dict | None = None) -> None:
    """Store windows in the shared container (kind ``windows``)."""
    m = {"scaled": scaled, "T": int(ws.values.shape[-1]) if ws.values.ndim == 3 else 0, **(meta or {})}
    container.write(path, "windows", m, {
        "values": np.asarray(ws.values, dtype="<f4"), "labels": ws.labels.astype("<i8"),
        "traj_ids": ws.traj_ids.astype("<i8"), "starts": ws.starts.astype("<i8"),
        "traj_types": np.array([int(t[1:] or 0) for t in ws.traj_types], dtype="<i8")})


def load_windows(path) -> tuple[WindowSet, dict]:
    meta, a = container.read(path, kind="windows")
    types = np.array([f"T{t}" if t else "" for t in a["traj_types"].tolist()], dtype="<U2")
    return WindowSet(a["values"], a["labels"], a["traj_ids"], a["starts"], types), meta


def windows_many(trajs: list[Trajectory], scaler: Scaler, T: int, step: int) -> WindowSet:
    return WindowSet.concat([windows(t, scaler, T, step) for t in trajs], T)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.1
    val2: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        r = self.ratios()
        if any(v < 0 for v in r.values()) or abs(sum(r.values()) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")

    def ratios(self) -> dict:
        return {"train": self.train, "val": self.val, "val2": self.val2, "test": self.test}


def split_trajectories(trajs: list[Trajectory], spec: SplitSpec = SplitSpec(), seed: int = 0) -> dict:
    """Disjoint trajectory-level split, stratified by (label, trajectory type).

    ``calibration`` is the union of ``val`` and ``val2``.
    """
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for t in trajs:
        groups.setdefault((t.label, t.traj_type), []).append(t)
    out = {name: [] for name in SPLITS}
    ratios = spec.ratios()
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda t: t.id)
        order = rng.permutation(len(members))
        n = len(members)
        # largest-remainder allocation so small groups still split sensibly
        raw = {k: ratios[k] * n for k in SPLITS}
        alloc = {k: int(np.floor(v)) for k, v in raw.items()}
        rest = n - sum(alloc.values())
        for k in sorted(SPLITS, key=lambda k: (-(raw[k] - alloc[k]), SPLITS.index(k)))[:rest]:
            alloc[k] += 1
        pos = 0
        for k in SPLITS:
            out[k].extend(members[i] for i in order[pos:pos + alloc[k]])
            pos += alloc[k]
    for k in SPLITS:
        out[k].sort(key=lambda t: t.id)
    out["calibration"] = sorted(out["val"] + out["val2"], key=lambda t: t.id)
    return out


# -- class imbalance ----------------------------------------------------------

def class_weights(labels) -> dict:
    """Balanced weights N / (n_classes * count_c)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label array")
    classes, counts = np.unique(labels, return_counts=True)
    n = labels.size
    return {c.item(): n / (len(classes) * k) for c, k in zip(classes, counts)}


def sample_weights(labels) -> np.ndarray:
    w = class_weights(labels)
    return np.array([w[v] for v in np.asarray(labels).tolist()], dtype=np.float64)


def _nearest_neighbors(X: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other rows (Euclidean), ties by lower index."""
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((len(X), k), dtype=np.int64)
    for lo in range(0, len(X), 1024):
        blk = X[lo:lo + 1024]
        d = sq[lo:lo + 1024, None] + sq[None, :] - 2.0 * blk @ X.T
        d[np.arange(len(blk)), np.arange(lo, lo + len(blk))] = np.inf
        out[lo:lo + len(blk)] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def resample(X, y, method: str, seed: int = 0, k_nn: int = 5):
    """Balance class counts.

    Args:
        X: samples, shape (n, ...); SMOTE distances use the flattened rows.
        y: class labels, shape (n,).
        method: ``"ROS"`` duplicates minority rows, ``"RUS"`` drops majority
            rows, ``"SMOTE"`` interpolates x + u (x_nn - x), u ~ U(0, 1),
            towards one of the ``k_nn`` nearest same-class neighbours.

    Returns:
        (X_resampled, y_resampled); originals come first for ROS and SMOTE.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("resampling needs at least two classes")
    rng = np.random.default_rng(seed)
    method = method.upper()
    if method == "RUS":
        target = counts.min()
        keep = np.concatenate([np.sort(rng.choice(np.flatnonzero(y == c), target, replace=False))
                               for c in classes])
        keep.sort()
        return X[keep], y[keep]
    target = counts.max()
    if method == "ROS":
        extra = [rng.choice(np.flatnonzero(y == c), target - n, replace=True)
                 for c, n in zip(classes, counts) if n < target]
        idx = np.concatenate([np.arange(len(y))] + extra)
        return X[idx], y[idx]
    if method == "SMOTE":
        Xs, ys = [X], [y]
        flat = X.reshape(len(X), -1).astype(np.float64)
        for c, n in zip(classes, counts):
            if n == target:
                continue
            if n < k_nn + 1:
                raise ValueError(f"SMOTE needs at least {k_nn + 1} samples of class {c}, got {n}")
            members = np.flatnonzero(y == c)
            pts = flat[members]
            nn = _nearest_neighbors(pts, k_nn)
            m = target - n
            base = rng.integers(0, n, m)
            pick = nn[base, rng.integers(0, k_nn, m)]
            lam = rng.random(m)[:, None]
            synth = pts[base] + lam * (pts[pick] - pts[base])
            Xs.append(synth.reshape((m,) + X.shape[1:]).astype(X.dtype, copy=False))
            ys.append(np.full(m, c, dtype=y.dtype))
        return np.concatenate(Xs), np.concatenate(ys)
    raise ValueError(f"unknown resampling method {method!r}")
