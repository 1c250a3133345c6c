"""Offline stages (simulate ... calibrate-ood) and the online inference bundle.

Every stage writes its artifact under the data root together with the hash
of the configuration sections it depends on; downstream stages verify that
hash on load and refuse stale inputs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calib, container, data, detect, gbt, ood, sim, tcae
from .config import PipelineConfig

log = logging.getLogger(__name__)

FAULT_CLASSES = (16, 128, 511)


class MissingArtifactError(FileNotFoundError):
    """A stage's input artifact has not been produced yet."""


def _path(root: Path, name: str) -> Path:
    return Path(root) / name


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; run the producing stage first")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def _read_json(path: Path, config_hash: str | None = None) -> dict:
    obj = json.loads(_require(path).read_text())
    if config_hash is not None and obj.get("config_hash") != config_hash:
        raise container.ConfigHashMismatchError(
            f"{path}: produced by config {obj.get('config_hash')}, current config is {config_hash}")
    return obj


# -- stages ----------------------------------------------------------------------

def run_simulate(cfg: PipelineConfig, root) -> Path:
    root = Path(root)
    trajs = sim.generate_dataset(cfg.dataset_spec, cfg.seed)
    entries = []
    for t in trajs:
        rel = f"corpus/traj_{t.id:06d}.vfdd"
        sim.save_trajectory(t, root / rel)
        entries.append({"id": t.id, "label": t.label, "traj_type": t.traj_type, "file": rel,
                        "n_samples": len(t)})
    manifest = _path(root, "corpus/manifest.json")
    _write_json(manifest, {"config_hash": cfg.stage_hash("corpus"), "trajectories": entries})
    log.info("simulated %d trajectories", len(trajs))
    return manifest


def load_corpus(cfg: PipelineConfig, root) -> dict[int, sim.Trajectory]:
    root = Path(root)
    man = _read_json(_path(root, "corpus/manifest.json"), cfg.stage_hash("corpus"))
    return {e["id"]: sim.load_trajectory(_require(root / e["file"])) for e in man["trajectories"]}


def run_split(cfg: PipelineConfig, root) -> Path:
    root = Path(root)
    trajs = load_corpus(cfg, root)
    short = [t.id for t in trajs.values() if len(t) < cfg.T]
    if short:
        raise ValueError(f"trajectories {short} are shorter than the window length {cfg.T}")
    splits = data.split_trajectories(list(trajs.values()), cfg.split_spec, cfg.seed)
    scaler = data.fit_scaler(splits["train"])
    man = _read_json(_path(root, "corpus/manifest.json"))
    files = {e["id"]: e["file"] for e in man["trajectories"]}
    out = {
        "config_hash": cfg.stage_hash("split"),
        "T": cfg.T, "step": cfg.step,
        "scaler": scaler.to_dict(), "scaler_hash": scaler.digest(),
        "splits": {k: [files[t.id] for t in v] for k, v in splits.items() if k != "calibration"},
    }
    path = _path(root, "split.json")
    _write_json(path, out)
    return path


@dataclass
class SplitData:
    scaler: data.Scaler
    splits: dict  # name -> list[Trajectory]

    def trajectories(self, name: str) -> list[sim.Trajectory]:
        if name == "calibration":
            return sorted(self.splits["val"] + self.splits["val2"], key=lambda t: t.id)
        return self.splits[name]


def load_split(cfg: PipelineConfig, root) -> SplitData:
    root = Path(root)
    man = _read_json(_path(root, "split.json"), cfg.stage_hash("split"))
    splits = {k: [sim.load_trajectory(_require(root / f)) for f in v] for k, v in man["splits"].items()}
    return SplitData(data.Scaler.from_dict(man["scaler"]), splits)


def run_train_tcae(cfg: PipelineConfig, root) -> Path:
    sd = load_split(cfg, root)
    nominal = lambda ts: [t for t in ts if t.label == 0]  # noqa: E731
    tr = data.windows_many(nominal(sd.trajectories("train")), sd.scaler, cfg.T, cfg.step)
    va = data.windows_many(nominal(sd.trajectories("val")), sd.scaler, cfg.T, cfg.step)
    if len(va) == 0:
        va = data.windows_many(nominal(sd.trajectories("calibration")), sd.scaler, cfg.T, cfg.step)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("the corpus is too small: no nominal trajectories in the train or validation split")
    model = tcae.train(tr, va, cfg.tcae_config, cfg.train_config, log=log.info)
    path = _path(root, "tcae.vfdd")
    model.save(path, sim.CHANNELS, sd.scaler.digest(), cfg.stage_hash("tcae"))
    return path


def load_tcae(cfg: PipelineConfig, root) -> tcae.TcaeModel:
    return tcae.TcaeModel.load(_require(_path(root, "tcae.vfdd")), cfg.stage_hash("tcae"))


FEATURE_SPLITS = ("train", "val", "val2", "test")


def extract_features(model: tcae.TcaeModel, ws: data.WindowSet) -> dict:
    f = model.features(ws.values)
    return {"z": f.z, "r": f.r, "e": f.e, "labels": ws.labels.astype(np.int64),
            "traj_ids": ws.traj_ids.astype(np.int64), "starts": ws.starts.astype(np.int64),
            "types": np.array([int(t[1]) for t in ws.traj_types], dtype=np.int64)}


def run_extract(cfg: PipelineConfig, root) -> Path:
    sd = load_split(cfg, root)
    model = load_tcae(cfg, root)
    arrays = {}
    for name in FEATURE_SPLITS:
        ws = data.windows_many(sd.trajectories(name), sd.scaler, cfg.T, cfg.step)
        for k, v in extract_features(model, ws).items():
            arrays[f"{name}/{k}"] = v
    path = _path(root, "features.vfdd")
    container.write(path, "features", {"config_hash": cfg.stage_hash("features"), "splits": list(FEATURE_SPLITS)},
                    arrays)
    return path


@dataclass
class FeatureSet:
    z: np.ndarray
    r: np.ndarray
    e: np.ndarray
    labels: np.ndarray
    traj_ids: np.ndarray
    starts: np.ndarray
    types: np.ndarray

    def X(self, which: str) -> np.ndarray:
        return getattr(self, which)

    def subset(self, mask) -> "FeatureSet":
        return FeatureSet(*(getattr(self, k)[mask] for k in
                            ("z", "r", "e", "labels", "traj_ids", "starts", "types")))

    @classmethod
    def concat(cls, sets) -> "FeatureSet":
        return cls(*(np.concatenate([getattr(s, k) for s in sets]) for k in
                     ("z", "r", "e", "labels", "traj_ids", "starts", "types")))


def load_features(cfg: PipelineConfig, root) -> dict[str, FeatureSet]:
    meta, arrays = container.read(_require(_path(root, "features.vfdd")), "features", cfg.stage_hash("features"))
    out = {s: FeatureSet(*(arrays[f"{s}/{k}"] for k in ("z", "r", "e", "labels", "traj_ids", "starts", "types")))
           for s in meta["splits"]}
    out["calibration"] = FeatureSet.concat([out["val"], out["val2"]])
    return out


def balance_binary(X, y, method: str, seed: int):
    """Training set and weights for one class-imbalance strategy."""
    if method in ("none", "threshold"):
        return X, y, None
    if method == "weighting":
        return X, y, data.sample_weights(y)
    Xr, yr = data.resample(X, y, method, seed)
    return Xr, yr, None


def run_train_detector(cfg: PipelineConfig, root) -> Path:
    feats = load_features(cfg, root)["train"]
    det = cfg.raw["detector"]
    X = feats.X(det["features"])
    y = (feats.labels != 0).astype(np.int64)
    Xb, yb, w = balance_binary(X, y, det["imbalance"], cfg.seed)
    model = gbt.fit(Xb, yb, w, cfg.detector_gbt)
    path = _path(root, "detector.vfdd")
    model.save(path, cfg.stage_hash("detector"))
    return path


def run_train_diagnoser(cfg: PipelineConfig, root) -> Path:
    feats = load_features(cfg, root)["train"]
    fault = feats.labels != 0
    if len(np.unique(feats.labels[fault])) < 2:
        raise ValueError("diagnoser training needs at least two fault classes in the train split")
    model = gbt.fit(feats.X(cfg.raw["diagnoser"]["features"])[fault], feats.labels[fault], None,
                    cfg.diagnoser_gbt)
    path = _path(root, "diagnoser.vfdd")
    model.save(path, cfg.stage_hash("diagnoser"))
    return path


def load_detector(cfg, root) -> gbt.GbtEnsemble:
    return gbt.GbtEnsemble.load(_require(_path(root, "detector.vfdd")), cfg.stage_hash("detector"))


def load_diagnoser(cfg, root) -> gbt.GbtEnsemble:
    return gbt.GbtEnsemble.load(_require(_path(root, "diagnoser.vfdd")), cfg.stage_hash("diagnoser"))


def run_calibrate(cfg: PipelineConfig, root) -> Path:
    """Fit every calibration method for both classifiers on the calibration split."""
    cal = load_features(cfg, root)["calibration"]
    det, diag = load_detector(cfg, root), load_diagnoser(cfg, root)
    s = det.predict_scores(cal.X(cfg.raw["detector"]["features"]))[:, 1]
    yb = (cal.labels != 0).astype(np.int64)
    fault = cal.labels != 0
    S = diag.predict_scores(cal.X(cfg.raw["diagnoser"]["features"])[fault])
    yk = np.searchsorted(diag.classes, cal.labels[fault])
    meta = {
        "config_hash": cfg.stage_hash("calibration"),
        "detector": {m: calib.fit_calibrator(s, yb, m).to_dict() for m in calib.METHODS},
        "diagnoser": {m: calib.calibrate_multiclass(S, yk, m).to_dict() for m in calib.METHODS},
    }
    path = _path(root, "calibration.vfdd")
    container.write(path, "calibration", meta, {})
    return path


def load_calibration(cfg, root) -> dict:
    meta, _ = container.read(_require(_path(root, "calibration.vfdd")), "calibration",
                             cfg.stage_hash("calibration"))
    return {"detector": {m: calib.Calibrator.from_dict(d) for m, d in meta["detector"].items()},
            "diagnoser": {m: calib.OvaCalibrator.from_dict(d) for m, d in meta["diagnoser"].items()}}


def run_calibrate_ood(cfg: PipelineConfig, root) -> Path:
    cal = load_features(cfg, root)["calibration"]
    thr = ood.calibrate(cal.e, cfg.raw["ood"]["alpha"])
    path = _path(root, "ood.vfdd")
    container.write(path, "conformal", {"config_hash": cfg.stage_hash("ood"), **thr.to_dict()},
                    {"errors": thr.errors})
    return path


def load_ood(cfg, root) -> ood.ConformalThreshold:
    meta, arrays = container.read(_require(_path(root, "ood.vfdd")), "conformal", cfg.stage_hash("ood"))
    return ood.ConformalThreshold(meta["thr_ood"], meta["alpha"], meta["n"], arrays["errors"])


# -- online inference ------------------------------------------------------------

@dataclass
class WindowOutputs:
    p_raw: np.ndarray
    p_fail: np.ndarray
    e: np.ndarray
    ood_flags: np.ndarray
    diag_X: np.ndarray
    starts: np.ndarray


@dataclass
class TrajectoryResult:
    traj_id: int
    label: int
    traj_type: str
    n_windows: int
    triggered: bool
    trigger_index: int | None
    trigger_time: float | None
    p_trigger: float | None
    diagnosis: int | None
    diagnosis_confidence: float | None
    n_ood: int
    ood_warned: bool
    ood_warn_index: int | None
    events: list = field(default_factory=list)
    outputs: WindowOutputs | None = None


class StreamMonitor:
    """Per-stream state: one CUSUM and one OOD counter, fed window by window."""

    def __init__(self, pipeline: "Pipeline", traj_id: int = 0):
        c = pipeline.cfg.raw["cusum"]
        self.pipeline = pipeline
        self.traj_id = traj_id
        self.cusum = detect.CusumState(c["T_fp"], c["T_cs"], c["kappa"])
        self.ood_state = ood.OodTrajectoryState(pipeline.cfg.raw["ood"]["thr_ood_cs"])
        self.index = 0

    def step(self, p_fail: float, flag: bool, start: int, diag_x) -> list[dict]:
        """Advance by one window; returns event records (fault trigger, OOD warning)."""
        events = []
        pl = self.pipeline
        was_triggered, was_warned = self.cusum.triggered, self.ood_state.warned
        self.cusum.step(p_fail)
        self.ood_state.step(bool(flag))
        t = (start + pl.cfg.T) / sim.SAMPLE_RATE
        if self.cusum.triggered and not was_triggered:
            cls, conf, _ = pl.diagnose(np.asarray(diag_x)[None])
            events.append({"event": "fault", "traj_id": int(self.traj_id), "time_s": t,
                           "window_index": self.index, "p_fail": float(p_fail),
                           "diagnosis": int(cls[0]), "confidence": float(conf[0])})
        if self.ood_state.warned and not was_warned:
            events.append({"event": "ood_warning", "traj_id": int(self.traj_id), "time_s": t,
                           "window_index": self.index, "n_ood": self.ood_state.n_ood})
        self.index += 1
        return events


@dataclass
class Pipeline:
    cfg: PipelineConfig
    scaler: data.Scaler
    tcae: tcae.TcaeModel
    detector: gbt.GbtEnsemble
    diagnoser: gbt.GbtEnsemble
    calibrators: dict
    conformal: ood.ConformalThreshold

    @classmethod
    def load(cls, cfg: PipelineConfig, root) -> "Pipeline":
        man = _read_json(_path(root, "split.json"), cfg.stage_hash("split"))
        model = load_tcae(cfg, root)
        scaler = data.Scaler.from_dict(man["scaler"])
        if model.meta.get("scaler_hash") != scaler.digest():
            raise container.ConfigHashMismatchError("autoencoder was trained with a different scaler")
        return cls(cfg, scaler, model, load_detector(cfg, root), load_diagnoser(cfg, root),
                   load_calibration(cfg, root), load_ood(cfg, root))

    @property
    def detector_calibrator(self) -> calib.Calibrator:
        return self.calibrators["detector"][self.cfg.raw["detector"]["calibration"]]

    @property
    def diagnoser_calibrator(self) -> calib.OvaCalibrator:
        return self.calibrators["diagnoser"][self.cfg.raw["diagnoser"]["calibration"]]

    def diagnose(self, X):
        """Calibrated diagnosis: (class labels, top probability, full matrix)."""
        P = self.diagnoser_calibrator(self.diagnoser.predict_scores(X))
        k = np.argmax(P, axis=1)
        return self.diagnoser.classes[k], P[np.arange(len(P)), k], P

    def window_outputs(self, values: np.ndarray, starts: np.ndarray) -> WindowOutputs:
        """Batch inference over scaled windows of one stream."""
        f = self.tcae.features(values)
        feats = {"z": f.z, "r": f.r}
        p_raw = self.detector.predict_scores(feats[self.cfg.raw["detector"]["features"]])[:, 1]
        p_fail = np.clip(self.detector_calibrator(p_raw), 0.0, 1.0)
        return WindowOutputs(p_raw, p_fail, f.e, self.conformal.is_ood(f.e) if len(f.e) else np.zeros(0, bool),
                             feats[self.cfg.raw["diagnoser"]["features"]], np.asarray(starts))

    def run(self, traj: sim.Trajectory, keep_outputs: bool = False) -> TrajectoryResult:
        ws = data.windows(traj, self.scaler, self.cfg.T, self.cfg.step)
        return self.run_windows(ws.values, ws.starts, traj.id, traj.label, traj.traj_type, keep_outputs)

    def run_windows(self, values, starts, traj_id=0, label=-1, traj_type="", keep_outputs=False):
        out = self.window_outputs(values, starts)
        mon = StreamMonitor(self, traj_id)
        events = []
        fault = None
        for i in range(len(out.p_fail)):
            ev = mon.step(out.p_fail[i], out.ood_flags[i], int(out.starts[i]), out.diag_X[i])
            events.extend(ev)
            fault = fault or next((e for e in ev if e["event"] == "fault"), None)
        return TrajectoryResult(
            int(traj_id), int(label), traj_type, len(out.p_fail), mon.cusum.triggered,
            mon.cusum.trigger_index, fault["time_s"] if fault else None,
            fault["p_fail"] if fault else None, fault["diagnosis"] if fault else None,
            fault["confidence"] if fault else None, mon.ood_state.n_ood, mon.ood_state.warned,
            mon.ood_state.warn_index, events, out if keep_outputs else None)


def ood_trajectories(cfg: PipelineConfig, source: list[sim.Trajectory], first_id: int) -> list[sim.Trajectory]:
    """Synthetic OOD trajectories: each registered affine transform applied to sampled sources."""
    n = int(cfg.raw["ood"]["n_per_class"])
    if n == 0 or not source:
        return []
    rng = np.random.default_rng([cfg.seed, 22])
    out = []
    for cls_id in sorted(sim.OOD_TRANSFORMS):
        var, shift, trend = sim.OOD_TRANSFORMS[cls_id]
        pick = rng.choice(len(source), size=min(n, len(source)), replace=False)
        for i in sorted(pick):
            out.append(sim.make_ood(source[i], var, shift, trend, cls_id, first_id + len(out)))
    return out
