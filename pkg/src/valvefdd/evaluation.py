"""Metrics, end-to-end evaluation reports and benchmark grids."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calib, data, gbt, sim, tcae
from .config import PipelineConfig
from .pipeline import balance_binary


def auroc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration over tied score groups.

    Accumulated in integers and divided once, so the result equals the
    Mann-Whitney pair statistic P(s+ > s-) + P(s+ = s-)/2 exactly.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n1 = int(y.sum())
    n0 = int(y.size - n1)
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end index of each tie group
    tp = np.cumsum(y)[last].astype(np.int64)
    fp = (last + 1) - tp
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return area2 / (2 * n0 * n1)


def _ratio(a, b):
    return None if b == 0 else a / b


def binary_metrics(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    return _metrics_from_counts(tp, fp, tn, fn) | {"confusion": [[tn, fp], [fn, tp]]}


def _metrics_from_counts(tp, fp, tn, fn) -> dict:
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = None if prec is None or rec is None or prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return {"n": tp + fp + tn + fn, "tp": tp, "fp": fp, "tn": tn, "fn": fn,
            "fpr": _ratio(fp, fp + tn), "fnr": _ratio(fn, fn + tp),
            "accuracy": _ratio(tp + tn, tp + fp + tn + fn), "precision": prec, "recall": rec, "f1": f1}


def multiclass_metrics(y_true, y_pred, classes) -> dict:
    """Confusion matrix plus one-vs-rest metrics, macro-averaged over classes."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    classes = [int(c) for c in classes]
    idx = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true.tolist(), y_pred.tolist()):
        cm[idx[t], idx[p]] += 1
    per = {}
    n = int(cm.sum())
    for c, i in idx.items():
        tp = int(cm[i, i])
        fp = int(cm[:, i].sum() - tp)
        fn = int(cm[i, :].sum() - tp)
        per[str(c)] = _metrics_from_counts(tp, fp, n - tp - fp - fn, fn)

    def macro(key):
        vals = [m[key] for m in per.values() if m[key] is not None]
        return None if not vals else float(np.mean(vals))

    return {"classes": classes, "confusion": cm.tolist(), "n": n,
            "accuracy": _ratio(int(np.trace(cm)), n),
            "fpr": macro("fpr"), "fnr": macro("fnr"), "precision": macro("precision"),
            "recall": macro("recall"), "f1": macro("f1"), "per_class": per}


def time_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0, "min": None, "max": None, "mean": None, "std": None}
    return {"count": int(v.size), "min": float(v.min()), "max": float(v.max()),
            "mean": float(v.mean()), "std": float(v.std())}


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()


@dataclass
class EvalReport:
    sections: dict
    tables: dict = field(default_factory=dict)  # file name -> CSV text

    def to_json(self) -> str:
        return json.dumps(self.sections, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json"]
        paths[0].write_text(self.to_json())
        for name in sorted(self.tables):
            p = out / name
            p.write_text(self.tables[name])
            paths.append(p)
        return paths


def _calibration_rows(prefix: str, probs_by_method: dict, labels, bins) -> list[dict]:
    rows = []
    for method in sorted(probs_by_method):
        for r in calib.calibration_table(probs_by_method[method], labels, bins):
            rows.append({"task": prefix, "method": method, **r})
    return rows


def evaluate_pipeline(pipeline, trajectories: list[sim.Trajectory], ood_trajs=()) -> EvalReport:
    """Trajectory-level FDD + OOD evaluation, plus window-level calibration tables.

    Fault detection: positive iff the CUSUM triggered anywhere. Diagnosis:
    true-fault trajectories that triggered, scored on the diagnosis emitted
    at the trigger window. OOD: in-distribution trajectories vs synthetic
    OOD ones, positive iff the trajectory-level warning fired.
    """
    cfg: PipelineConfig = pipeline.cfg
    if any(t.label < 0 for t in trajectories):
        raise ValueError("evaluation needs labeled trajectories")
    ev = cfg.raw["eval"]
    results = [pipeline.run(t, keep_outputs=True) for t in trajectories]
    ood_results = [pipeline.run(t) for t in ood_trajs]

    # fault detection
    y_fault = np.array([r.label != 0 for r in results], dtype=bool)
    y_trig = np.array([r.triggered for r in results], dtype=bool)
    detection = binary_metrics(y_fault, y_trig) if results else {}

    # diagnosis
    diag_res = [r for r in results if r.label != 0 and r.triggered]
    classes = [int(c) for c in pipeline.diagnoser.classes]
    if diag_res:
        diagnosis = multiclass_metrics([r.label for r in diag_res], [r.diagnosis for r in diag_res], classes)
    else:
        diagnosis = {}

    # OOD
    all_res = results + ood_results
    ood_truth = np.array([r.label in sim.OOD_TRANSFORMS for r in all_res], dtype=bool)
    ood_pred = np.array([r.ood_warned for r in all_res], dtype=bool)
    ood_section = binary_metrics(ood_truth, ood_pred) if all_res else {}
    ood_section["window_threshold"] = pipeline.conformal.thr_ood
    ood_section["alpha"] = pipeline.conformal.alpha

    # detection times
    dt_rows = []
    groups = {}
    for r in results:
        if r.triggered:
            groups.setdefault((r.label, r.traj_type), []).append(r.trigger_time)
    for (lab, tt) in sorted(groups):
        dt_rows.append({"class": lab, "traj_type": tt, **time_stats(groups[(lab, tt)])})
    fp_rows = [{"class": lab, "traj_type": tt, "count": len(groups[(lab, tt)])}
               for (lab, tt) in sorted(groups) if lab == 0]

    # window-level scores
    tables = {}
    win_section = {}
    if results:
        p_raw = np.concatenate([r.outputs.p_raw for r in results])
        yw = np.concatenate([np.full(r.n_windows, r.label) for r in results])
        Xd = np.concatenate([r.outputs.diag_X for r in results])
        yb = (yw != 0).astype(int)
        bins = list(ev["metric_bins"])
        cal_rows = []
        if 0 < yb.sum() < len(yb):
            win_section["detector_auroc"] = auroc(p_raw, yb)
            probs = {m: np.clip(c(p_raw), 0, 1) for m, c in pipeline.calibrators["detector"].items()}
            cal_rows += _calibration_rows("detection", probs, yb, bins)
            rel = calib.reliability(probs[cfg.raw["detector"]["calibration"]], yb, ev["reliability_bins"])
            tables["reliability_detection.csv"] = rel.to_csv()
        fault = yw != 0
        if fault.any():
            S = pipeline.diagnoser.predict_scores(Xd[fault])
            ytrue = yw[fault]
            known = np.isin(ytrue, pipeline.diagnoser.classes)
            yk = np.searchsorted(pipeline.diagnoser.classes, ytrue[known])
            S = S[known]
            win_section["diagnoser_accuracy"] = float(np.mean(np.argmax(S, axis=1) == yk))
            conf_by = {}
            for m, c in pipeline.calibrators["diagnoser"].items():
                conf_by[m] = calib.top_label(c(S), yk)
            cal_rows += [{"task": "diagnosis_top_label", "method": m, **row}
                         for m in sorted(conf_by) for row in
                         calib.calibration_table(conf_by[m][0], conf_by[m][1], bins)]
            conf, corr = conf_by[cfg.raw["diagnoser"]["calibration"]]
            tables["reliability_diagnosis.csv"] = calib.reliability(conf, corr, ev["reliability_bins"]).to_csv()
        win_section["calibration"] = cal_rows
        tables["calibration_metrics.csv"] = _csv(cal_rows, ["task", "method", "n_bins", "ece", "mce", "brier"])

    # confidence levels
    conf_rows = _confidence_rows(results, diag_res)
    tables["confidence_levels.csv"] = _csv(conf_rows, ["task", "outcome", "class", "traj_type", "count",
                                                       "mean_confidence"])
    tables["detection_times.csv"] = _csv(dt_rows, ["class", "traj_type", "count", "min", "max", "mean", "std"])
    tables["false_positives.csv"] = _csv(fp_rows, ["class", "traj_type", "count"])
    traj_rows = [{"traj_id": r.traj_id, "label": r.label, "traj_type": r.traj_type, "n_windows": r.n_windows,
                  "triggered": int(r.triggered), "trigger_time": r.trigger_time, "p_trigger": r.p_trigger,
                  "diagnosis": r.diagnosis, "confidence": r.diagnosis_confidence, "n_ood": r.n_ood,
                  "ood_warned": int(r.ood_warned)} for r in all_res]
    tables["trajectories.csv"] = _csv(traj_rows, list(traj_rows[0]) if traj_rows else ["traj_id"])

    sections = {
        "config_hash": cfg.stage_hash("evaluate"),
        "n_trajectories": len(results), "n_ood_trajectories": len(ood_results),
        "fault_detection": detection, "diagnosis": diagnosis, "ood_detection": ood_section,
        "detection_times": dt_rows, "false_positives": fp_rows, "window_level": win_section,
        "confidence_levels": conf_rows,
    }
    return EvalReport(sections, tables)


def _confidence_rows(results, diag_res) -> list[dict]:
    """Mean confidence grouped by (correct/incorrect, true class, trajectory type).

    Detection confidence is the calibrated failure probability at the trigger
    window for triggered trajectories and one minus the mean failure
    probability otherwise; diagnosis confidence is the top calibrated class
    probability at the trigger window.
    """
    groups = {}
    for r in results:
        pred = r.triggered
        correct = pred == (r.label != 0)
        c = r.p_trigger if pred else 1.0 - float(np.mean(r.outputs.p_fail))
        groups.setdefault(("detection", "correct" if correct else "incorrect", r.label, r.traj_type), []).append(c)
    for r in diag_res:
        correct = r.diagnosis == r.label
        groups.setdefault(("diagnosis", "correct" if correct else "incorrect", r.label, r.traj_type),
                          []).append(r.diagnosis_confidence)
    return [{"task": k[0], "outcome": k[1], "class": k[2], "traj_type": k[3], "count": len(v),
             "mean_confidence": float(np.mean(v))} for k, v in sorted(groups.items())]


def check_thresholds(report: EvalReport, cfg: PipelineConfig) -> list[str]:
    """Violations of the optional acceptance thresholds in the ``eval`` section."""
    ev = cfg.raw["eval"]
    det = report.sections.get("fault_detection", {})
    bad = []
    if ev.get("max_fpr") is not None and det.get("fpr") is not None and det["fpr"] > ev["max_fpr"]:
        bad.append(f"fault-detection FPR {det['fpr']:.4f} > {ev['max_fpr']}")
    rec = det.get("recall")
    if ev.get("min_detection_recall") is not None and (rec is None or rec < ev["min_detection_recall"]):
        bad.append(f"fault-detection recall {rec} < {ev['min_detection_recall']}")
    return bad


# -- benchmark grids ---------------------------------------------------------------

IMBALANCE_ROWS = ("base", "weighting", "ROS", "RUS", "SMOTE", "threshold-moving")


@dataclass
class ImbalanceRow:
    method: str
    threshold: float
    scores: np.ndarray
    metrics: dict
    calibration: dict  # calibration method -> {"ece", "mce", "mse", "reliability_csv"}


def benchmark_imbalance(train: tuple, cal: tuple, test: tuple, gbt_config: gbt.GbtConfig,
                        methods=IMBALANCE_ROWS, T_fp: float = 0.75, n_bins: int = 5,
                        seed: int = 0) -> list[ImbalanceRow]:
    """Class-imbalance grid on a binary task.

    Args:
        train, cal, test: ``(X, y)`` pairs with binary labels.
        methods: subset of ``IMBALANCE_ROWS``. ``threshold-moving`` reuses the
            base model's scores with decision threshold ``T_fp``; all other
            rows threshold at 0.5.
    """
    Xtr, ytr = train
    Xc, yc = cal
    Xte, yte = test
    rows = []
    cache = {}
    for m in methods:
        key = "base" if m in ("base", "threshold-moving") else m
        if key not in cache:
            Xb, yb, w = balance_binary(Xtr, ytr, "none" if key == "base" else key, seed)
            model = gbt.fit(Xb, yb, w, gbt_config)
            cache[key] = (model.predict_scores(Xte)[:, 1], model.predict_scores(Xc)[:, 1])
        s, sc = cache[key]
        thr = T_fp if m == "threshold-moving" else 0.5
        met = binary_metrics(yte, s > thr)
        met["auroc"] = auroc(s, yte)
        cals = {}
        for cm in ("base", "platt", "isotonic"):
            if cm == "base":
                p = s
            else:
                p = np.clip(calib.fit_calibrator(sc, yc, cm)(s), 0, 1)
            rel = calib.reliability(p, yte, n_bins)
            cals[cm] = {"ece": calib.ece(rel), "mce": calib.mce(rel), "mse": calib.brier(p, yte),
                        "reliability_csv": rel.to_csv()}
        rows.append(ImbalanceRow(m, thr, s, met, cals))
    return rows


def imbalance_table(rows: list[ImbalanceRow]) -> str:
    out = []
    for r in rows:
        for cm, c in r.calibration.items():
            out.append({"method": r.method, "threshold": r.threshold, "auroc": r.metrics["auroc"],
                        "precision": r.metrics["precision"], "recall": r.metrics["recall"],
                        "accuracy": r.metrics["accuracy"], "calibration": cm, "ece": c["ece"],
                        "mce": c["mce"], "mse": c["mse"]})
    return _csv(out, ["method", "threshold", "auroc", "precision", "recall", "accuracy", "calibration",
                      "ece", "mce", "mse"])


# window-length-100 rows of the architecture grid: (c_latent, L, k, n_1x1)
ARCH_GRID = (
    (64, 4, 9, 32),
    (64, 4, 9, 16),
    (32, 4, 9, 16),
    (16, 4, 9, 16),
    (16, 3, 9, 16),
    (16, 4, 8, 16),
    (16, 4, 7, 16),
    (16, 4, 5, 16),
)


def inference_time_ms(model: tcae.TcaeModel, windows: np.ndarray, n: int = 100) -> float:
    """Mean wall time to reconstruct one window, over ``n`` consecutive windows."""
    w = windows[:n]
    model.reconstruct(w[:1])  # warm-up
    t0 = time.perf_counter()
    for i in range(len(w)):
        model.reconstruct(w[i:i + 1])
    return (time.perf_counter() - t0) / max(len(w), 1) * 1000.0


def bench_arch(splits: dict, scaler: data.Scaler, T: int, step: int, train_cfg: tcae.TrainConfig,
               rows=ARCH_GRID, binary_cfg=gbt.BINARY_DEFAULTS, multi_cfg=gbt.MULTICLASS_DEFAULTS,
               base: tcae.TcaeConfig | None = None, timing_windows: int = 100, log=None) -> list[dict]:
    """Architecture sweep: footprint, latency, AUROC on e/z/r and diagnosis accuracy on z/r."""
    base = base or tcae.TcaeConfig(T=T)
    win = {k: data.windows_many(v, scaler, T, step) for k, v in splits.items()}
    nominal = lambda ws: ws[ws.labels == 0]  # noqa: E731
    out = []
    for c_lat, L, k, n1 in rows:
        cfg = tcae.TcaeConfig(T=T, c=base.c, L=L, k=k, n_filters=base.n_filters, n_1x1=n1, c_latent=c_lat,
                              s=base.s, dropout=base.dropout, b=base.b, abs_residual=base.abs_residual)
        model = tcae.train(nominal(win["train"]), nominal(win["val"]), cfg, train_cfg)
        ftr = model.features(win["train"].values)
        fte = model.features(win["test"].values)
        ytr, yte = win["train"].labels, win["test"].labels
        row = {"c_latent": c_lat, "L": L, "k": k, "n_1x1": n1, "s": cfg.s,
               "params": model.n_params, "memory_mb": model.memory_bytes / 2 ** 20,
               "inference_ms": inference_time_ms(model, win["test"].values, timing_windows),
               "epochs": model.meta["epochs"],
               "auroc_e": auroc(fte.e, yte != 0)}
        for var in ("z", "r"):
            Xtr, Xte = getattr(ftr, var), getattr(fte, var)
            b = gbt.fit(Xtr, (ytr != 0).astype(int), None, binary_cfg)
            row[f"auroc_binary_{var}"] = auroc(b.predict_scores(Xte)[:, 1], yte != 0)
            ftrm, ftem = ytr != 0, yte != 0
            mc = gbt.fit(Xtr[ftrm], ytr[ftrm], None, multi_cfg)
            row[f"accuracy_multiclass_{var}"] = float(np.mean(mc.predict(Xte[ftem]) == yte[ftem]))
        if log:
            log(f"arch row {row}")
        out.append(row)
    return out


ARCH_COLUMNS = ["c_latent", "L", "k", "n_1x1", "s", "params", "memory_mb", "inference_ms", "epochs", "auroc_e",
                "auroc_binary_z", "auroc_binary_r", "accuracy_multiclass_z", "accuracy_multiclass_r"]


def arch_table(rows: list[dict]) -> str:
    return _csv(rows, ARCH_COLUMNS)
