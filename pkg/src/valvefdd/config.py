"""Pipeline configuration: defaults, validation, overrides and per-stage hashes."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import container
from .calib import METHODS
from .data import SplitSpec
from .gbt import BINARY_DEFAULTS, MULTICLASS_DEFAULTS, GbtConfig
from .sim import DEV_RATIOS, FINAL_RATIOS, N_CHANNELS, TRAJ_TYPES, DatasetSpec
from .tcae import TcaeConfig, TrainConfig

ROOT_ENV = "FDD_DATA_ROOT"
IMBALANCE_METHODS = ("none", "threshold", "weighting", "ROS", "RUS", "SMOTE")
RATIO_PRESETS = {"dev": DEV_RATIOS, "final": FINAL_RATIOS}


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


def _gbt_dict(cfg: GbtConfig) -> dict:
    d = cfg.to_dict()
    d.pop("loss")
    return d


DEFAULTS: dict = {
    "seed": 0,
    "root": None,
    "corpus": {"n_trajectories": 60, "ratios": "dev", "types": list(TRAJ_TYPES), "duration_scale": 1.0},
    "split": {"train": 0.6, "val": 0.1, "val2": 0.1, "test": 0.2},
    "window": {"T": 100, "step": 10, "inference_step": 10},
    "tcae": {"L": None, "k": 9, "n_filters": 64, "n_1x1": 16, "c_latent": 16, "s": 4,
             "dropout": 0.12, "b": 2, "abs_residual": False},
    "tcae_train": {"lr": 1e-3, "batch_size": 4096, "patience": 20, "max_epochs": 200, "micro_batch": 512},
    "detector": {"features": "z", "imbalance": "threshold", "calibration": "isotonic",
                 "gbt": _gbt_dict(BINARY_DEFAULTS)},
    "diagnoser": {"features": "r", "calibration": "isotonic", "gbt": _gbt_dict(MULTICLASS_DEFAULTS)},
    "cusum": {"T_fp": 0.75, "T_cs": 4.0, "kappa": 0.02},
    "ood": {"alpha": 0.01, "thr_ood_cs": 100, "n_per_class": 3, "source_split": "train"},
    "eval": {"reliability_bins": 5, "metric_bins": [5, 10, 15, 20], "max_fpr": None, "min_detection_recall": None},
    "bench": {"rows": "all", "max_epochs": None, "timing_windows": 100},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("ratios",):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(expr: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with the value parsed as YAML (numbers, bools, lists)."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} is not of the form key=value")
    key, raw = expr.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    for expr in overrides or ():
        keys, value = parse_override(expr)
        node = d
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return d


@dataclass(frozen=True)
class PipelineConfig:
    raw: dict

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict | None = None, overrides=()) -> "PipelineConfig":
        merged = _merge(DEFAULTS, d or {})
        merged = apply_overrides(merged, overrides)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        d = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            try:
                d = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            if not isinstance(d, dict):
                raise ConfigError("config file must hold a mapping")
        return cls.from_dict(d, overrides)

    def validate(self) -> None:
        r = self.raw
        try:
            self.split_spec
            self.tcae_config
            self.train_config
            self.detector_gbt
            self.diagnoser_gbt
            self.dataset_spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        w = r["window"]
        if w["step"] != w["inference_step"]:
            raise ConfigError("window.step and window.inference_step must match")
        if w["step"] < 1 or w["T"] < 2:
            raise ConfigError("window.T must be >= 2 and window.step >= 1")
        for name in ("detector", "diagnoser"):
            if r[name]["calibration"] not in METHODS:
                raise ConfigError(f"{name}.calibration must be one of {METHODS}")
            if r[name]["features"] not in ("z", "r"):
                raise ConfigError(f"{name}.features must be 'z' or 'r'")
        if r["detector"]["imbalance"] not in IMBALANCE_METHODS:
            raise ConfigError(f"detector.imbalance must be one of {IMBALANCE_METHODS}")
        c = r["cusum"]
        if not 0 <= c["T_fp"] <= 1 or c["T_cs"] < 0 or c["kappa"] < 0:
            raise ConfigError("cusum requires T_fp in [0, 1], T_cs >= 0, kappa >= 0")
        o = r["ood"]
        if not 0 < o["alpha"] < 1 or o["thr_ood_cs"] < 0 or o["n_per_class"] < 0:
            raise ConfigError("ood requires alpha in (0, 1), thr_ood_cs >= 0, n_per_class >= 0")
        if o["source_split"] not in ("train", "val", "val2", "test"):
            raise ConfigError("ood.source_split must name a split")

    # -- typed views -------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def T(self) -> int:
        return int(self.raw["window"]["T"])

    @property
    def step(self) -> int:
        return int(self.raw["window"]["step"])

    @property
    def dataset_spec(self) -> DatasetSpec:
        c = self.raw["corpus"]
        ratios = RATIO_PRESETS.get(c["ratios"]) if isinstance(c["ratios"], str) else c["ratios"]
        if ratios is None:
            raise ConfigError(f"unknown ratio preset {c['ratios']!r}")
        ratios = {int(k): float(v) for k, v in ratios.items()}
        bad = [t for t in c["types"] if t not in TRAJ_TYPES]
        if bad:
            raise ConfigError(f"unknown trajectory types {bad}")
        if c["n_trajectories"] < 0 or c["duration_scale"] <= 0:
            raise ConfigError("corpus needs n_trajectories >= 0 and duration_scale > 0")
        return DatasetSpec.from_ratios(int(c["n_trajectories"]), ratios, tuple(c["types"]),
                                       float(c["duration_scale"]))

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.raw["split"])

    @property
    def tcae_config(self) -> TcaeConfig:
        return TcaeConfig(T=self.T, c=N_CHANNELS, **self.raw["tcae"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.raw["tcae_train"])

    @property
    def detector_gbt(self) -> GbtConfig:
        return GbtConfig(loss="logistic", **self.raw["detector"]["gbt"])

    @property
    def diagnoser_gbt(self) -> GbtConfig:
        return GbtConfig(loss="softmax", **self.raw["diagnoser"]["gbt"])

    def root(self, override=None) -> Path:
        """Data root: explicit argument, then the environment, then the config."""
        for cand in (override, os.environ.get(ROOT_ENV), self.raw.get("root")):
            if cand:
                return Path(cand)
        raise ConfigError(f"no data root: pass --root, set {ROOT_ENV}, or set 'root' in the config")

    # -- provenance ----------------------------------------------------------------

    def _sections(self, *names) -> dict:
        return {n: self.raw[n] for n in names}

    def stage_hash(self, stage: str) -> str:
        """Hash of the configuration sections a stage's output depends on."""
        deps = {
            "corpus": ("seed", "corpus"),
            "split": ("seed", "corpus", "split", "window"),
            "tcae": ("seed", "corpus", "split", "window", "tcae", "tcae_train"),
            "features": ("seed", "corpus", "split", "window", "tcae", "tcae_train"),
            "detector": ("seed", "corpus", "split", "window", "tcae", "tcae_train", "detector"),
            "diagnoser": ("seed", "corpus", "split", "window", "tcae", "tcae_train", "diagnoser"),
            "calibration": ("seed", "corpus", "split", "window", "tcae", "tcae_train", "detector", "diagnoser"),
            "ood": ("seed", "corpus", "split", "window", "tcae", "tcae_train", "ood"),
            "evaluate": ("seed", "corpus", "split", "window", "tcae", "tcae_train", "detector",
                         "diagnoser", "cusum", "ood", "eval"),
        }[stage]
        return container.hash_obj({"stage": stage, **self._sections(*deps)})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)
