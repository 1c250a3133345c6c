"""Inductive conformal anomaly detection on reconstruction error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.01
DEFAULT_THR_OOD_CS = 100


def conformal_rank(n: int, alpha: float) -> int:
    """1-indexed order statistic ceil((n + 1)(1 - alpha)), robust to float noise."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


@dataclass(frozen=True)
class ConformalThreshold:
    thr_ood: float
    alpha: float
    n: int
    errors: np.ndarray  # sorted calibration errors

    def is_ood(self, e) -> np.ndarray | bool:
        res = np.asarray(e, dtype=np.float64) > self.thr_ood
        return bool(res) if res.ndim == 0 else res

    def p_value(self, e: float) -> float:
        """Conformal p-value (1 + #{cal >= e}) / (n + 1)."""
        ge = self.n - np.searchsorted(self.errors, e, side="left")
        return float((1 + ge) / (self.n + 1))

    def to_dict(self) -> dict:
        return {"thr_ood": float(self.thr_ood), "alpha": float(self.alpha), "n": int(self.n)}


def calibrate(errors, alpha: float = DEFAULT_ALPHA) -> ConformalThreshold:
    """Threshold at the ceil((n+1)(1-alpha))-th smallest calibration error.

    Raises:
        ValueError: if the calibration set is too small for ``alpha``.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    n = e.size
    rank = conformal_rank(n, alpha)
    if n == 0 or rank > n:
        raise ValueError(f"{n} calibration errors are too few for alpha={alpha} (rank {rank})")
    return ConformalThreshold(float(e[rank - 1]), float(alpha), int(n), e)


def is_ood(thr: ConformalThreshold, e) -> np.ndarray | bool:
    return thr.is_ood(e)


@dataclass
class OodTrajectoryState:
    thr_ood_cs: int = DEFAULT_THR_OOD_CS
    n_ood: int = 0
    warned: bool = False
    warn_index: int | None = None
    n_steps: int = 0

    def step(self, flag: bool) -> bool:
        if flag:
            self.n_ood += 1
        if not self.warned and self.n_ood > self.thr_ood_cs:
            self.warned = True
            self.warn_index = self.n_steps
        self.n_steps += 1
        return self.warned

    def reset(self) -> None:
        self.n_ood = 0
        self.warned = False
        self.warn_index = None
        self.n_steps = 0


def step_trajectory(state: OodTrajectoryState, flag: bool) -> OodTrajectoryState:
    state.step(flag)
    return state
