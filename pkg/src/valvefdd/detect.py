"""One-sided CUSUM fault trigger on calibrated failure probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_KAPPA = 0.02
DEFAULT_T_CS = 4.0
DEFAULT_T_FP = 0.75


@dataclass
class CusumState:
    """Stream-local CUSUM accumulator.

    ``kappa`` is the slack subtracted from each increment. Once triggered the
    state is frozen until :meth:`reset`.
    """

    T_fp: float = DEFAULT_T_FP
    T_cs: float = DEFAULT_T_CS
    kappa: float = DEFAULT_KAPPA
    C: float = 0.0
    triggered: bool = False
    trigger_index: int | None = None
    n_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.T_fp <= 1.0:
            raise ValueError("T_fp must lie in [0, 1]")
        if self.T_cs < 0 or self.kappa < 0:
            raise ValueError("T_cs and kappa must be non-negative")

    def step(self, x: float) -> bool:
        """Feed one calibrated failure probability; returns the triggered flag."""
        x = float(x)
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"probability {x} outside [0, 1]")
        if self.triggered:
            return True
        # reference added before subtracting so hand-computed sequences stay exact
        self.C = max(0.0, self.C + (x - (self.T_fp + self.kappa)))
        if self.C > self.T_cs:
            self.triggered = True
            self.trigger_index = self.n_steps
        self.n_steps += 1
        return self.triggered

    def reset(self) -> None:
        self.C = 0.0
        self.triggered = False
        self.trigger_index = None
        self.n_steps = 0


def step(state: CusumState, x: float) -> CusumState:
    state.step(x)
    return state


def first_trigger(probs, T_fp=DEFAULT_T_FP, T_cs=DEFAULT_T_CS, kappa=DEFAULT_KAPPA) -> int | None:
    """Index of the first triggering step in a probability sequence, or None."""
    st = CusumState(T_fp, T_cs, kappa)
    for x in np.asarray(probs, dtype=np.float64).ravel():
        if st.step(x):
            return st.trigger_index
    return None


def adapt_threshold(r_train: float, r_deploy: float) -> float:
    """Decision threshold after a prevalence shift, r / (r + r')."""
    if not (0.0 < r_train < 1.0 and 0.0 < r_deploy < 1.0):
        raise ValueError("prevalences must lie strictly between 0 and 1")
    return r_train / (r_train + r_deploy)


def default_threshold(n_fault_classes: int, balanced: bool = True) -> float:
    """Threshold n / (n + 1) encoding the fault prevalence of balanced per-class data."""
    if n_fault_classes < 1:
        raise ValueError("need at least one fault class")
    if not balanced:
        return 0.5
    return n_fault_classes / (n_fault_classes + 1)
