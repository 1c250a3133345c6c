"""Synthetic trajectories of an electrically actuated valve.

The physical model is a toy stand-in: a permanent-magnet synchronous motor in
the rotating dq frame drives the valve through a gearbox and is controlled by a
cascade of position (P + speed feed-forward), speed (PI) and dq current (PI)
loops running at the 1 kHz sample rate.

Plant equations (per unit of simulated time, explicit in the mechanics and
semi-implicit in the stator currents)::

    Ld did/dt = vd - R id + we Lq iq
    Lq diq/dt = vq - R iq - we Ld id - we psi
    Te        = 1.5 p (psi iq + (Ld - Lq) id iq)
    J dw/dt   = Te - B w - Tc tanh(w / w_eps) - T_load - U sin(theta)
    dtheta/dt = w,   we = p w

Nine scalar inputs (``PhysicalParams``) scale the base values below. Each field
uses the units of ``PARAM_RANGES``; all except resistance, saliency and
unbalance are percentages of the base value, resistance is mapped with
``RESISTANCE_PER_UNIT`` and saliency/unbalance are used as percentages directly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container

CHANNELS = (
    "Vd_Ref", "Vq_Ref", "Ws", "Iq_Ref", "Id_Meas", "Iq_Meas",
    "PosM_Set", "PosM_Ref", "PosM_Meas", "SpeedM_Ref", "SpeedM_Meas",
    "TqM_Ref", "PosV_Set", "PosV_Meas",
)
N_CHANNELS = len(CHANNELS)
SAMPLE_RATE = 1000
TRAJ_TYPES = ("T1", "T2", "T3")
DEFAULT_DURATION = {"T1": 60.0, "T2": 5.0, "T3": 15.0}

# (nominal interval, anomalous intervals, label bit)
PARAM_RANGES = {
    "main_flux": ((90.0, 110.0), ((75.0, 85.0), (115.0, 125.0)), 1),
    "mean_inductance": ((90.0, 110.0), ((75.0, 85.0), (115.0, 125.0)), 2),
    "saliency": ((0.0, 3.0), ((5.0, 10.0),), 4),
    "resistance": ((100.0, 150.0), ((50.0, 90.0), (160.0, 200.0)), 8),
    "inertia": ((90.0, 110.0), ((50.0, 80.0), (120.0, 150.0)), 16),
    "friction": ((0.0, 110.0), ((125.0, 200.0),), 32),
    "dry_friction": ((0.0, 110.0), ((125.0, 200.0),), 64),
    "load_torque": ((0.0, 110.0), ((125.0, 200.0),), 128),
    "unbalance": ((0.0, 2.0), ((5.0, 20.0),), 256),
}
FAULT_LABELS = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 511)
OOD_TRANSFORMS = {20: (-1.0, 5.0, 0.0), 21: (1.0, 5.0, 0.0), 22: (1.0, 5.0, 1e-5)}
OOD_LABELS = tuple(OOD_TRANSFORMS)

# base values the percentages refer to
POLE_PAIRS = 4
GEAR_RATIO = 60.0
FLUX_BASE = 0.05  # Wb
INDUCTANCE_BASE = 2e-3  # H
RESISTANCE_PER_UNIT = 0.004  # Ohm per table unit
INERTIA_BASE = 2e-4  # kg m^2
FRICTION_BASE = 2e-4  # N m s / rad
DRY_FRICTION_BASE = 0.02  # N m
LOAD_TORQUE_BASE = 0.15  # N m
UNBALANCE_BASE = 1.0  # N m at 100 %
DRY_FRICTION_SPEED = 1.0  # rad/s, tanh smoothing of the Coulomb term

# controller, tuned on the nominal centre point; the controller never sees faults
_KT_NOMINAL = 1.5 * POLE_PAIRS * FLUX_BASE
_REF_MAX_SPEED = 200.0  # rad/s motor side
_REF_MAX_ACCEL = 4000.0  # rad/s^2
_POS_GAIN = 30.0  # 1/s
_SPEED_KP = 0.1  # A per rad/s
_SPEED_KI = 3.75
_CURRENT_KP = 1.2  # V/A
_CURRENT_KI = 300.0
_IQ_LIMIT = 15.0  # A
_V_LIMIT = 120.0  # V
_SUBSTEPS = 4

# white noise added to every logged channel, 1 % of the nominal channel span
CHANNEL_SPAN = {
    "Vd_Ref": 10.0, "Vq_Ref": 60.0, "Ws": 800.0, "Iq_Ref": 6.0, "Id_Meas": 1.0,
    "Iq_Meas": 6.0, "PosM_Set": 130.0, "PosM_Ref": 130.0, "PosM_Meas": 130.0,
    "SpeedM_Ref": 200.0, "SpeedM_Meas": 200.0, "TqM_Ref": 1.8, "PosV_Set": 120.0,
    "PosV_Meas": 120.0,
}
NOISE_FRACTION = 0.01


@dataclass(frozen=True)
class PhysicalParams:
    main_flux: float = 100.0
    mean_inductance: float = 100.0
    saliency: float = 1.5
    resistance: float = 125.0
    inertia: float = 100.0
    friction: float = 55.0
    dry_friction: float = 55.0
    load_torque: float = 55.0
    unbalance: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ValueError(f"{f.name} must be a finite number, got {v!r}")
            if _membership(f.name, v) is None:
                raise ValueError(f"{f.name}={v} is outside both its nominal and anomalous ranges")

    @property
    def label(self) -> int:
        out = 0
        for name, (_, _, bit) in PARAM_RANGES.items():
            if _membership(name, getattr(self, name)):
                out |= bit
        return out


def _membership(name: str, value: float) -> bool | None:
    """False if nominal, True if anomalous, None if in neither range."""
    (lo, hi), anomalous, _ = PARAM_RANGES[name]
    if lo <= value <= hi:
        return False
    if any(a <= value <= b for a, b in anomalous):
        return True
    return None


@dataclass
class Trajectory:
    """Labeled multichannel series; ``data`` has shape (n_channels, n_samples)."""

    data: np.ndarray
    label: int
    traj_type: str
    id: int
    sample_rate: int = SAMPLE_RATE
    channels: tuple = CHANNELS

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.channels = tuple(self.channels)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels) or self.data.shape[1] == 0:
            raise ValueError(f"data shape {self.data.shape} does not match {len(self.channels)} channels")
        if self.channels != CHANNELS:
            raise ValueError("channel names do not match the expected signal set")
        if self.traj_type not in TRAJ_TYPES:
            raise ValueError(f"unknown trajectory type {self.traj_type!r}")
        if self.label not in FAULT_LABELS and self.label not in OOD_LABELS:
            raise ValueError(f"unknown label {self.label}")

    def __len__(self):
        return self.data.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channels.index(name)]


def sample_params(label: int, seed) -> PhysicalParams:
    """Draw parameters whose anomalous set is exactly the bits of ``label``."""
    if label not in FAULT_LABELS:
        raise ValueError(f"unknown label {label}")
    rng = np.random.default_rng(seed)
    values = {}
    for name, ((lo, hi), anomalous, bit) in PARAM_RANGES.items():
        if label & bit:
            widths = np.array([b - a for a, b in anomalous])
            k = rng.choice(len(anomalous), p=widths / widths.sum())
            lo, hi = anomalous[k]
        values[name] = float(rng.uniform(lo, hi))
    return PhysicalParams(**values)


def setpoint_profile(traj_type: str, t: np.ndarray) -> np.ndarray:
    """Valve set-point in degrees as a function of time (s)."""
    if traj_type == "T1":
        knots = [(0.0, 0.0), (2.0, 60.0), (14.0, 120.0), (26.0, 40.0), (38.0, 90.0), (50.0, 10.0)]
    elif traj_type == "T2":
        knots = [(0.0, 0.0), (0.5, 90.0), (2.5, 0.0)]
    elif traj_type == "T3":
        knots = [(0.0, 0.0)] + [(1.0 + 1.5 * i, 20.0 * (i + 1)) for i in range(7)]
    else:
        raise ValueError(f"unknown trajectory type {traj_type!r}")
    times = np.array([k[0] for k in knots])
    levels = np.array([k[1] for k in knots])
    return levels[np.searchsorted(times, t, side="right") - 1]


def _param_arrays(params: list[PhysicalParams]) -> dict[str, np.ndarray]:
    def col(name):
        return np.array([getattr(p, name) for p in params], dtype=np.float64)

    psi = FLUX_BASE * col("main_flux") / 100.0
    lm = INDUCTANCE_BASE * col("mean_inductance") / 100.0
    sal = col("saliency") / 100.0
    return {
        "psi": psi,
        "ld": lm * (1.0 - sal),
        "lq": lm * (1.0 + sal),
        "r": RESISTANCE_PER_UNIT * col("resistance"),
        "j": INERTIA_BASE * col("inertia") / 100.0,
        "b": FRICTION_BASE * col("friction") / 100.0,
        "tc": DRY_FRICTION_BASE * col("dry_friction") / 100.0,
        "tl": LOAD_TORQUE_BASE * col("load_torque") / 100.0,
        "u": UNBALANCE_BASE * col("unbalance") / 100.0,
    }


def simulate_batch(params: list[PhysicalParams], traj_type: str, duration: float,
                   seeds: list) -> np.ndarray:
    """Simulate several trajectories of one type in lock-step.

    Returns:
        float64 array of shape (batch, N_CHANNELS, n_samples).
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    if len(params) != len(seeds):
        raise ValueError("params and seeds must have equal length")
    n = int(round(duration * SAMPLE_RATE))
    if n < 1:
        raise ValueError("duration shorter than one sample")
    bsz = len(params)
    p = _param_arrays(params)
    dt = 1.0 / SAMPLE_RATE
    h = dt / _SUBSTEPS

    set_deg = setpoint_profile(traj_type, np.arange(n) * dt)
    set_rad = np.deg2rad(set_deg) * GEAR_RATIO

    out = np.empty((bsz, N_CHANNELS, n))
    ix = {c: k for k, c in enumerate(CHANNELS)}

    zeros = np.zeros(bsz)
    theta, omega, i_d, i_q = zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy()
    # let the load settle the shaft before t=0: hold torque equals load at rest
    i_q += p["tl"] / (1.5 * POLE_PAIRS * p["psi"])
    pos_ref, spd_ref_gen = zeros.copy(), zeros.copy()
    int_w = i_q.copy()
    int_d, int_q = zeros.copy(), p["r"] * i_q
    vd = zeros.copy()
    vq = p["r"] * i_q

    for k in range(n):
        id_m, iq_m, pos_m, spd_m = i_d, i_q, theta, omega

        # reference generator: acceleration- and speed-limited approach to the set-point
        err = set_rad[k] - pos_ref
        v_des = np.clip(np.sign(err) * np.sqrt(2.0 * _REF_MAX_ACCEL * np.abs(err)),
                        -_REF_MAX_SPEED, _REF_MAX_SPEED)
        dv = np.clip(v_des - spd_ref_gen, -_REF_MAX_ACCEL * dt, _REF_MAX_ACCEL * dt)
        spd_ref_gen = spd_ref_gen + dv
        pos_ref = pos_ref + spd_ref_gen * dt

        # position loop (P + feed-forward), speed loop (PI), torque -> current
        spd_ref = spd_ref_gen + _POS_GAIN * (pos_ref - pos_m)
        e_w = spd_ref - spd_m
        int_w = int_w + _SPEED_KI * e_w * dt
        iq_ref = np.clip(_SPEED_KP * e_w + int_w, -_IQ_LIMIT, _IQ_LIMIT)
        int_w = np.clip(int_w, -_IQ_LIMIT, _IQ_LIMIT)
        tq_ref = _KT_NOMINAL * iq_ref

        # current loops with nominal-inductance decoupling
        we_m = POLE_PAIRS * spd_m
        e_d = 0.0 - id_m
        e_q = iq_ref - iq_m
        int_d = int_d + _CURRENT_KI * e_d * dt
        int_q = int_q + _CURRENT_KI * e_q * dt
        vd = np.clip(_CURRENT_KP * e_d + int_d - we_m * INDUCTANCE_BASE * iq_m, -_V_LIMIT, _V_LIMIT)
        vq = np.clip(_CURRENT_KP * e_q + int_q + we_m * (INDUCTANCE_BASE * id_m + FLUX_BASE),
                     -_V_LIMIT, _V_LIMIT)

        out[:, ix["Vd_Ref"], k] = vd
        out[:, ix["Vq_Ref"], k] = vq
        out[:, ix["Ws"], k] = we_m
        out[:, ix["Iq_Ref"], k] = iq_ref
        out[:, ix["Id_Meas"], k] = id_m
        out[:, ix["Iq_Meas"], k] = iq_m
        out[:, ix["PosM_Set"], k] = set_rad[k]
        out[:, ix["PosM_Ref"], k] = pos_ref
        out[:, ix["PosM_Meas"], k] = pos_m
        out[:, ix["SpeedM_Ref"], k] = spd_ref
        out[:, ix["SpeedM_Meas"], k] = spd_m
        out[:, ix["TqM_Ref"], k] = tq_ref
        out[:, ix["PosV_Set"], k] = set_deg[k]
        out[:, ix["PosV_Meas"], k] = np.rad2deg(theta / GEAR_RATIO)

        for _ in range(_SUBSTEPS):
            we = POLE_PAIRS * omega
            # semi-implicit stator currents: resistive term implicit
            i_d = (i_d + h / p["ld"] * (vd + we * p["lq"] * i_q)) / (1.0 + h * p["r"] / p["ld"])
            i_q = (i_q + h / p["lq"] * (vq - we * p["ld"] * i_d - we * p["psi"])) / (1.0 + h * p["r"] / p["lq"])
            te = 1.5 * POLE_PAIRS * (p["psi"] * i_q + (p["ld"] - p["lq"]) * i_d * i_q)
            t_fric = p["b"] * omega + p["tc"] * np.tanh(omega / DRY_FRICTION_SPEED)
            acc = (te - t_fric - p["tl"] - p["u"] * np.sin(theta)) / p["j"]
            omega = omega + h * acc
            theta = theta + h * omega

    span = np.array([CHANNEL_SPAN[c] for c in CHANNELS])
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        out[i] += NOISE_FRACTION * span[:, None] * rng.standard_normal((N_CHANNELS, n))
    return out


def simulate(params: PhysicalParams, traj_type: str, duration: float | None = None,
             seed=0, traj_id: int = 0) -> Trajectory:
    """Simulate one trajectory; bit-reproducible for fixed arguments."""
    if traj_type not in TRAJ_TYPES:
        raise ValueError(f"unknown trajectory type {traj_type!r}")
    if not isinstance(params, PhysicalParams):
        raise TypeError("params must be a PhysicalParams")
    duration = DEFAULT_DURATION[traj_type] if duration is None else duration
    data = simulate_batch([params], traj_type, duration, [seed])[0]
    return Trajectory(data, params.label, traj_type, traj_id)


def make_ood(src: Trajectory, var: float, shift: float, trend: float,
             label: int | None = None, traj_id: int | None = None) -> Trajectory:
    """Affine corruption x_i -> x_i * var + shift + i * trend on every channel.

    The label defaults to the synthetic OOD class registered for the parameter
    triple, falling back to 20 for unregistered transforms.
    """
    if label is None:
        label = next((c for c, t in OOD_TRANSFORMS.items() if t == (var, shift, trend)), 20)
    i = np.arange(len(src), dtype=np.float64)
    data = src.data.astype(np.float64) * var + shift + i[None, :] * trend
    return Trajectory(data, label, src.traj_type, src.id if traj_id is None else traj_id,
                      src.sample_rate, src.channels)


@dataclass(frozen=True)
class DatasetSpec:
    """How many trajectories of each (label, type) to generate."""

    counts: dict  # {(label, traj_type): count}
    duration_scale: float = 1.0

    @classmethod
    def from_ratios(cls, n_total: int, class_ratios: dict, types=TRAJ_TYPES,
                    duration_scale: float = 1.0) -> "DatasetSpec":
        """Split ``n_total`` over classes by ratio, then round-robin over types."""
        counts = {}
        labels = sorted(class_ratios)
        per_class = {c: int(round(n_total * class_ratios[c])) for c in labels}
        # fix rounding drift on the largest class
        drift = n_total - sum(per_class.values())
        if drift:
            big = max(labels, key=lambda c: class_ratios[c])
            per_class[big] += drift
        for c in labels:
            for j, tt in enumerate(types):
                m = per_class[c] // len(types) + (1 if j < per_class[c] % len(types) else 0)
                if m:
                    counts[(c, tt)] = m
        return cls(counts, duration_scale)

    def total(self) -> int:
        return sum(self.counts.values())


DEV_RATIOS = {0: 0.25, 16: 0.25, 128: 0.25, 511: 0.25}
FINAL_RATIOS = {0: 0.85, 16: 0.05, 128: 0.05, 511: 0.05}


def generate_dataset(spec: DatasetSpec, seed: int, first_id: int = 0) -> list[Trajectory]:
    """Generate a reproducible corpus, ordered by (label, type, index)."""
    ss = np.random.SeedSequence(seed)
    keys = sorted(spec.counts)
    for key in keys:
        if spec.counts[key] < 0:
            raise ValueError("counts must be non-negative")
    jobs = []
    for label, tt in keys:
        for _ in range(spec.counts[(label, tt)]):
            jobs.append((label, tt))
    children = ss.spawn(len(jobs))
    trajs: list[Trajectory | None] = [None] * len(jobs)
    for tt in TRAJ_TYPES:
        idx = [i for i, j in enumerate(jobs) if j[1] == tt]
        if not idx:
            continue
        params, seeds = [], []
        for i in idx:
            pseed, nseed = children[i].spawn(2)
            params.append(sample_params(jobs[i][0], pseed))
            seeds.append(nseed)
        duration = DEFAULT_DURATION[tt] * spec.duration_scale
        for chunk in range(0, len(idx), 64):
            sl = slice(chunk, chunk + 64)
            data = simulate_batch(params[sl], tt, duration, seeds[sl])
            for i, d, prm in zip(idx[sl], data, params[sl]):
                trajs[i] = Trajectory(d, prm.label, tt, first_id + i)
    return trajs


# -- persistence ------------------------------------------------------------

def save_trajectory(traj: Trajectory, path) -> None:
    meta = {"channels": list(traj.channels), "sample_rate": traj.sample_rate,
            "label": traj.label, "traj_type": traj.traj_type, "id": traj.id}
    container.write(path, "trajectory", meta, {"data": traj.data})


def load_trajectory(path) -> Trajectory:
    meta, arrays = container.read(path, kind="trajectory")
    return Trajectory(arrays["data"], meta["label"], meta["traj_type"], meta["id"],
                      meta["sample_rate"], tuple(meta["channels"]))


def export_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# id={traj.id} label={traj.label} traj_type={traj.traj_type} "
                 f"sample_rate={traj.sample_rate}\n")
        w = csv.writer(fh)
        w.writerow(traj.channels)
        for row in traj.data.T:
            w.writerow([repr(float(v)) for v in row])


def params_dict(params: PhysicalParams) -> dict:
    return asdict(params)

