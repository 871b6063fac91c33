"""Synthetic series: a sinusoid-plus-ramps toy and a minimal glucose/insulin/meal model.

Both generators emit :class:`~sivforecast.transform.IndividualSeries` with the
``carbs`` / ``bolus`` SIV columns, so everything downstream treats them the
same way as externally supplied CSV data.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .transform import IndividualSeries

STEP_MIN = 5  # sampling interval in minutes
POINTS_PER_DAY = 24 * 60 // STEP_MIN


class SimulationError(FloatingPointError):
    pass


# ---------------------------------------------------------------- toy data

@dataclass
class ToyConfig:
    """Oscillating target plus a triangular response to each SIV event.

    ``carb_gain`` / ``bolus_gain`` are the per-step slope per unit of event
    magnitude; bolus events push the target down. Event rates are per
    timepoint. By default only carbohydrate events occur, about one per 12
    hours of 5-minute samples; the bolus column stays all zero.
    """

    length: int = 720
    baseline: float = 150.0
    amplitude: float = 30.0
    period: float = 96.0
    phase: float = 0.0
    duration: int = 12
    carb_gain: float = 0.12
    carb_rate: float = 1 / 144
    carb_size: tuple[float, float] = (20.0, 80.0)
    bolus_gain: float = 1.2
    bolus_rate: float = 0.0
    bolus_size: tuple[float, float] = (2.0, 8.0)
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.period <= 0 or self.duration < 1 or self.length < 1:
            raise ValueError(f"invalid toy config: {self}")


def ramp_response(length: int, t0: int, magnitude: float, gain: float, duration: int) -> np.ndarray:
    """Rise by ``gain*magnitude`` per step for ``duration`` steps, then fall back at the same rate."""
    out = np.zeros(length)
    tau = np.arange(length) - t0
    up = (tau >= 0) & (tau <= duration)
    down = (tau > duration) & (tau <= 2 * duration)
    out[up] = gain * magnitude * tau[up]
    out[down] = gain * magnitude * (2 * duration - tau[down])
    return out


def _draw_events(rng: np.random.Generator, length: int, rate: float,
                 size: tuple[float, float]) -> np.ndarray:
    events = np.zeros(length)
    if rate <= 0:
        return events
    t = int(rng.geometric(rate)) - 1
    while t < length:
        events[t] = round(float(rng.uniform(*size)), 1)
        t += int(rng.geometric(rate))
    return events


def gen_toy(cfg: ToyConfig, ident: str = "toy") -> IndividualSeries:
    rng = np.random.default_rng(cfg.seed)
    L = cfg.length
    t = np.arange(L)
    carbs = _draw_events(rng, L, cfg.carb_rate, cfg.carb_size)
    bolus = _draw_events(rng, L, cfg.bolus_rate, cfg.bolus_size)
    target = cfg.baseline + cfg.amplitude * np.sin(2 * np.pi * t / cfg.period + cfg.phase)
    for t0 in np.flatnonzero(carbs):
        target += ramp_response(L, t0, carbs[t0], cfg.carb_gain, cfg.duration)
    for t0 in np.flatnonzero(bolus):
        target -= ramp_response(L, t0, bolus[t0], cfg.bolus_gain, cfg.duration)
    if cfg.noise_sd > 0:
        target = target + rng.normal(0.0, cfg.noise_sd, L)
    return IndividualSeries(ident, target, np.stack([carbs, bolus], axis=1))


def toy_individual(index: int, seed: int, length: int = 720, **overrides) -> ToyConfig:
    """Per-individual toy settings drawn from fixed ranges."""
    rng = np.random.default_rng([seed, index])
    params = dict(
        length=length,
        baseline=float(rng.uniform(120, 170)),
        amplitude=float(rng.uniform(15, 35)),
        period=float(rng.uniform(72, 144)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        carb_gain=float(rng.uniform(0.08, 0.14)),
        bolus_gain=float(rng.uniform(0.8, 1.4)),
        seed=int(rng.integers(2**31)),
    )
    params.update(overrides)
    return ToyConfig(**params)


# ------------------------------------------------------------ physiology

@dataclass
class PhysioConfig:
    """Minimal glucose model with gut carbohydrate and remote insulin compartments.

    dG/dt = -p1 (G - Gb) - SI I G + carb_gain k_abs M
    dI/dt = -k_I I          (boluses add to I)
    dM/dt = -k_abs M        (meals add to M, grams)
    """

    days: int = 10
    basal_glucose: float = 120.0
    p1: float = 0.02
    insulin_sensitivity: float = 0.0035
    k_insulin: float = 0.025
    k_abs: float = 0.03
    carb_gain: float = 3.0  # mg/dL per gram absorbed
    meals_per_day: int = 3
    meal_anchors_min: tuple[float, ...] = (7 * 60.0, 12.5 * 60.0, 18.5 * 60.0)
    meal_jitter_min: float = 30.0
    meal_size: tuple[float, float] = (30.0, 90.0)
    carb_ratio: float = 10.0  # grams per unit
    bolus_delay_min: tuple[float, float] = (20.0, 120.0)
    delay_probability: float = 0.75
    noise_sd: float = 2.0
    g0: float | None = None
    seed: int = 0

    def __post_init__(self):
        rates = (self.p1, self.insulin_sensitivity, self.k_insulin, self.k_abs, self.carb_gain)
        if min(rates) <= 0:
            raise ValueError(f"rate constants must be positive: {rates}")
        if not 70 < self.basal_glucose < 180:
            raise ValueError(f"basal glucose {self.basal_glucose} outside (70, 180) mg/dL")
        if self.days < 1:
            raise ValueError("days must be at least 1")


@dataclass
class EventSchedule:
    meal_min: np.ndarray
    meal_g: np.ndarray
    bolus_min: np.ndarray
    bolus_u: np.ndarray
    delayed: np.ndarray  # bool per bolus


def schedule_events(cfg: PhysioConfig, rng: np.random.Generator) -> EventSchedule:
    """Three anchored meals a day, each with a bolus that is delayed with probability 0.75."""
    meal_min, meal_g = [], []
    for day in range(cfg.days):
        for anchor in cfg.meal_anchors_min[:cfg.meals_per_day]:
            jitter = rng.uniform(-cfg.meal_jitter_min, cfg.meal_jitter_min)
            meal_min.append(float(round(day * 1440 + anchor + jitter)))
            meal_g.append(round(float(rng.uniform(*cfg.meal_size)), 1))
    meal_min = np.array(meal_min)
    meal_g = np.array(meal_g)
    delayed = rng.uniform(size=len(meal_min)) < cfg.delay_probability
    lo, hi = cfg.bolus_delay_min
    delays = np.where(delayed, rng.uniform(lo, hi, len(meal_min)), 0.0)
    bolus_min = np.round(meal_min + delays)
    # rounding to whole minutes must keep delayed boluses strictly inside the range
    bolus_min = np.where(delayed, np.clip(bolus_min, meal_min + lo + 1, meal_min + hi - 1), bolus_min)
    bolus_u = np.round(meal_g / cfg.carb_ratio, 2)
    return EventSchedule(meal_min, meal_g, bolus_min, bolus_u, delayed)


def _deriv(state: np.ndarray, cfg: PhysioConfig) -> np.ndarray:
    G, I, M = state
    return np.array([
        -cfg.p1 * (G - cfg.basal_glucose) - cfg.insulin_sensitivity * I * G
        + cfg.carb_gain * cfg.k_abs * M,
        -cfg.k_insulin * I,
        -cfg.k_abs * M,
    ])


def integrate(cfg: PhysioConfig, events: EventSchedule, minutes: int) -> np.ndarray:
    """Noise-free glucose at every whole minute via RK4 with a 1-minute step."""
    carb_in = np.zeros(minutes + 1)
    bolus_in = np.zeros(minutes + 1)
    for t, g in zip(events.meal_min.astype(int), events.meal_g):
        if 0 <= t <= minutes:
            carb_in[t] += g
    for t, u in zip(events.bolus_min.astype(int), events.bolus_u):
        if 0 <= t <= minutes:
            bolus_in[t] += u
    state = np.array([cfg.basal_glucose if cfg.g0 is None else cfg.g0, 0.0, 0.0])
    out = np.empty(minutes + 1)
    for t in range(minutes + 1):
        state[1] += bolus_in[t]
        state[2] += carb_in[t]
        out[t] = state[0]
        k1 = _deriv(state, cfg)
        k2 = _deriv(state + 0.5 * k1, cfg)
        k3 = _deriv(state + 0.5 * k2, cfg)
        k4 = _deriv(state + k3, cfg)
        state = state + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not np.all(np.isfinite(state)):
            raise SimulationError(f"non-finite state at minute {t}")
    return out


def simulate_physio(cfg: PhysioConfig, ident: str = "patient",
                    events: EventSchedule | None = None) -> tuple[IndividualSeries, EventSchedule]:
    rng = np.random.default_rng(cfg.seed)
    if events is None:
        events = schedule_events(cfg, rng)
    n = cfg.days * POINTS_PER_DAY
    minutes = n * STEP_MIN
    glucose = integrate(cfg, events, minutes)[: minutes : STEP_MIN].copy()
    if cfg.noise_sd > 0:
        glucose += rng.normal(0.0, cfg.noise_sd, n)
    sivs = np.zeros((n, 2))
    for t, g in zip(events.meal_min, events.meal_g):
        if t < minutes:
            sivs[int(t) // STEP_MIN, 0] += g
    for t, u in zip(events.bolus_min, events.bolus_u):
        if t < minutes:
            sivs[int(t) // STEP_MIN, 1] += u
    return IndividualSeries(ident, glucose, sivs), events


def physio_individual(index: int, seed: int, days: int = 10, **overrides) -> PhysioConfig:
    """Per-individual physiological parameters drawn from fixed ranges."""
    rng = np.random.default_rng([seed, index, 1])
    params = dict(
        days=days,
        basal_glucose=float(rng.uniform(100, 150)),
        p1=float(rng.uniform(0.015, 0.03)),
        insulin_sensitivity=float(rng.uniform(0.0025, 0.0045)),
        k_insulin=float(rng.uniform(0.02, 0.03)),
        k_abs=float(rng.uniform(0.02, 0.04)),
        carb_gain=float(rng.uniform(2.5, 3.5)),
        carb_ratio=float(rng.uniform(8, 15)),
        seed=int(rng.integers(2**31)),
    )
    params.update(overrides)
    return PhysioConfig(**params)


# ------------------------------------------------------------ corruption

@dataclass
class CorruptionSpec:
    missing_fraction: float = 0.0
    noise_magnitude: float = 0.0
    channel: int = 0  # carbohydrates
    seed: int = 0

    def __post_init__(self):
        for name in ("missing_fraction", "noise_magnitude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.missing_fraction == 0 and self.noise_magnitude == 0


def corrupt(series: IndividualSeries, spec: CorruptionSpec) -> IndividualSeries:
    """Hide nonzero SIV entries with probability ``missing_fraction``, then
    multiply survivors by ``1 + u``, ``u ~ U(-noise, noise)``, clamped at 0."""
    if spec.is_identity:
        return series
    rng = np.random.default_rng(spec.seed)
    sivs = series.sivs.copy()
    col = sivs[:, spec.channel]
    nz = np.flatnonzero(col)
    hide = rng.uniform(size=len(nz)) < spec.missing_fraction
    col[nz[hide]] = 0.0
    keep = nz[~hide]
    if spec.noise_magnitude > 0:
        u = rng.uniform(-spec.noise_magnitude, spec.noise_magnitude, len(keep))
        col[keep] = np.maximum(col[keep] * (1.0 + u), 0.0)
    sivs[:, spec.channel] = col
    return IndividualSeries(series.ident, series.target.copy(), sivs, series.siv_names,
                            series.t.copy())


# -------------------------------------------------------------- manifest

def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Manifest:
    generator: str
    seed: int
    individuals: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def event_log(series: IndividualSeries) -> list[dict]:
    log = []
    for s, name in enumerate(series.siv_names):
        for t in np.flatnonzero(series.sivs[:, s]):
            log.append({"t": int(series.t[t]), "channel": name, "value": float(series.sivs[t, s])})
    return sorted(log, key=lambda e: (e["t"], e["channel"]))


def mean_event_gap(series: IndividualSeries) -> float:
    gaps = []
    for s in range(series.sivs.shape[1]):
        idx = np.flatnonzero(series.sivs[:, s])
        gaps.extend(np.diff(idx))
    return float(np.mean(gaps)) if gaps else math.inf
