"""Seeded synthetic OD demand with daily cycles and weather damping.

Rate for destination ``d`` and origin ``o`` in interval ``t``::

    base[d, o] * profile[o](slot(t)) * day_level(day(t)) * shock[o](t) * damping(t - lag)

``profile`` is a per-origin sinusoid averaging to one over a day, so the
long-run mean of each pair equals its base rate when weather, day-level
weekend and shock effects are switched off.  ``shock`` is an optional
per-origin AR(1) process in log space (mean one), a persistent
disturbance that only an input history, not a single snapshot, pins down.  Weather follows a sticky Markov
chain over clear / rain / snow episodes of varying intensity; the six
numeric indicators and the condition label are drawn from the state, so
the meteorology vector carries real information about ``damping``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NYC_METEO_RANGES, METEO_FIELDS, Dataset, GridSpec

_LABELS = {
    (0, 0): "Sunny", (0, 1): "Clear", (0, 2): "Partly Cloudy",
    (1, 0): "Light Rain", (1, 1): "Rainy", (1, 2): "Heavy Rain",
    (2, 0): "Light Snow", (2, 1): "Snowy", (2, 2): "Heavy Snow",
}
# fractional demand loss per (state, intensity) at weather_effect = 1
_PENALTY = np.array([[0.0, 0.0, 0.0], [0.15, 0.3, 0.45], [0.3, 0.5, 0.7]])


@dataclass
class SynthParams:
    interval_minutes: int = 30
    base_rate: float = 8.0
    rate_spread: float = 0.8  # lognormal sigma across pairs; 0 gives flat rates
    daily_amplitude: float = 0.6
    day_sigma: float = 0.1
    weekend_factor: float = 0.8
    weather_effect: float = 1.0
    weather_lag: int = 1
    weather_persistence: float = 0.92
    noise: bool = True
    shock_sigma: float = 0.0  # stationary std of the log shock
    shock_persistence: float = 0.9
    start: str = "2014-01-06T00:00"  # a Monday


def _weather_chain(rng, T: int, persistence: float):
    state = np.zeros(T, dtype=np.int64)
    level = np.zeros(T, dtype=np.int64)
    s, lv = 0, 0
    for t in range(T):
        if t and rng.random() > persistence:
            s = int(rng.choice(3, p=[0.5, 0.3, 0.2]))
            lv = int(rng.integers(3))
        state[t], level[t] = s, lv
    return state, level


def _log_ar1(rng, T: int, width: int, sigma: float, rho: float) -> np.ndarray:
    z = np.empty((T, width))
    z[0] = rng.normal(0, sigma, width)
    innov = rng.normal(0, sigma * np.sqrt(1 - rho * rho), (T, width))
    for t in range(1, T):
        z[t] = rho * z[t - 1] + innov[t]
    return np.exp(z - 0.5 * sigma * sigma)


def _meteo_readings(rng, state, level, slot_frac):
    T = len(state)
    wet = state > 0
    temp = 4.0 + 6.0 * np.sin(2 * np.pi * (slot_frac - 0.375)) - 6.0 * (state == 2) + rng.normal(0, 1.5, T)
    wind = 12.0 + 8.0 * level * wet + rng.gamma(2.0, 3.0, T)
    windchill = temp - 0.25 * wind
    humidity = np.where(wet, 82.0 + 5.0 * level, 55.0) + rng.normal(0, 5.0, T)
    visibility = np.where(wet, 10.0 - 3.5 * level - 2.0 * (state == 2), 15.5) + rng.normal(0, 0.4, T)
    precip = np.where(wet, rng.gamma(2.0, 0.6 * (level + 1), T), 0.0)
    out = np.stack([temp, windchill, humidity, visibility, wind, precip], axis=1)
    lo = np.array([NYC_METEO_RANGES[f][0] for f in METEO_FIELDS])
    hi = np.array([NYC_METEO_RANGES[f][1] for f in METEO_FIELDS])
    return np.clip(out, lo, hi)


def synth_generate(seed: int, grid: GridSpec, intervals: int, params: SynthParams | None = None,
                   split: int | None = None) -> Dataset:
    """Deterministic synthetic dataset of ``intervals`` consecutive intervals.

    ``split`` is the first test interval (default: last fifth held out).
    """
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    N, T = grid.N, intervals
    slots = (24 * 60) // p.interval_minutes

    if p.rate_spread > 0:
        base = p.base_rate * rng.lognormal(-0.5 * p.rate_spread**2, p.rate_spread, (N, N))
    else:
        base = np.full((N, N), float(p.base_rate))
    # two origin populations with opposite daily phases
    phase = np.where(rng.random(N) < 0.5, 0.0, np.pi) + rng.normal(0, 0.3, N)

    start = np.datetime64(p.start, "m")
    timestamps = start + np.arange(T) * np.timedelta64(p.interval_minutes, "m")
    minutes = (timestamps - timestamps.astype("datetime64[D]")).astype(np.int64)
    slot_frac = (minutes // p.interval_minutes) / slots
    day = ((timestamps.astype("datetime64[D]") - start.astype("datetime64[D]")).astype(np.int64))
    weekday = (timestamps.astype("datetime64[D]").view(np.int64) - 4) % 7  # 0 = Monday
    n_days = int(day.max()) + 1

    profile = 1.0 + p.daily_amplitude * np.sin(2 * np.pi * slot_frac[:, None] - phase[None, :])  # T x N_o
    level = np.exp(rng.normal(0, p.day_sigma, n_days)) if p.day_sigma > 0 else np.ones(n_days)
    level = level[day] * np.where(weekday >= 5, p.weekend_factor, 1.0)

    state, intensity = _weather_chain(rng, T + p.weather_lag, p.weather_persistence)
    damping_all = 1.0 - p.weather_effect * _PENALTY[state, intensity]
    damping = damping_all[:T]  # damping[t] driven by weather at t - lag
    state, intensity = state[p.weather_lag:], intensity[p.weather_lag:]

    rate = base[None] * profile[:, None, :] * (level * damping)[:, None, None]  # T x d x o
    if p.shock_sigma > 0:
        rate = rate * _log_ar1(rng, T, N, p.shock_sigma, p.shock_persistence)[:, None, :]
    rate = np.maximum(rate, 0.0)
    counts = rng.poisson(rate) if p.noise else rate
    counts = counts.reshape(T, N, grid.H, grid.W)

    numeric = _meteo_readings(rng, state, intensity, slot_frac)
    labels = [_LABELS[(int(s), int(lv))] for s, lv in zip(state, intensity)]
    if split is None:
        split = T - T // 5
    return Dataset(grid, p.interval_minutes, timestamps, counts, numeric, labels, split)
