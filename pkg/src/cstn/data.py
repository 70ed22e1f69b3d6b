"""Trip records and weather observations to normalised OD sample windows.

An OD tensor for one interval has shape ``N x H x W`` with ``N = H * W``:
``X[d, i_o, j_o]`` counts trips from origin cell ``(i_o, j_o)`` to the
destination cell with flat index ``d = W * i_d + j_d``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container
from .errors import ConfigError, CorruptArtifactError, DegenerateStatsError, MissingInputError

METEO_FIELDS = ("temp_c", "windchill_c", "humidity_pct", "visibility_km", "wind_kmh", "precip_mm")

# Observed ranges of the six indicators in the 2014 Manhattan data.
NYC_METEO_RANGES = {
    "temp_c": (-18.3, 35.6),
    "windchill_c": (-28.4, 38.5),
    "humidity_pct": (9.0, 100.0),
    "visibility_km": (0.4, 16.1),
    "wind_kmh": (0.0, 137.0),
    "precip_mm": (0.0, 28.7),
}

DEFAULT_WEATHER_VOCAB = (
    "Sunny", "Clear", "Partly Cloudy", "Mostly Cloudy", "Scattered Clouds", "Overcast",
    "Haze", "Mist", "Fog", "Light Drizzle", "Drizzle", "Light Rain", "Rainy", "Heavy Rain",
    "Thunderstorm", "Light Freezing Rain", "Ice Pellets", "Light Snow", "Snowy", "Heavy Snow",
    "Blowing Snow", "Squalls", "Unknown",
)

CACHE_MAGIC = b"CSTNDATA"
CACHE_VERSION = 1


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    H: int
    W: int

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError(f"degenerate bounding box {self}")
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.H}x{self.W}")

    @property
    def N(self) -> int:
        return self.H * self.W


def _bin(values, lo: float, hi: float, count: int):
    """Half-open uniform bins with the last one closed; -1 when outside."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.floor((v - lo) / (hi - lo) * count).astype(np.int64)
    idx = np.where(v == hi, count - 1, idx)
    inside = (v >= lo) & (v <= hi)
    return np.where(inside, idx, -1)


def assign_regions(lons, lats, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised binning; returns ``(i, j)`` arrays with ``-1`` for out-of-bounds.

    NaN coordinates map to ``-1`` as well; callers that must distinguish them
    check ``np.isnan`` themselves.
    """
    i = _bin(lats, grid.lat_min, grid.lat_max, grid.H)
    j = _bin(lons, grid.lon_min, grid.lon_max, grid.W)
    bad = (i < 0) | (j < 0)
    return np.where(bad, -1, i), np.where(bad, -1, j)


def assign_region(lon: float, lat: float, grid: GridSpec) -> tuple[int, int] | None:
    """Cell ``(i, j)`` holding the point, or ``None`` outside the box."""
    if math.isnan(lon) or math.isnan(lat):
        raise ValueError("NaN coordinate")
    i, j = assign_regions([lon], [lat], grid)
    if i[0] < 0:
        return None
    return int(i[0]), int(j[0])


# ------------------------------------------------------------- OD tensors


@dataclass(frozen=True)
class TripRecord:
    pickup_time: np.datetime64
    pickup_lon: float
    pickup_lat: float
    dropoff_lon: float
    dropoff_lat: float


def count_od(o_i, o_j, d_i, d_j, grid: GridSpec) -> np.ndarray:
    """Histogram trips given cell indices; any ``-1`` endpoint drops the trip."""
    o_i, o_j, d_i, d_j = (np.asarray(a, dtype=np.int64) for a in (o_i, o_j, d_i, d_j))
    keep = (o_i >= 0) & (o_j >= 0) & (d_i >= 0) & (d_j >= 0)
    d = grid.W * d_i[keep] + d_j[keep]
    o = grid.W * o_i[keep] + o_j[keep]
    flat = np.bincount(d * grid.N + o, minlength=grid.N * grid.N)
    return flat.reshape(grid.N, grid.H, grid.W).astype(np.float64)


def build_od_tensor(records: Iterable[TripRecord], grid: GridSpec) -> np.ndarray:
    records = list(records)
    if not records:
        return np.zeros((grid.N, grid.H, grid.W))
    arr = np.array(
        [(r.pickup_lon, r.pickup_lat, r.dropoff_lon, r.dropoff_lat) for r in records],
        dtype=np.float64,
    )
    o_i, o_j = assign_regions(arr[:, 0], arr[:, 1], grid)
    d_i, d_j = assign_regions(arr[:, 2], arr[:, 3], grid)
    return count_od(o_i, o_j, d_i, d_j, grid)


def transpose_od(X: np.ndarray) -> np.ndarray:
    """OD tensor to DO tensor: ``XT[o, i_d, j_d] = X[d, i_o, j_o]``.

    Leading batch axes are carried through.
    """
    X = np.asarray(X)
    N, H, W = X.shape[-3:]
    if N != H * W:
        raise ValueError(f"OD tensor needs H*W={H * W} channels, has {N}")
    lead = X.shape[:-3]
    mat = X.reshape(lead + (N, N))
    return np.swapaxes(mat, -1, -2).reshape(lead + (N, H, W))


def origin_demand(X: np.ndarray) -> np.ndarray:
    """Departures per origin cell: sum over destination channels."""
    return np.asarray(X).sum(axis=-3)


def destination_demand(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    H, W = X.shape[-2:]
    return X.sum(axis=(-2, -1)).reshape(X.shape[:-3] + (H, W))


# ----------------------------------------------------------- normalisation


@dataclass
class NormStats:
    od_min: float
    od_max: float
    meteo_min: np.ndarray = field(default_factory=lambda: np.zeros(6))
    meteo_max: np.ndarray = field(default_factory=lambda: np.ones(6))
    meteo_mean: np.ndarray = field(default_factory=lambda: np.full(6, 0.5))

    def __post_init__(self):
        self.meteo_min = np.asarray(self.meteo_min, dtype=np.float64)
        self.meteo_max = np.asarray(self.meteo_max, dtype=np.float64)
        self.meteo_mean = np.asarray(self.meteo_mean, dtype=np.float64)
        if self.od_min > self.od_max or np.any(self.meteo_min > self.meteo_max):
            raise ValueError("NormStats with min > max")

    @classmethod
    def from_training(cls, counts: np.ndarray, meteo_numeric: np.ndarray | None = None) -> "NormStats":
        """Statistics from training-split arrays only.

        ``meteo_numeric`` is ``T x 6`` with NaN for missing readings.
        """
        counts = np.asarray(counts, dtype=np.float64)
        if meteo_numeric is None or len(meteo_numeric) == 0:
            lo, hi, mu = np.zeros(6), np.ones(6), np.full(6, 0.5)
        else:
            m = np.asarray(meteo_numeric, dtype=np.float64)
            with np.errstate(all="ignore"):
                lo, hi, mu = np.nanmin(m, axis=0), np.nanmax(m, axis=0), np.nanmean(m, axis=0)
            empty = np.isnan(lo)
            lo, hi, mu = np.where(empty, 0.0, lo), np.where(empty, 1.0, hi), np.where(empty, 0.5, mu)
        return cls(float(counts.min()), float(counts.max()), lo, hi, mu)

    @classmethod
    def with_meteo_ranges(cls, od_min: float, od_max: float, ranges=NYC_METEO_RANGES) -> "NormStats":
        lo = np.array([ranges[f][0] for f in METEO_FIELDS])
        hi = np.array([ranges[f][1] for f in METEO_FIELDS])
        return cls(od_min, od_max, lo, hi, (lo + hi) / 2)

    def to_json(self) -> dict:
        return {
            "od_min": self.od_min,
            "od_max": self.od_max,
            "meteo_min": self.meteo_min.tolist(),
            "meteo_max": self.meteo_max.tolist(),
            "meteo_mean": self.meteo_mean.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(d["od_min"], d["od_max"], d["meteo_min"], d["meteo_max"], d["meteo_mean"])


def normalize(x, stats: NormStats, direction: str = "forward") -> np.ndarray:
    """Min-max scale OD counts to ``[-1, 1]`` or undo it."""
    span = stats.od_max - stats.od_min
    if span <= 0:
        raise DegenerateStatsError(f"od_min == od_max == {stats.od_min}")
    x = np.asarray(x, dtype=np.float64)
    if direction == "forward":
        return 2.0 * (x - stats.od_min) / span - 1.0
    if direction == "inverse":
        return (x + 1.0) / 2.0 * span + stats.od_min
    raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")


# ------------------------------------------------------------- meteorology


@dataclass(frozen=True)
class MeteoRecord:
    temp_c: float = math.nan
    windchill_c: float = math.nan
    humidity_pct: float = math.nan
    visibility_km: float = math.nan
    wind_kmh: float = math.nan
    precip_mm: float = math.nan
    condition: str = "Unknown"

    def numeric(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in METEO_FIELDS], dtype=np.float64)


def encode_meteo(rec: MeteoRecord, stats: NormStats, vocab: Sequence[str] = DEFAULT_WEATHER_VOCAB) -> np.ndarray:
    """One-hot condition followed by six indicators scaled to ``[0, 1]``.

    Labels outside ``vocab`` fall into ``"Unknown"``; missing readings take
    the training mean before scaling; out-of-range readings are clamped.
    """
    return encode_meteo_arrays(rec.numeric()[None], [rec.condition], stats, vocab)[0]


def encode_meteo_arrays(numeric: np.ndarray, labels: Sequence[str], stats: NormStats,
                        vocab: Sequence[str] = DEFAULT_WEATHER_VOCAB) -> np.ndarray:
    vocab = list(vocab)
    if "Unknown" not in vocab:
        raise ConfigError("weather vocabulary must contain 'Unknown'")
    index = {label: k for k, label in enumerate(vocab)}
    unknown = index["Unknown"]
    numeric = np.asarray(numeric, dtype=np.float64)
    out = np.zeros((len(labels), len(vocab) + len(METEO_FIELDS)))
    out[np.arange(len(labels)), [index.get(lab, unknown) for lab in labels]] = 1.0
    filled = np.where(np.isnan(numeric), stats.meteo_mean, numeric)
    span = np.where(stats.meteo_max > stats.meteo_min, stats.meteo_max - stats.meteo_min, 1.0)
    out[:, len(vocab):] = np.clip((filled - stats.meteo_min) / span, 0.0, 1.0)
    return out


# ----------------------------------------------------------------- windows


@dataclass
class SampleWindow:
    inputs: np.ndarray  # n x N x H x W, normalised
    meteo: np.ndarray  # n x D
    targets: np.ndarray  # m x N x H x W, normalised
    anchor: int  # index of the last input interval
    target_times: np.ndarray | None = None


def make_windows(od: np.ndarray, meteo: np.ndarray, n: int, m: int = 1,
                 timestamps: np.ndarray | None = None, boundary: int | None = None,
                 part: str | None = None) -> list[SampleWindow]:
    """Slide an ``n``-in / ``m``-out window over consecutive intervals.

    Windows straddling ``boundary`` (first test interval) are dropped.  With
    ``part="train"`` or ``"test"`` only that side is returned.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    T = len(od)
    if len(meteo) != T:
        raise ValueError("od and meteo cover different interval counts")
    if timestamps is not None and T > 1:
        steps = np.diff(np.asarray(timestamps))
        if np.any(steps != steps[0]) or steps[0] <= np.timedelta64(0):
            raise ValueError("intervals are not strictly consecutive")
    out = []
    for t in range(n - 1, T - m):
        lo, hi = t - n + 1, t + m
        if boundary is not None:
            side = "train" if hi < boundary else "test" if lo >= boundary else None
            if side is None or (part is not None and side != part):
                continue
        out.append(SampleWindow(
            inputs=od[lo : t + 1],
            meteo=meteo[lo : t + 1],
            targets=od[t + 1 : hi + 1],
            anchor=t,
            target_times=None if timestamps is None else np.asarray(timestamps)[t + 1 : hi + 1],
        ))
    return out


def stack_windows(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(B x n x N x H x W, B x n x D, B x m x N x H x W)``."""
    return (
        np.stack([w.inputs for w in windows]),
        np.stack([w.meteo for w in windows]),
        np.stack([w.targets for w in windows]),
    )


# ----------------------------------------------------------------- dataset


@dataclass
class Dataset:
    grid: GridSpec
    interval_minutes: int
    timestamps: np.ndarray  # T, datetime64[m] interval starts (local time)
    counts: np.ndarray  # T x N x H x W raw counts
    meteo_numeric: np.ndarray  # T x 6, NaN where missing
    meteo_labels: list[str]
    split: int  # index of the first test interval
    norm: NormStats | None = None
    vocab: tuple[str, ...] = DEFAULT_WEATHER_VOCAB

    def __post_init__(self):
        T = len(self.counts)
        if self.counts.shape[1:] != (self.grid.N, self.grid.H, self.grid.W):
            raise ValueError(f"counts shape {self.counts.shape} does not match grid {self.grid}")
        if len(self.timestamps) != T or len(self.meteo_numeric) != T or len(self.meteo_labels) != T:
            raise ValueError("timestamps, counts and meteo disagree on interval count")
        if not 0 < self.split <= T:
            raise ConfigError(f"split index {self.split} outside (0, {T}]")
        if self.norm is None:
            self.norm = NormStats.from_training(self.counts[: self.split], self.meteo_numeric[: self.split])

    @property
    def T(self) -> int:
        return len(self.counts)

    @property
    def slots_per_day(self) -> int:
        return (24 * 60) // self.interval_minutes

    def slot_of(self, index) -> np.ndarray:
        ts = np.asarray(self.timestamps)[index]
        minutes = (ts - ts.astype("datetime64[D]")).astype("timedelta64[m]").astype(np.int64)
        return minutes // self.interval_minutes

    def normalized_od(self) -> np.ndarray:
        return normalize(self.counts, self.norm)

    def encoded_meteo(self) -> np.ndarray:
        return encode_meteo_arrays(self.meteo_numeric, self.meteo_labels, self.norm, self.vocab)

    def windows(self, n: int, m: int = 1, part: str | None = None) -> list[SampleWindow]:
        return make_windows(self.normalized_od(), self.encoded_meteo(), n, m,
                            timestamps=self.timestamps, boundary=self.split, part=part)

    # -- cache

    def save(self, path) -> None:
        header = {
            "config": {"grid": asdict(self.grid), "interval_minutes": self.interval_minutes},
            "split": self.split,
            "start": str(np.asarray(self.timestamps)[0]),
            "meteo_labels": list(self.meteo_labels),
            "vocab": list(self.vocab),
            "norm": self.norm.to_json(),
        }
        ts = np.asarray(self.timestamps).astype("datetime64[m]").astype(np.int64)
        container.write(path, CACHE_MAGIC, CACHE_VERSION, header, {
            "timestamps": ts,
            "counts": self.counts,
            "meteo_numeric": self.meteo_numeric,
        })

    @classmethod
    def load(cls, path) -> "Dataset":
        header, tensors = container.read(path, CACHE_MAGIC, CACHE_VERSION)
        cfg = header["config"]
        try:
            return cls(
                grid=GridSpec(**cfg["grid"]),
                interval_minutes=cfg["interval_minutes"],
                timestamps=tensors["timestamps"].astype("datetime64[m]"),
                counts=tensors["counts"],
                meteo_numeric=tensors["meteo_numeric"],
                meteo_labels=header["meteo_labels"],
                split=header["split"],
                norm=NormStats.from_json(header["norm"]),
                vocab=tuple(header["vocab"]),
            )
        except (KeyError, ValueError) as exc:
            raise CorruptArtifactError(f"dataset cache inconsistent: {exc}") from None


def interval_grid(start: np.datetime64, end: np.datetime64, interval_minutes: int) -> np.ndarray:
    """Interval starts covering whole days from ``start``'s day to ``end``'s day."""
    if (24 * 60) % interval_minutes:
        raise ConfigError("interval length must divide one day")
    day0 = np.datetime64(start, "D")
    day1 = np.datetime64(end, "D") + np.timedelta64(1, "D")
    return np.arange(day0.astype("datetime64[m]"), day1.astype("datetime64[m]"),
                     np.timedelta64(interval_minutes, "m"))


def read_trips_csv(path, grid: GridSpec, interval_minutes: int = 30, offset_hours: float = 0.0,
                   chunksize: int = 1_000_000):
    """Stream a trip CSV into per-interval OD counts.

    Returns ``(timestamps, counts, stats)`` where ``stats`` tallies kept,
    out-of-bounds and rejected (unparseable / NaN) records.
    """
    import pandas as pd

    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"trip CSV not found: {path}")
    cols = ["pickup_datetime", "pickup_longitude", "pickup_latitude",
            "dropoff_longitude", "dropoff_latitude"]
    step = np.timedelta64(interval_minutes, "m")
    offset = np.timedelta64(int(round(offset_hours * 60)), "m")
    parts = []
    stats = {"kept": 0, "out_of_bounds": 0, "rejected": 0}
    try:
        reader = pd.read_csv(path, usecols=cols, chunksize=chunksize, skipinitialspace=True)
        for chunk in reader:
            ts = pd.to_datetime(chunk["pickup_datetime"], format="%Y-%m-%d %H:%M:%S", errors="coerce")
            coords = chunk[cols[1:]].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
            bad = ts.isna().to_numpy() | np.isnan(coords).any(axis=1)
            stats["rejected"] += int(bad.sum())
            ts = ts.to_numpy()[~bad].astype("datetime64[m]") + offset
            coords = coords[~bad]
            o_i, o_j = assign_regions(coords[:, 0], coords[:, 1], grid)
            d_i, d_j = assign_regions(coords[:, 2], coords[:, 3], grid)
            ok = (o_i >= 0) & (d_i >= 0)
            stats["out_of_bounds"] += int((~ok).sum())
            stats["kept"] += int(ok.sum())
            parts.append((ts[ok], o_i[ok], o_j[ok], d_i[ok], d_j[ok]))
    except ValueError as exc:
        raise ConfigError(f"trip CSV {path}: {exc}") from None
    if not parts or sum(len(p[0]) for p in parts) == 0:
        raise ConfigError(f"trip CSV {path} contains no in-bounds trips")
    ts = np.concatenate([p[0] for p in parts])
    o_i, o_j, d_i, d_j = (np.concatenate([p[k] for p in parts]) for k in range(1, 5))
    grid_ts = interval_grid(ts.min(), ts.max(), interval_minutes)
    t_idx = ((ts - grid_ts[0]) // step).astype(np.int64)
    cell = (t_idx * grid.N + grid.W * d_i + d_j) * grid.N + grid.W * o_i + o_j
    flat = np.bincount(cell, minlength=len(grid_ts) * grid.N * grid.N)
    counts = flat.reshape(len(grid_ts), grid.N, grid.H, grid.W).astype(np.int64)
    return grid_ts, counts, stats


def read_meteo_csv(path, timestamps: np.ndarray, interval_minutes: int):
    """Align a meteorology CSV to interval starts.  Missing rows stay NaN/"Unknown"."""
    import pandas as pd

    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"meteo CSV not found: {path}")
    df = pd.read_csv(path, skipinitialspace=True, keep_default_na=True)
    missing = [c for c in ("datetime",) + METEO_FIELDS + ("condition",) if c not in df.columns]
    if missing:
        raise ConfigError(f"meteo CSV {path} lacks columns {missing}")
    ts = pd.to_datetime(df["datetime"], format="%Y-%m-%d %H:%M:%S", errors="coerce").to_numpy()
    step = np.timedelta64(interval_minutes, "m")
    T = len(timestamps)
    numeric = np.full((T, len(METEO_FIELDS)), np.nan)
    labels = ["Unknown"] * T
    values = df[list(METEO_FIELDS)].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
    conds = df["condition"].fillna("Unknown").astype(str).str.strip().tolist()
    for row, t in enumerate(ts):
        if np.isnat(t):
            continue
        k = int((t.astype("datetime64[m]") - timestamps[0]) // step)
        if 0 <= k < T:
            numeric[k] = values[row]
            labels[k] = conds[row]
    return numeric, labels
