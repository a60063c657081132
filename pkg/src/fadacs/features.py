"""Occupancy grids, contextual channels and windowed model tensors."""
from __future__ import annotations

import bisect
import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadFileFormat, NoWeatherBefore, SeriesTooShort, ShapeMismatch, UnknownSlot
from .ingest import DAY_S, from_seconds, to_seconds
from .spatial import haversine_matrix, morton_order

CHANNELS = (
    "n_open_poi_1km", "n_open_poi_500m", "n_poi_1km", "n_poi_500m", "min_dis_1km", "min_dis_500m",
    "day_of_week", "day_of_month", "hour", "availability",
    "temperature", "wind", "barometer", "humidity",
    "occupancy", "is_weekend",
)
RADII_M = (1000.0, 500.0)


@dataclass
class OccupancyGrid:
    lot_ids: list
    timestamps: np.ndarray  # int seconds, uniform step
    values: np.ndarray  # [lot, time]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.lot_ids), len(self.timestamps)):
            raise ShapeMismatch(f"values {self.values.shape} vs {len(self.lot_ids)} lots x "
                                f"{len(self.timestamps)} steps")
        if len(self.timestamps) > 1 and len(set(np.diff(self.timestamps))) != 1:
            raise ValueError("timestamps must have a constant step")
        if len(self.timestamps) > 1 and self.timestamps[1] <= self.timestamps[0]:
            raise ValueError("timestamps must be strictly increasing")

    @property
    def interval_s(self):
        return int(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 else None

    def subset_lots(self, idx):
        return OccupancyGrid([self.lot_ids[i] for i in idx], self.timestamps, self.values[idx])


def time_grid(span, interval_min):
    t0, t1 = (int(v) for v in span)
    step = int(interval_min) * 60
    return np.arange(t0, t1, step, dtype=np.int64)


def occupancy_series(events, lots, interval_min, span):
    """Occupancy rate per lot sampled at instants ``t0, t0 + interval, ... < t1``.

    A slot counts as occupied at instant ``t`` when one of its events satisfies
    ``arrival <= t < departure``; the rate is occupied slots over lot size.
    """
    times = time_grid(span, interval_min)
    n_t = len(times)
    step = int(interval_min) * 60
    t0 = int(span[0])
    slot_lot = {}
    slot_row = {}
    for li, lot in enumerate(lots):
        for r, key in enumerate(sorted(lot.slot_keys)):
            slot_lot[key] = li
            slot_row[key] = r
    diffs = [np.zeros((lot.n_slots, n_t + 1), dtype=np.int64) for lot in lots]
    for e in events:
        key = e.slot_key
        if key not in slot_lot:
            raise UnknownSlot(key)
        k0 = min(max(-((t0 - e.arrival) // step), 0), n_t)
        k1 = min(max(-((t0 - e.departure) // step), 0), n_t)
        if k0 < k1:
            d = diffs[slot_lot[key]]
            d[slot_row[key], k0] += 1
            d[slot_row[key], k1] -= 1
    values = np.zeros((len(lots), n_t))
    for li, (lot, d) in enumerate(zip(lots, diffs)):
        occupied = np.cumsum(d[:, :n_t], axis=1) > 0
        values[li] = occupied.sum(axis=0) / lot.n_slots
    return OccupancyGrid([lot.lot_id for lot in lots], times, values)


def order_lots_spatially(lots):
    """Lots re-ordered along the Z-order curve (the convolution axis)."""
    return [lots[i] for i in morton_order(lots)]


# --- contextual channels -----------------------------------------------------

def datetime_channels(t, month_of_year=False):
    """``(day_of_week, day_of_month, hour)`` with Monday = 0.

    With ``month_of_year=True`` the second value is the month (1-12) instead.
    """
    dt = from_seconds(t)
    return (dt.weekday(), dt.month if month_of_year else dt.day, dt.hour)


def weather_channels(t, weather):
    """Latest record at or before ``t``: ``(temp, wind, barometer, humidity)``."""
    times = [w.time for w in weather]
    pos = bisect.bisect_right(times, t) - 1
    if pos < 0:
        raise NoWeatherBefore(f"no weather record at or before {from_seconds(t).isoformat()}")
    w = weather[pos]
    return (w.temp_c, w.wind_kmh, w.barometer_mbar, w.humidity_pct)


def _open_mask(pois, times):
    """``[T, P]`` boolean: POI open at each instant (weekly schedule lookup)."""
    mask = np.zeros((len(times), len(pois)), dtype=bool)
    cache = {}
    for n, t in enumerate(times):
        dt = from_seconds(int(t))
        key = (dt.weekday(), dt.hour * 60 + dt.minute)
        if key not in cache:
            cache[key] = np.array([p.is_open(*key) for p in pois], dtype=bool)
        mask[n] = cache[key]
    return mask


def _poi_block(centroids, pois, times):
    """``[T, L, 6]`` POI channels for many lots and instants."""
    n_t, n_l = len(times), len(centroids)
    out = np.zeros((n_t, n_l, 6))
    if not pois:
        out[..., 4] = RADII_M[0]
        out[..., 5] = RADII_M[1]
        return out
    dist = haversine_matrix(centroids, [(p.lon, p.lat) for p in pois])  # [L, P]
    open_mask = _open_mask(pois, times).astype(float)  # [T, P]
    for r, radius in enumerate(RADII_M):
        within = dist <= radius
        out[..., r] = open_mask @ within.T.astype(float)
        out[..., 2 + r] = within.sum(axis=1)[None, :]
        masked = np.where(within, dist, np.inf).min(axis=1)
        out[..., 4 + r] = np.where(np.isfinite(masked), masked, radius)[None, :]
    return out


def poi_channels(lot, pois, t):
    """``(n_open_1km, n_open_500m, n_poi_1km, n_poi_500m, min_dis_1km, min_dis_500m)`` for one lot.

    POIs without a schedule count as present but never open. ``min_dis_R`` is
    the distance to the nearest POI within ``R`` meters, or ``R`` when there is none.
    """
    row = _poi_block([lot.centroid], pois, [t])[0, 0]
    return (int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4]), float(row[5]))


@dataclass
class ContextChannels:
    channel_names: list
    values: np.ndarray  # [T, L, C]


def build_context(grid, lots, pois, weather, channels=CHANNELS, month_of_year=False):
    """All channels for every ``(t, lot)``; lots follow ``grid.lot_ids`` order."""
    by_id = {lot.lot_id: lot for lot in lots}
    ordered = [by_id[i] for i in grid.lot_ids]
    times = grid.timestamps
    n_t, n_l = len(times), len(ordered)
    cols = {}
    poi = _poi_block([lot.centroid for lot in ordered], pois, times)
    for n, name in enumerate(CHANNELS[:6]):
        cols[name] = poi[..., n]
    dtc = np.array([datetime_channels(int(t), month_of_year) for t in times], dtype=float)
    for n, name in enumerate(("day_of_week", "day_of_month", "hour")):
        cols[name] = np.repeat(dtc[:, n:n + 1], n_l, axis=1)
    occ = grid.values.T
    cols["occupancy"] = occ
    cols["availability"] = (occ < 1.0).astype(float)
    cols["is_weekend"] = np.repeat((dtc[:, :1] >= 5).astype(float), n_l, axis=1)
    need_weather = {"temperature", "wind", "barometer", "humidity"} & set(channels)
    if need_weather:
        wx = np.array([weather_channels(int(t), weather) for t in times], dtype=float).reshape(n_t, 4)
        for n, name in enumerate(("temperature", "wind", "barometer", "humidity")):
            cols[name] = np.repeat(wx[:, n:n + 1], n_l, axis=1)
    unknown = [c for c in channels if c not in cols]
    if unknown:
        raise ValueError(f"unknown channels {unknown}")
    return ContextChannels(list(channels), np.stack([cols[c] for c in channels], axis=-1))


# --- windows and normalization ----------------------------------------------

@dataclass
class Normalizer:
    """Per-channel min-max scaling; constant channels are shifted only."""

    channel_names: list
    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, x, channel_names):
        flat = np.asarray(x).reshape(-1, x.shape[-1])
        return cls(list(channel_names), flat.min(axis=0), flat.max(axis=0))

    @property
    def scale(self):
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def transform(self, x):
        return (x - self.mins) / self.scale

    def inverse(self, z):
        return z * self.scale + self.mins

    def to_dict(self):
        return {name: [float(a), float(b)] for name, a, b in zip(self.channel_names, self.mins, self.maxs)}

    @classmethod
    def from_dict(cls, d, channel_names):
        return cls(list(channel_names), np.array([d[c][0] for c in channel_names]),
                   np.array([d[c][1] for c in channel_names]))


@dataclass
class FeatureTensor:
    values: np.ndarray  # [sample, timestep, lot, channel]
    channel_names: list
    lot_ids: list = field(default_factory=list)
    normalization: Normalizer | None = None
    sample_times: np.ndarray | None = None  # time of the last input step

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[-1] != len(self.channel_names):
            raise ShapeMismatch(f"values {self.values.shape} vs {len(self.channel_names)} channels")

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx):
        times = None if self.sample_times is None else self.sample_times[idx]
        return FeatureTensor(self.values[idx], self.channel_names, self.lot_ids, self.normalization, times)

    def normalized(self, norm):
        return FeatureTensor(norm.transform(self.values), self.channel_names, self.lot_ids, norm,
                             self.sample_times)


@dataclass
class TargetGrid:
    values: np.ndarray  # [sample, lot]
    horizon: int
    target_times: np.ndarray | None = None

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx):
        times = None if self.target_times is None else self.target_times[idx]
        return TargetGrid(self.values[idx], self.horizon, times)


def assemble_windows(grid, context, lookback=6, horizon=1):
    """Slide a ``lookback`` window over the grid.

    Sample ``i`` reads steps ``[i, i + lookback)`` and targets occupancy at
    step ``i + lookback - 1 + horizon``.
    """
    ctx = context.values if isinstance(context, ContextChannels) else np.asarray(context)
    names = context.channel_names if isinstance(context, ContextChannels) else [f"c{n}" for n in range(ctx.shape[-1])]
    n_t = grid.values.shape[1]
    if ctx.shape[:2] != (n_t, grid.values.shape[0]):
        raise ShapeMismatch(f"context {ctx.shape[:2]} vs grid {(n_t, grid.values.shape[0])}")
    n = n_t - lookback - horizon + 1
    if n <= 0:
        raise SeriesTooShort(f"{n_t} steps cannot hold lookback {lookback} + horizon {horizon}")
    win = np.lib.stride_tricks.sliding_window_view(ctx, lookback, axis=0)[:n]  # [n, L, C, lookback]
    X = np.ascontiguousarray(win.transpose(0, 3, 1, 2))
    target_idx = np.arange(n) + lookback - 1 + horizon
    Y = grid.values[:, target_idx].T.copy()
    times = grid.timestamps
    return (FeatureTensor(X, list(names), list(grid.lot_ids), None, times[np.arange(n) + lookback - 1]),
            TargetGrid(Y, horizon, times[target_idx]))


def temporal_split(n, fractions=(0.7, 0.15, 0.15)):
    """Contiguous ``(train, val, test)`` index ranges in time order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    a = int(round(n * fractions[0]))
    b = int(round(n * (fractions[0] + fractions[1])))
    return np.arange(0, a), np.arange(a, b), np.arange(b, n)


# --- persistence -------------------------------------------------------------

TENSOR_MAGIC = b"FDFT"
TENSOR_VERSION = 1


def write_tensor(path, values, channel_names=(), sidecar=None):
    """Flat binary tensor: magic, version, axes, channel names, little-endian float64 body."""
    values = np.ascontiguousarray(values, dtype="<f8")
    parts = [TENSOR_MAGIC, struct.pack("<II", TENSOR_VERSION, values.ndim)]
    parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
    parts.append(struct.pack("<I", len(channel_names)))
    for name in channel_names:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(values.tobytes())
    Path(path).write_bytes(b"".join(parts))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def read_tensor(path):
    """Return ``(values, channel_names, sidecar_or_None)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise BadFileFormat(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise BadFileFormat(f"{path}: unsupported version {version}")
    off = 12
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    (n_names,) = struct.unpack_from("<I", raw, off)
    off += 4
    names = []
    for _ in range(n_names):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        names.append(raw[off:off + ln].decode())
        off += ln
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - off != 8 * count:
        raise BadFileFormat(f"{path}: body length does not match header")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
    side = Path(str(path) + ".json")
    return values, names, (json.loads(side.read_text()) if side.exists() else None)


def write_grid_csv(path, grid):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [str(i) for i in grid.lot_ids])
        for n, t in enumerate(grid.timestamps):
            w.writerow([from_seconds(int(t)).isoformat()] + [repr(float(v)) for v in grid.values[:, n]])


def read_grid_csv(path):
    from .ingest import parse_timestamp

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    lot_ids = [int(v) for v in rows[0][1:]]
    times = [parse_timestamp(r[0]) for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(times), len(lot_ids)).T
    return OccupancyGrid(lot_ids, times, values)


__all__ = [
    "CHANNELS", "ContextChannels", "DAY_S", "FeatureTensor", "Normalizer", "OccupancyGrid", "TargetGrid",
    "assemble_windows", "build_context", "datetime_channels", "occupancy_series", "order_lots_spatially",
    "poi_channels", "read_grid_csv", "read_tensor", "temporal_split", "time_grid", "to_seconds",
    "weather_channels", "write_grid_csv", "write_tensor",
]
