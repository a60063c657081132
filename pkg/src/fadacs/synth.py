"""Deterministic synthetic two-city generator with a controllable domain shift.

Random numbers come from SplitMix64: the ``n``-th output (``n = 1, 2, ...``)
of a stream seeded with ``s`` is ``mix(s + n * 0x9E3779B97F4A7C15 mod 2**64)``
where ``mix`` is the standard SplitMix64 finalizer. Uniforms take the top 53
bits; normals use Box-Muller on consecutive uniform pairs ``(u1, u2)`` as
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``. Named sub-streams are seeded with
``mix(seed XOR fnv1a64(label))``. Because every draw is a pure function of
``(seed, label, index)``, other implementations can reproduce the streams.

Occupancy for lot ``l`` at step ``n`` is::

    clip(base_l + daily_l + weekend_l + poi_l + field_l + weather + noise, 0, 1)

where ``field`` is a moving-average kernel over the Z-ordered lots applied to
per-lot AR(1) latents, each neighbour hop delayed by ``lag_steps``, and the
weather term couples standardized weather anomalies to occupancy. In the
target domain the weather coefficients are multiplied by ``1 - 2 * shift``,
and its recorded weather can also carry a sensor gain and a climate offset
(both scaled by ``shift``) on top of the anomaly occupancy responds to.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime

import numpy as np

from .errors import InvalidConfig
from .features import OccupancyGrid, _poi_block, occupancy_series, time_grid
from .ingest import DAY_S, ParkingEvent, Poi, WeatherRecord, filter_anomalies, rejection_summary, to_seconds
from .spatial import ParkingLot, SlotGeometry, morton_order

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
M_PER_DEG_LAT = 111_194.9


def mix64(z):
    z = z & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode():
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def stream(self, label):
        return SplitMix64(mix64(self.state ^ fnv1a64(label)))

    def next_u64(self, n):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform(self, n, low=0.0, high=1.0):
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n):
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def integers(self, n, low, high):
        """Uniform integers in ``[low, high)``."""
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)


CITY = {
    "Source": {"center": (144.9631, -37.8136), "start": datetime(2017, 2, 6), "prefix": "MEL"},
    "Target": {"center": (144.8230, -38.3700), "start": datetime(2020, 2, 10), "prefix": "RYE"},
}
WEATHER_COEF = {"temperature": 0.03, "wind": 0.02, "barometer": -0.01, "humidity": -0.06}
RULES = ("1P", "2P", "4P", "1/2P", "P 30MIN")


# Named parameter sets for the two benchmark experiments (see README).
PRESETS = {
    # weather innovations drive next-step occupancy; the target sees them through a different sensor gain
    "adaptation": {"days": 14, "target_days": 6, "shift": 0.7, "weather_phi": 0.5, "weather_lag": 1,
                   "weather_scale": 2.0, "sensor_gain": 3.0, "weekend_amp": 0.0},
    # a strong, slowly travelling spatial field and little noise
    "ordering": {"days": 14, "noise_std": 0.005, "field_std": 0.15, "field_phi": 0.9, "spatial_corr": 0.9,
                 "weather_scale": 0.5},
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_lots: int = 20
    days: float = 14
    target_days: float | None = None
    interval_min: int = 5
    shift: float = 0.0
    spatial_corr: float = 0.7
    noise_std: float = 0.02
    poi_density: tuple = (30, 30)
    slots_per_lot: tuple = (4, 12)
    lot_spacing_m: float = 150.0
    field_std: float = 0.12
    field_phi: float = 0.97
    lag_steps: int = 3
    kernel_halfwidth: int = 2
    weather_phi: float = 0.95
    weather_scale: float = 1.0
    weather_lag: int = 0  # occupancy reacts to weather this many steps later
    # target weather as recorded: (1 + shift * (sensor_gain - 1)) * anomaly + shift * climate_offset
    sensor_gain: float = 1.0
    climate_offset: tuple = (0.0, 0.0, 0.0, 0.0)
    daily_amp: tuple = (0.10, 0.25)
    weekend_amp: float = 0.10
    anomalies: int = 0

    def __post_init__(self):
        problems = []
        if self.n_lots < 1:
            problems.append("n_lots must be >= 1")
        if self.days < 0 or (self.target_days is not None and self.target_days < 0):
            problems.append("days must be >= 0")
        if self.interval_min < 1 or DAY_S % (self.interval_min * 60):
            problems.append("interval_min must divide a day")
        if not 0.0 <= self.shift <= 1.0:
            problems.append("shift must lie in [0, 1]")
        if not 0.0 <= self.spatial_corr <= 1.0:
            problems.append("spatial_corr must lie in [0, 1]")
        if self.noise_std < 0 or self.field_std < 0:
            problems.append("noise_std and field_std must be >= 0")
        if self.sensor_gain <= 0:
            problems.append("sensor_gain must be > 0")
        if len(self.climate_offset) != 4:
            problems.append("climate_offset needs one value per weather channel")
        if len(self.poi_density) != 2 or min(self.poi_density) < 0:
            problems.append("poi_density must be two non-negative counts")
        lo, hi = self.slots_per_lot
        if not 1 <= lo <= hi:
            problems.append("slots_per_lot must satisfy 1 <= low <= high")
        if not (0.0 <= self.field_phi < 1.0 and 0.0 <= self.weather_phi < 1.0):
            problems.append("AR coefficients must lie in [0, 1)")
        if self.anomalies < 0 or self.weather_lag < 0 or self.lag_steps < 0:
            problems.append("anomalies, weather_lag and lag_steps must be >= 0")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("poi_density", "slots_per_lot", "daily_amp", "climate_offset"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


@dataclass
class SynthDomain:
    which: str
    grid: OccupancyGrid
    lots: list
    slots: list
    pois: list
    weather: list
    events: list = field(default_factory=list)
    injected: dict = field(default_factory=dict)
    weather_anomaly: dict = field(default_factory=dict)  # standardized AR parts [T]


def _ar1(rng, n_series, n_steps, phi):
    """Unit-variance stationary AR(1) paths ``[n_series, n_steps]``."""
    eps = rng.normal(n_series * n_steps).reshape(n_series, n_steps)
    out = np.empty_like(eps)
    out[:, 0] = eps[:, 0]
    scale = math.sqrt(1.0 - phi * phi)
    for n in range(1, n_steps):
        out[:, n] = phi * out[:, n - 1] + scale * eps[:, n]
    return out


def _offsets_to_lonlat(center, east_m, north_m):
    lon0, lat0 = center
    lat = lat0 + north_m / M_PER_DEG_LAT
    lon = lon0 + east_m / (M_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return lon, lat


def _layout(cfg, structure, which):
    """Lots, their slots, and the lot ordering used for the spatial field."""
    city = CITY[which]
    side = math.ceil(math.sqrt(cfg.n_lots))
    jitter = structure.uniform(2 * cfg.n_lots, -0.2, 0.2).reshape(cfg.n_lots, 2) * cfg.lot_spacing_m
    n_slots = structure.integers(cfg.n_lots, cfg.slots_per_lot[0], cfg.slots_per_lot[1] + 1)
    rules = structure.integers(cfg.n_lots, 0, len(RULES))
    slot_jitter = structure.uniform(2 * int(n_slots.sum()), -8.0, 8.0).reshape(-1, 2)
    lots, slots = [], []
    used = 0
    for l in range(cfg.n_lots):
        east = (l % side) * cfg.lot_spacing_m + jitter[l, 0]
        north = (l // side) * cfg.lot_spacing_m + jitter[l, 1]
        keys = []
        coords = []
        for j in range(int(n_slots[l])):
            lon, lat = _offsets_to_lonlat(city["center"], east + slot_jitter[used, 0], north + slot_jitter[used, 1])
            used += 1
            key = f"{city['prefix']}{l:03d}-{j:02d}"
            keys.append(key)
            coords.append((lon, lat))
            slots.append(SlotGeometry(key, lon, lat, RULES[rules[l]], None, f"{city['prefix']}-S{l:03d}"))
        centroid = (float(np.mean([c[0] for c in coords])), float(np.mean([c[1] for c in coords])))
        lots.append(ParkingLot(l, frozenset(keys), RULES[rules[l]], centroid))
    order = morton_order(lots)
    return [lots[i] for i in order], slots


def _pois(cfg, structure, which):
    city = CITY[which]
    n = cfg.poi_density[0 if which == "Source" else 1]
    side = math.ceil(math.sqrt(cfg.n_lots))
    extent = side * cfg.lot_spacing_m
    xy = structure.uniform(2 * n, -300.0, extent + 300.0).reshape(n, 2) if n else np.zeros((0, 2))
    kinds = structure.integers(n, 0, 3) if n else []
    opens = structure.integers(n, 6, 12) if n else []
    hours = structure.integers(n, 8, 15) if n else []
    pois = []
    for k in range(n):
        lon, lat = _offsets_to_lonlat(city["center"], xy[k, 0], xy[k, 1])
        category = ("cafe", "bar", "landmark")[kinds[k]]
        if category == "landmark":
            schedule = None
        else:
            start = int(opens[k]) * 60 + (360 if category == "bar" else 0)
            end = min(1440, start + int(hours[k]) * 60)
            schedule = tuple(((start, end),) for _ in range(7))
        pois.append(Poi(f"{city['prefix']}-poi{k:03d}", category, lon, lat, None, schedule))
    return pois


def _weather(cfg, dyn, times, offset=(0.0, 0.0, 0.0, 0.0), gain=1.0):
    """Weather records plus the weather anomalies occupancy responds to (``weather_lag`` steps old).

    The recorded anomaly is ``gain * felt + offset``; occupancy always reacts to the felt one.
    """
    n, lag = len(times), cfg.weather_lag
    z_all = _ar1(dyn.stream("weather"), 4, n + lag, cfg.weather_phi) if n else np.zeros((4, 0))
    felt = z_all[:, :n]
    z = gain * z_all[:, lag:] + np.asarray(offset, dtype=float)[:, None]
    records = []
    for k, t in enumerate(times):
        tau = (int(t) % DAY_S) / 3600.0
        records.append(WeatherRecord(
            int(t),
            float(18.0 + 4.0 * z[0, k] - 5.0 * math.cos(2 * math.pi * (tau - 3.0) / 24.0)),
            float(max(0.0, 15.0 + 3.0 * z[1, k])),
            float(1013.0 + 6.0 * z[2, k]),
            float(min(100.0, max(0.0, 65.0 + 8.0 * z[3, k]))),
        ))
    names = ("temperature", "wind", "barometer", "humidity")
    return records, {name: felt[i] for i, name in enumerate(names)}


def _spatial_field(cfg, dyn, n_steps):
    L, K, lag = cfg.n_lots, cfg.kernel_halfwidth, cfg.lag_steps
    pad = K * lag
    z = _ar1(dyn.stream("field"), L, n_steps + pad, cfg.field_phi) if n_steps else np.zeros((L, pad))
    offsets = range(-K, K + 1)
    w = np.array([cfg.spatial_corr ** abs(j) for j in offsets])
    w = w / np.sqrt((w * w).sum())
    out = np.zeros((L, n_steps))
    for wj, j in zip(w, offsets):
        if wj == 0:
            continue
        src = np.clip(np.arange(L) + j, 0, L - 1)
        start = pad - abs(j) * lag
        out += wj * z[src, start:start + n_steps]
    return cfg.field_std * out


def _events_from_counts(cfg, dyn, lots, slots, times, counts):
    """Per-slot events reproducing ``counts[l, n]`` occupied slots at each instant."""
    step = cfg.interval_min * 60
    jit = dyn.stream("event-jitter")
    where = {s.slot_key: s for s in slots}
    day = times // DAY_S
    events = []
    for li, lot in enumerate(lots):
        keys = sorted(lot.slot_keys)
        for j, key in enumerate(keys):
            occ = counts[li] > j
            if not occ.any():
                continue
            edges = np.flatnonzero(np.diff(np.concatenate([[0], occ.astype(np.int8), [0]])))
            for a, b in zip(edges[::2], edges[1::2]):
                # split runs at midnight
                cut = [a] + [k for k in range(a + 1, b) if day[k] != day[k - 1]] + [b]
                for ra, rb in zip(cut[:-1], cut[1:]):
                    ja, jb = jit.uniform(2)
                    t_first, t_last = int(times[ra]), int(times[rb - 1])
                    day_start = t_first - t_first % DAY_S
                    day_end = day_start + DAY_S - 1
                    arrival = max(day_start, t_first - int(ja * step))
                    if ra > 0 and day[ra - 1] == day[ra]:
                        arrival = max(arrival, int(times[ra - 1]) + 1)
                    departure = min(day_end, t_last + 1 + int(jb * (step - 1)))
                    events.append(ParkingEvent(
                        device_id=key, arrival=arrival, departure=departure,
                        duration=departure - arrival, restriction=lot.rule, sector=where[key].sector,
                        lon=where[key].lon, lat=where[key].lat))
    return events


def _inject_anomalies(cfg, dyn, events, lots, times):
    """Append anomalous events that the filter must reject without touching genuine ones."""
    if not cfg.anomalies or not len(times):
        return events, {}
    rng = dyn.stream("anomalies")
    keys = sorted(k for lot in lots for k in lot.slot_keys)
    by_slot = {}
    for e in events:
        by_slot.setdefault(e.slot_key, []).append(e)
    injected = {"NonPositiveDuration": 0, "BothMidnight": 0, "CrossesMidnight": 0, "Overlap": 0}
    extra = []
    templates = {k: evs[0] for k, evs in by_slot.items()}

    def bad(key, a, d, dur):
        # keep the slot's metadata so the row parses and only the anomaly filter rejects it
        tpl = templates.get(key)
        if tpl is None:
            return ParkingEvent(key, a, d, dur, "X")
        return replace(tpl, arrival=a, departure=d, duration=dur)

    t0, t1 = int(times[0]), int(times[-1])
    days = sorted(set(int(t) - int(t) % DAY_S for t in times))
    for k in range(cfg.anomalies):
        key = keys[int(rng.integers(1, 0, len(keys))[0])]
        t = t0 + int(rng.uniform(1)[0] * max(1, t1 - t0))
        extra.append(bad(key, t + 60, t, -60))
        injected["NonPositiveDuration"] += 1
        midnight = days[k % len(days)]
        extra.append(bad(key, midnight, midnight, 0))
        injected["BothMidnight"] += 1
    # overlap pairs and midnight-crossers go into gaps of a slot's genuine events
    for key in keys:
        if injected["Overlap"] >= 2 * cfg.anomalies and injected["CrossesMidnight"] >= cfg.anomalies:
            break
        evs = sorted(by_slot.get(key, []), key=lambda e: e.arrival)
        bounds = [t0 - DAY_S] + [x for e in evs for x in (e.arrival, e.departure)] + [t1 + DAY_S]
        for g0, g1 in zip(bounds[0::2], bounds[1::2]):
            lo, hi = g0 + 1, g1 - 1
            if injected["Overlap"] < 2 * cfg.anomalies and hi - lo > 400 and (lo // DAY_S) == (hi // DAY_S):
                extra.append(bad(key, lo, lo + 200, 200))
                extra.append(bad(key, lo + 100, lo + 300, 200))
                injected["Overlap"] += 2
                continue
            midnight = (lo // DAY_S + 1) * DAY_S
            if injected["CrossesMidnight"] < cfg.anomalies and lo < midnight - 60 and midnight + 60 < hi:
                extra.append(bad(key, midnight - 60, midnight + 60, 120))
                injected["CrossesMidnight"] += 1
    return events + extra, injected


def generate_domain(cfg, which="Source", mode="grid"):
    """Generate one domain.

    ``mode="grid"`` returns continuous occupancy rates; ``mode="events"`` rounds
    them to whole occupied slots and also emits per-slot events whose
    occupancy series equals that grid exactly.
    """
    if which not in CITY:
        raise InvalidConfig(f"which must be 'Source' or 'Target', got {which!r}")
    if mode not in ("grid", "events"):
        raise InvalidConfig(f"mode must be 'grid' or 'events', got {mode!r}")
    root = SplitMix64(cfg.seed)
    structure = root.stream("structure")
    dyn = root.stream(f"dynamics-{which}")
    lots, slots = _layout(cfg, structure, which)
    pois = _pois(cfg, structure, which)
    days = cfg.days if which == "Source" or cfg.target_days is None else cfg.target_days
    t0 = to_seconds(CITY[which]["start"])
    times = time_grid((t0, t0 + int(round(days * DAY_S))), cfg.interval_min)
    n_t, L = len(times), cfg.n_lots

    lot_rng = structure.stream("lot-params")
    base = lot_rng.uniform(L, 0.30, 0.55)
    amp = lot_rng.uniform(L, *cfg.daily_amp)
    peak = lot_rng.uniform(L, 11.0, 15.0)
    weekend = cfg.weekend_amp * lot_rng.uniform(L, -1.0, 1.0)
    poi_coef = lot_rng.uniform(L, 0.0, 0.15)

    offset = np.zeros(4) if which == "Source" else cfg.shift * np.asarray(cfg.climate_offset, dtype=float)
    sign, gain = 1.0, 1.0
    if which == "Target":
        sign, gain = 1.0 - 2.0 * cfg.shift, 1.0 + cfg.shift * (cfg.sensor_gain - 1.0)
    weather, wz = _weather(cfg, dyn, times, offset, gain)
    tau = (times % DAY_S) / 3600.0
    weekday = ((times // DAY_S) + 3) % 7  # 1970-01-01 was a Thursday
    is_weekend = (weekday >= 5).astype(float)
    occ = base[:, None] + amp[:, None] * np.cos(2 * np.pi * (tau[None, :] - peak[:, None]) / 24.0)
    occ = occ + weekend[:, None] * is_weekend[None, :]
    if n_t:
        poi = _poi_block([lot.centroid for lot in lots], pois, times)
        frac_open = poi[..., 1] / np.maximum(poi[..., 3], 1.0)
        occ = occ + poi_coef[:, None] * frac_open.T
    occ = occ + _spatial_field(cfg, dyn, n_t)
    for name, coef in WEATHER_COEF.items():
        occ = occ + sign * cfg.weather_scale * coef * wz[name][None, :]
    if n_t:
        occ = occ + cfg.noise_std * dyn.stream("noise").normal(L * n_t).reshape(L, n_t)
    occ = np.clip(occ, 0.0, 1.0)

    lot_ids = [lot.lot_id for lot in lots]
    if mode == "grid":
        return SynthDomain(which, OccupancyGrid(lot_ids, times, occ), lots, slots, pois, weather,
                           weather_anomaly=wz)
    sizes = np.array([lot.n_slots for lot in lots])
    counts = np.rint(occ * sizes[:, None]).astype(np.int64)
    grid = OccupancyGrid(lot_ids, times, counts / sizes[:, None])
    events = _events_from_counts(cfg, dyn, lots, slots, times, counts)
    events, injected = _inject_anomalies(cfg, dyn, events, lots, times)
    return SynthDomain(which, grid, lots, slots, pois, weather, events, injected, wz)


def roundtrip_check(cfg, which="Source"):
    """Rebuild the grid from generated events through filtering and occupancy slicing."""
    dom = generate_domain(cfg, which, mode="events")
    kept, rejected = filter_anomalies(dom.events)
    times = dom.grid.timestamps
    if len(times):
        t0 = int(times[0])
        span = (t0, t0 + len(times) * cfg.interval_min * 60)
        rebuilt = occupancy_series(kept, dom.lots, cfg.interval_min, span)
        max_diff = float(np.abs(rebuilt.values - dom.grid.values).max())
    else:
        max_diff = 0.0
    by_reason = rejection_summary(rejected)
    return {
        "n_events": len(dom.events),
        "n_kept": len(kept),
        "rejected": by_reason,
        "injected": dom.injected,
        "max_abs_diff": max_diff,
        "grid_shape": list(dom.grid.values.shape),
        "match": max_diff <= 1e-12 and all(by_reason[k] == v for k, v in dom.injected.items()),
    }


def preset(name, **overrides):
    """``SynthConfig`` for a named benchmark preset plus keyword overrides."""
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig(**{**PRESETS[name], **overrides})


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
