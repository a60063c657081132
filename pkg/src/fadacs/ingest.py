"""Readers for parking-sensor, POI, weather and opening-hours tables, plus anomaly filtering.

Timestamps are kept as integer seconds since 1970-01-01 in the dataset's local
wall-clock time (naive). Strings carrying a UTC offset are converted to the
dataset's declared timezone first.
"""
from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

from shapely import wkt

from .errors import InputMissing, MissingColumn, UnknownSlot, UnparsableRow
from .spatial import point_in_polygon, polygon_centroid

EPOCH = datetime(1970, 1, 1)
DAY_S = 86_400


def to_seconds(dt: datetime) -> int:
    return int((dt - EPOCH) // timedelta(seconds=1))


def from_seconds(s: int) -> datetime:
    return EPOCH + timedelta(seconds=int(s))


def day_index(s):
    """Calendar day number of a timestamp (seconds)."""
    return s // DAY_S


_FORMATS = (
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %H:%M:%S",
    "%d/%m/%Y %H:%M",
    "%Y/%m/%d %H:%M:%S",
)


def parse_timestamp(text, tz="Australia/Melbourne"):
    text = text.strip()
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        for fmt in _FORMATS:
            try:
                dt = datetime.strptime(text, fmt)
                break
            except ValueError:
                continue
        else:
            raise ValueError(f"unrecognized timestamp {text!r}")
    if dt.tzinfo is not None:
        dt = dt.astimezone(ZoneInfo(tz)).replace(tzinfo=None)
    return to_seconds(dt)


class Schema(enum.Enum):
    MelbourneV1 = "MelbourneV1"
    RyeV1 = "RyeV1"


# (required columns, optional columns, event field -> column)
SCHEMAS = {
    Schema.MelbourneV1: (
        ["DeviceId", "ArrivalTime", "DepartureTime", "DurationSeconds", "StreetMarker", "Sign"],
        ["InViolation", "StreetName", "StreetId", "Area"],
        {"duration": "DurationSeconds", "restriction": "Sign", "street_marker": "StreetMarker",
         "sector": "Area"},
    ),
    Schema.RyeV1: (
        ["DeviceId", "ArrivalTime", "DepartureTime", "Duration", "Restriction", "Longitude", "Latitude"],
        ["DeviceName", "OverstayDuration", "StreetName", "Sector"],
        {"duration": "Duration", "restriction": "Restriction", "lon": "Longitude", "lat": "Latitude",
         "sector": "Sector"},
    ),
}

RYE_COLUMNS = SCHEMAS[Schema.RyeV1][0] + SCHEMAS[Schema.RyeV1][1]
MELBOURNE_COLUMNS = SCHEMAS[Schema.MelbourneV1][0] + SCHEMAS[Schema.MelbourneV1][1]


@dataclass(frozen=True)
class ParkingEvent:
    device_id: str
    arrival: int
    departure: int
    duration: int
    restriction: str
    street_marker: str | None = None
    sector: str | None = None
    lon: float | None = None
    lat: float | None = None
    street_name: str | None = None

    @property
    def slot_key(self):
        return self.street_marker if self.street_marker else self.device_id

    @property
    def has_location(self):
        return self.lon is not None and self.lat is not None


class RejectReason(str, enum.Enum):
    NonPositiveDuration = "NonPositiveDuration"
    BothMidnight = "BothMidnight"
    CrossesMidnight = "CrossesMidnight"
    Overlap = "Overlap"


@dataclass(frozen=True)
class RejectedEvent:
    event: ParkingEvent
    reason: RejectReason


def _open_csv(path):
    path = Path(path)
    if not path.exists():
        raise InputMissing(f"{path} does not exist")
    fh = open(path, newline="", encoding="utf-8-sig")
    return fh, csv.DictReader(fh)


def parse_events(path, schema, tz="Australia/Melbourne"):
    """Read one event file.

    Raises :class:`MissingColumn` for a bad header and :class:`UnparsableRow`
    listing every ``(line_no, field)`` problem. The exception's ``events``
    attribute still holds the rows that did parse.
    """
    schema = Schema(schema)
    required, optional, mapping = SCHEMAS[schema]
    fh, reader = _open_csv(path)
    with fh:
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise MissingColumn(col)
        events, problems = [], []
        for line_no, row in enumerate(reader, start=2):
            fields = {}
            bad = None
            for name, col, conv in (
                ("arrival", "ArrivalTime", lambda v: parse_timestamp(v, tz)),
                ("departure", "DepartureTime", lambda v: parse_timestamp(v, tz)),
                ("duration", mapping["duration"], lambda v: int(float(v))),
            ):
                try:
                    fields[name] = conv(row[col])
                except (ValueError, TypeError, OverflowError):
                    bad = col
                    break
            device = (row.get("DeviceId") or "").strip()
            if bad is None and not device:
                bad = "DeviceId"
            if bad is None and "lon" in mapping:
                try:
                    fields["lon"] = float(row[mapping["lon"]])
                    fields["lat"] = float(row[mapping["lat"]])
                except (ValueError, TypeError):
                    bad = mapping["lon"]
            if bad is not None:
                problems.append((line_no, bad))
                continue
            sector_col = mapping["sector"]
            sector = row.get(sector_col) or row.get("StreetName") or None
            events.append(ParkingEvent(
                device_id=device,
                arrival=fields["arrival"],
                departure=fields["departure"],
                duration=fields["duration"],
                restriction=(row.get(mapping["restriction"]) or "").strip(),
                street_marker=(row.get("StreetMarker") or "").strip() or None,
                sector=sector.strip() if sector else None,
                lon=fields.get("lon"),
                lat=fields.get("lat"),
                street_name=(row.get("StreetName") or "").strip() or None,
            ))
    if problems:
        err = UnparsableRow(problems)
        err.events = events
        raise err
    return events


def _fmt_ts(s):
    return from_seconds(s).isoformat()


def write_events_csv(path, events):
    """Write events in the Rye column layout (the layout :func:`parse_events` reads with ``RyeV1``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["DeviceId", "DeviceName", "ArrivalTime", "DepartureTime", "Duration",
                    "OverstayDuration", "StreetName", "Sector", "Restriction", "Longitude", "Latitude"])
        for e in events:
            w.writerow([e.device_id, e.device_id, _fmt_ts(e.arrival), _fmt_ts(e.departure), e.duration,
                        0, e.street_name or "", e.sector or "", e.restriction,
                        "" if e.lon is None else repr(float(e.lon)), "" if e.lat is None else repr(float(e.lat))])


def write_rejections_csv(path, rejected):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slot_key", "DeviceId", "ArrivalTime", "DepartureTime", "Duration", "reason"])
        for r in rejected:
            e = r.event
            w.writerow([e.slot_key, e.device_id, _fmt_ts(e.arrival), _fmt_ts(e.departure),
                        e.duration, r.reason.value])


def _is_midnight(s):
    return s % DAY_S == 0


def rejection_reason(event):
    """Single-event rules in precedence order; ``None`` if the event passes."""
    if _is_midnight(event.arrival) and _is_midnight(event.departure):
        return RejectReason.BothMidnight
    if event.duration <= 0 or event.departure <= event.arrival:
        return RejectReason.NonPositiveDuration
    if day_index(event.departure) > day_index(event.arrival):
        return RejectReason.CrossesMidnight
    return None


def _overlapping(events):
    """Indices (into ``events``) of every event whose interval meets another's."""
    order = sorted(range(len(events)), key=lambda n: (events[n].arrival, events[n].departure))
    arr = [events[n].arrival for n in order]
    dep = [events[n].departure for n in order]
    hit = set()
    max_dep = None
    for pos, n in enumerate(order):
        if max_dep is not None and arr[pos] < max_dep:
            hit.add(n)
        if pos + 1 < len(order) and arr[pos + 1] < dep[pos]:
            hit.add(n)
        max_dep = dep[pos] if max_dep is None else max(max_dep, dep[pos])
    return hit


def filter_anomalies(events):
    """Split events into ``(kept, rejected)``.

    Single-event rules run first; the overlap rule then runs per slot key over
    the survivors and rejects both members of every overlapping pair.
    """
    rejected = []
    survivors = defaultdict(list)
    for e in events:
        reason = rejection_reason(e)
        if reason is None:
            survivors[e.slot_key].append(e)
        else:
            rejected.append(RejectedEvent(e, reason))
    bad_ids = set()
    for group in survivors.values():
        for n in _overlapping(group):
            bad_ids.add(id(group[n]))
    for group in survivors.values():
        for e in group:
            if id(e) in bad_ids:
                rejected.append(RejectedEvent(e, RejectReason.Overlap))
    kept = [e for group in survivors.values() for e in group if id(e) not in bad_ids]
    kept_ids = {id(e) for e in kept}
    kept = [e for e in events if id(e) in kept_ids]
    return kept, rejected


@dataclass(frozen=True)
class LocationWarning:
    key: str
    code: str = "LocationOutsidePolygon"


def join_locations(events, location_table, polygon_table):
    """Fill missing ``lon``/``lat`` from the location table, else the polygon centroid.

    Returns ``(events, warnings)``; warnings flag known locations lying outside
    their own polygon. Raises :class:`UnknownSlot` when a slot needs a
    coordinate and appears in neither table.
    """
    location_table = location_table or {}
    polygon_table = polygon_table or {}
    warnings = []
    for key in sorted(set(location_table) & set(polygon_table)):
        if not point_in_polygon(location_table[key], polygon_table[key]):
            warnings.append(LocationWarning(key))
    centroids = {}
    out = []
    for e in events:
        if e.has_location:
            out.append(e)
            continue
        key = e.slot_key
        if key in location_table:
            lon, lat = location_table[key]
        elif key in polygon_table:
            if key not in centroids:
                centroids[key] = polygon_centroid(polygon_table[key])
            lon, lat = centroids[key]
        else:
            raise UnknownSlot(key)
        out.append(replace(e, lon=float(lon), lat=float(lat)))
    return out, warnings


def read_location_table(path, key_col="StreetMarker"):
    fh, reader = _open_csv(path)
    with fh:
        for col in (key_col, "Longitude", "Latitude"):
            if col not in (reader.fieldnames or []):
                raise MissingColumn(col)
        return {row[key_col].strip(): (float(row["Longitude"]), float(row["Latitude"])) for row in reader}


def read_polygon_table(path, key_col="StreetMarker", geom_col="the_geom"):
    """Polygons given as WKT (``POLYGON`` or single-part ``MULTIPOLYGON``)."""
    fh, reader = _open_csv(path)
    with fh:
        for col in (key_col, geom_col):
            if col not in (reader.fieldnames or []):
                raise MissingColumn(col)
        table = {}
        for row in reader:
            geom = wkt.loads(row[geom_col])
            if geom.geom_type == "MultiPolygon":
                geom = max(geom.geoms, key=lambda g: g.area)
            table[row[key_col].strip()] = tuple(geom.exterior.coords)[:-1]
        return table


# --- POIs, opening hours, weather -------------------------------------------

@dataclass(frozen=True)
class Poi:
    poi_id: str
    category: str
    lon: float
    lat: float
    capacity: int | None = None
    opening_hours: tuple | None = None  # 7 tuples of (open_min, close_min), Monday first

    def __post_init__(self):
        if self.opening_hours is not None:
            if len(self.opening_hours) != 7:
                raise ValueError(f"POI {self.poi_id}: schedule needs 7 days")
            for day in self.opening_hours:
                prev_close = -1
                for start, end in day:
                    if not 0 <= start < end <= 1440 or start < prev_close:
                        raise ValueError(f"POI {self.poi_id}: unsorted or overlapping intervals {day}")
                    prev_close = end

    def is_open(self, weekday, minute):
        if self.opening_hours is None:
            return False
        return any(a <= minute < b for a, b in self.opening_hours[weekday])


@dataclass(frozen=True)
class WeatherRecord:
    time: int
    temp_c: float
    wind_kmh: float
    barometer_mbar: float
    humidity_pct: float

    def __post_init__(self):
        if self.wind_kmh < 0 or self.barometer_mbar <= 0 or not 0 <= self.humidity_pct <= 100:
            raise ValueError(f"weather record at {self.time} out of range")


def _hhmm(text):
    h, m = text.strip().split(":")
    value = int(h) * 60 + int(m)
    if not 0 <= value <= 1440:
        raise ValueError(text)
    return value


def read_opening_hours(path):
    """``poi_id, day, open, close`` rows (day 0 = Monday, times ``HH:MM``, ``24:00`` allowed)."""
    fh, reader = _open_csv(path)
    table = defaultdict(lambda: [[] for _ in range(7)])
    with fh:
        for col in ("poi_id", "day", "open", "close"):
            if col not in (reader.fieldnames or []):
                raise MissingColumn(col)
        for row in reader:
            table[row["poi_id"].strip()][int(row["day"])].append((_hhmm(row["open"]), _hhmm(row["close"])))
    return {k: tuple(tuple(sorted(d)) for d in days) for k, days in table.items()}


def read_pois(path, opening_hours=None):
    opening_hours = opening_hours or {}
    fh, reader = _open_csv(path)
    with fh:
        for col in ("poi_id", "category", "longitude", "latitude"):
            if col not in (reader.fieldnames or []):
                raise MissingColumn(col)
        out = []
        for row in reader:
            cap = (row.get("capacity") or "").strip()
            pid = row["poi_id"].strip()
            out.append(Poi(pid, row["category"].strip(), float(row["longitude"]), float(row["latitude"]),
                           int(float(cap)) if cap else None, opening_hours.get(pid)))
    return out


def write_pois(path, pois, hours_path=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["poi_id", "category", "longitude", "latitude", "capacity"])
        for p in pois:
            w.writerow([p.poi_id, p.category, repr(float(p.lon)), repr(float(p.lat)), "" if p.capacity is None else p.capacity])
    if hours_path is not None:
        with open(hours_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["poi_id", "day", "open", "close"])
            for p in pois:
                for day, intervals in enumerate(p.opening_hours or ()):
                    for a, b in intervals:
                        w.writerow([p.poi_id, day, f"{a // 60:02d}:{a % 60:02d}", f"{b // 60:02d}:{b % 60:02d}"])


WEATHER_COLUMNS = ["time", "temp_c", "wind_kmh", "barometer_mbar", "humidity_pct"]


def read_weather(path, tz="Australia/Melbourne"):
    fh, reader = _open_csv(path)
    with fh:
        for col in WEATHER_COLUMNS:
            if col not in (reader.fieldnames or []):
                raise MissingColumn(col)
        out = [WeatherRecord(parse_timestamp(r["time"], tz), float(r["temp_c"]), float(r["wind_kmh"]),
                             float(r["barometer_mbar"]), float(r["humidity_pct"])) for r in reader]
    out.sort(key=lambda r: r.time)
    return out


def write_weather(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(WEATHER_COLUMNS)
        for r in records:
            w.writerow([_fmt_ts(r.time), repr(float(r.temp_c)), repr(float(r.wind_kmh)), repr(float(r.barometer_mbar)),
                        repr(float(r.humidity_pct))])


def rejection_summary(rejected):
    counts = {r.value: 0 for r in RejectReason}
    for r in rejected:
        counts[r.reason.value] += 1
    return counts


__all__ = [
    "ParkingEvent", "Poi", "RejectReason", "RejectedEvent", "Schema", "WeatherRecord",
    "filter_anomalies", "join_locations", "parse_events", "parse_timestamp", "read_location_table",
    "read_opening_hours", "read_pois", "read_polygon_table", "read_weather", "rejection_summary",
    "to_seconds", "from_seconds", "write_events_csv", "write_pois", "write_rejections_csv",
    "write_weather",
]
