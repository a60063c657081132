from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fadacs.errors import NoWeatherBefore, SeriesTooShort, ShapeMismatch
from fadacs.features import (
    CHANNELS, Normalizer, OccupancyGrid, assemble_windows, build_context, datetime_channels,
    occupancy_series, poi_channels, read_grid_csv, read_tensor, temporal_split, weather_channels,
    write_grid_csv, write_tensor,
)
from fadacs.ingest import ParkingEvent, Poi, WeatherRecord, to_seconds
from fadacs.spatial import EARTH_RADIUS_M, ParkingLot, haversine_m

import math


def ts(text):
    return to_seconds(datetime.fromisoformat(text))


T10 = ts("2020-02-03T10:00")


def event(slot, a, d):
    return ParkingEvent("d", a, d, d - a, "2P", street_marker=slot)


def lot(keys, lot_id=0, centroid=(144.96, -37.81)):
    return ParkingLot(lot_id, frozenset(keys), "2P", centroid)


def test_half_occupied_lot():
    slots = [f"s{i}" for i in range(10)]
    events = [event(s, T10 - 60, T10 + 60) for s in slots[:5]]
    grid = occupancy_series(events, [lot(slots)], 5, (T10, T10 + 300))
    assert grid.values[0, 0] == 0.5


def test_lot_without_events_is_zero():
    grid = occupancy_series([], [lot(["a", "b"])], 5, (T10, T10 + 3600))
    assert grid.values.shape == (1, 12) and not grid.values.any()


def membership_oracle(events, lots, interval_min, span):
    times = range(span[0], span[1], interval_min * 60)
    out = np.zeros((len(lots), len(times)))
    for li, l in enumerate(lots):
        for n, t in enumerate(times):
            occupied = {e.slot_key for e in events if e.slot_key in l.slot_keys and e.arrival <= t < e.departure}
            out[li, n] = len(occupied) / l.n_slots
    return out


def test_two_slot_example():
    events = [event("A", T10, T10 + 7 * 60)]
    grid = occupancy_series(events, [lot(["A", "B"])], 5, (T10, T10 + 15 * 60))
    assert grid.values[0].tolist() == [0.5, 0.5, 0.0]
    assert np.array_equal(grid.values, membership_oracle(events, [lot(["A", "B"])], 5, (T10, T10 + 900)))


@st.composite
def slot_events(draw):
    out = []
    for _ in range(draw(st.integers(0, 15))):
        a = T10 + draw(st.integers(-3600, 7200))
        out.append(event(draw(st.sampled_from("abcde")), a, a + draw(st.integers(1, 3600))))
    return out


@settings(max_examples=150, deadline=None)
@given(slot_events(), st.sampled_from([1, 5]))
def test_occupancy_matches_membership_oracle(events, interval):
    lots = [lot("abc", 0), lot("de", 1)]
    span = (T10, T10 + 2 * 3600)
    grid = occupancy_series(events, lots, interval, span)
    assert np.array_equal(grid.values, membership_oracle(events, lots, interval, span))
    assert ((grid.values >= 0) & (grid.values <= 1)).all()
    if events:
        more = occupancy_series(events + [event("a", T10, T10 + 1800)], lots, interval, span)
        assert (more.values >= grid.values).all()


def test_grid_validation():
    with pytest.raises(ShapeMismatch):
        OccupancyGrid([0], [0, 300], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        OccupancyGrid([0], [0, 300, 900], np.zeros((1, 3)))


def test_datetime_channels():
    assert datetime_channels(ts("2017-02-06T09:00")) == (0, 6, 9)
    assert datetime_channels(ts("2020-02-29T23:55")) == (5, 29, 23)
    assert datetime_channels(ts("2020-02-29T00:00"))[2] == 0
    assert datetime_channels(ts("2020-02-29T10:00"), month_of_year=True) == (5, 2, 10)


def test_weather_step_lookup():
    recs = [WeatherRecord(T10, 20, 5, 1010, 50), WeatherRecord(T10 + 1800, 22, 6, 1011, 40)]
    assert weather_channels(T10, recs) == (20, 5, 1010, 50)
    assert weather_channels(T10 + 900, recs) == (20, 5, 1010, 50)
    assert weather_channels(T10 + 1800, recs)[0] == 22
    with pytest.raises(NoWeatherBefore):
        weather_channels(T10 - 1, recs)


def north_of(base, meters):
    return (base[0], base[1] + meters / (math.pi * EARTH_RADIUS_M / 180))


ALWAYS = tuple(((0, 1440),) for _ in range(7))
NEVER = tuple(() for _ in range(7))


def test_poi_channels_empty_and_single():
    l = lot(["a"])
    assert poi_channels(l, [], T10) == (0, 0, 0, 0, 1000.0, 500.0)
    far = Poi("x", "bar", *north_of(l.centroid, 1500), opening_hours=ALWAYS)
    assert poi_channels(l, [far], T10) == (0, 0, 0, 0, 1000.0, 500.0)
    p = Poi("p", "bar", *north_of(l.centroid, 300), opening_hours=ALWAYS)
    got = poi_channels(l, [p], T10)
    assert got[:4] == (1, 1, 1, 1)
    assert got[4] == pytest.approx(300, abs=1e-6) and got[5] == pytest.approx(300, abs=1e-6)


def test_poi_channels_radius_scan():
    l = lot(["a"])
    dists = [100, 400, 700, 900, 1200]
    schedules = [NEVER, ALWAYS, ALWAYS, None, ALWAYS]
    pois = [Poi(f"p{d}", "bar", *north_of(l.centroid, d), opening_hours=s) for d, s in zip(dists, schedules)]
    weekday = datetime.fromisoformat("2020-02-03T10:00").weekday()
    expected = []
    for radius in (1000, 500):
        inside = [p for p in pois if haversine_m(l.centroid, (p.lon, p.lat)) <= radius]
        expected.append(inside)
    n_open = [sum(p.is_open(weekday, 600) for p in inside) for inside in expected]
    n_poi = [len(inside) for inside in expected]
    mins = [min(haversine_m(l.centroid, (p.lon, p.lat)) for p in inside) for inside in expected]
    got = poi_channels(l, pois, T10)
    assert got[:4] == (n_open[0], n_open[1], n_poi[0], n_poi[1]) == (2, 1, 4, 2)
    assert got[4:] == pytest.approx(tuple(mins))


def small_domain(n_t=12, n_l=2):
    times = T10 + 300 * np.arange(n_t)
    rng = np.random.default_rng(0)
    grid = OccupancyGrid(list(range(n_l)), times, rng.uniform(size=(n_l, n_t)))
    lots = [lot([f"k{i}"], i, (144.96 + 0.001 * i, -37.81)) for i in range(n_l)]
    weather = [WeatherRecord(int(times[0]), 20, 5, 1010, 50)]
    return grid, lots, weather


def test_context_has_sixteen_channels():
    grid, lots, weather = small_domain()
    ctx = build_context(grid, lots, [], weather)
    assert ctx.values.shape == (12, 2, 16) and ctx.channel_names == list(CHANNELS)
    occ = ctx.values[..., CHANNELS.index("occupancy")]
    assert np.array_equal(occ, grid.values.T)
    assert np.array_equal(ctx.values[..., CHANNELS.index("availability")], (grid.values.T < 1).astype(float))


def test_window_counts_and_short_series():
    grid, lots, weather = small_domain(12)
    ctx = build_context(grid, lots, [], weather)
    X, Y = assemble_windows(grid, ctx, 6, 1)
    assert len(X) == 6 and X.values.shape == (6, 6, 2, 16) and Y.values.shape == (6, 2)
    short, lots_s, _ = small_domain(6)
    with pytest.raises(SeriesTooShort):
        assemble_windows(short, build_context(short, lots_s, [], weather), 6, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(8, 30), st.integers(1, 6), st.sampled_from([1, 3, 6]))
def test_window_target_alignment(n_t, lookback, horizon):
    grid, lots, weather = small_domain(n_t)
    ctx = build_context(grid, lots, [], weather)
    if n_t - lookback - horizon + 1 <= 0:
        with pytest.raises(SeriesTooShort):
            assemble_windows(grid, ctx, lookback, horizon)
        return
    X, Y = assemble_windows(grid, ctx, lookback, horizon)
    occ = CHANNELS.index("occupancy")
    for i in range(len(X)):
        assert np.array_equal(X.values[i, :, :, occ], grid.values[:, i:i + lookback].T)
        assert np.array_equal(Y.values[i], grid.values[:, i + lookback - 1 + horizon])
        assert Y.target_times[i] == grid.timestamps[i + lookback - 1 + horizon]


def test_normalizer_roundtrip_and_reuse():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 6, 3, 4)) * [1, 10, 100, 0]
    tr, va, te = temporal_split(len(x))
    norm = Normalizer.fit(x[tr], list("abcd"))
    z = norm.transform(x[tr])
    assert z.min() >= 0 and z.max() <= 1
    assert np.abs(norm.inverse(norm.transform(x)) - x).max() < 1e-12
    again = Normalizer.from_dict(norm.to_dict(), list("abcd"))
    assert np.array_equal(again.mins, norm.mins) and np.array_equal(again.maxs, norm.maxs)


def test_temporal_split_is_contiguous():
    tr, va, te = temporal_split(100)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    assert np.array_equal(np.concatenate([tr, va, te]), np.arange(100))


def test_tensor_file_roundtrip(tmp_path):
    values = np.random.default_rng(2).normal(size=(3, 6, 2, 4))
    write_tensor(tmp_path / "x.fdt", values, ["a", "b", "c", "d"], {"norm": 1})
    got, names, side = read_tensor(tmp_path / "x.fdt")
    assert np.array_equal(got, values) and names == ["a", "b", "c", "d"] and side == {"norm": 1}
    raw = (tmp_path / "x.fdt").read_bytes()
    assert raw[:4] == b"FDFT"


def test_grid_csv_roundtrip(tmp_path):
    grid, _, _ = small_domain()
    write_grid_csv(tmp_path / "g.csv", grid)
    back = read_grid_csv(tmp_path / "g.csv")
    assert back.lot_ids == grid.lot_ids
    assert np.array_equal(back.values, grid.values) and np.array_equal(back.timestamps, grid.timestamps)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1500), st.booleans(), st.booleans()), max_size=12),
       st.integers(0, 7 * 86400 - 1))
def test_poi_count_invariants(specs, offset):
    l = lot(["a"])
    pois = [Poi(f"p{n}", "bar", *north_of(l.centroid, d), opening_hours=(ALWAYS if o else NEVER) if s else None)
            for n, (d, o, s) in enumerate(specs)]
    n_open_1k, n_open_500, n_1k, n_500, d_1k, d_500 = poi_channels(l, pois, T10 + offset)
    assert n_open_1k <= n_1k and n_open_500 <= n_500
    assert n_500 <= n_1k and n_open_500 <= n_open_1k
    assert 0 <= d_1k <= 1000 and 0 <= d_500 <= 500
