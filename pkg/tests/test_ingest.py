import itertools
from datetime import datetime

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fadacs.errors import InputMissing, MissingColumn, UnknownSlot, UnparsableRow
from fadacs.ingest import (
    RYE_COLUMNS, ParkingEvent, Poi, RejectReason, WeatherRecord, filter_anomalies, join_locations,
    parse_events, parse_timestamp, read_opening_hours, read_pois, read_weather, rejection_summary,
    to_seconds, write_events_csv,
)

MEL_HEADER = ["DeviceId", "ArrivalTime", "DepartureTime", "DurationSeconds", "StreetMarker", "Sign"]


def ts(text):
    return to_seconds(datetime.fromisoformat(text))


def ev(arr, dep, slot="A", duration=None):
    a, d = ts(arr), ts(dep)
    return ParkingEvent("d-" + slot, a, d, d - a if duration is None else duration, "2P", street_marker=slot)


def test_rye_row_maps_all_fields(write_csv):
    row = {"DeviceId": "7", "DeviceName": "bay 7", "ArrivalTime": "2020-02-03T10:00:00",
           "DepartureTime": "2020-02-03T10:30:00", "Duration": "1800", "OverstayDuration": "0",
           "StreetName": "Main St", "Restriction": "2P", "Longitude": "144.9", "Latitude": "-38.3",
           "Sector": "S1"}
    path = write_csv("rye.csv", RYE_COLUMNS, [[row[c] for c in RYE_COLUMNS]])
    (e,) = parse_events(path, "RyeV1")
    assert (e.device_id, e.duration, e.restriction, e.sector) == ("7", 1800, "2P", "S1")
    assert (e.lon, e.lat) == (144.9, -38.3)
    assert e.departure - e.arrival == 1800


def test_melbourne_row_has_no_coordinates(write_csv):
    path = write_csv("mel.csv", MEL_HEADER, [
        ["1", "02/06/2017 09:00:00 AM", "02/06/2017 09:30:00 AM", "1800", "C1", "1P MTR"]])
    (e,) = parse_events(path, "MelbourneV1")
    assert e.lon is None and e.lat is None
    assert e.slot_key == "C1"
    assert e.arrival == ts("2017-02-06T09:00:00")


def test_invalid_date_is_reported_not_dropped(write_csv):
    path = write_csv("mel.csv", MEL_HEADER, [
        ["1", "2017-02-01T10:00", "2017-02-01T11:00", "3600", "C1", "1P"],
        ["2", "2017-02-31T10:00", "2017-02-31T11:00", "3600", "C2", "1P"],
    ])
    with pytest.raises(UnparsableRow) as info:
        parse_events(path, "MelbourneV1")
    assert info.value.problems == [(3, "ArrivalTime")]
    assert len(info.value.events) == 1


def test_missing_column(write_csv):
    path = write_csv("mel.csv", MEL_HEADER[:-1], [])
    with pytest.raises(MissingColumn) as info:
        parse_events(path, "MelbourneV1")
    assert "Sign" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(InputMissing):
        parse_events(tmp_path / "nope.csv", "RyeV1")


def test_offset_timestamps_convert_to_local_time():
    # 2020-02-03 is daylight-saving time in Melbourne (UTC+11)
    assert parse_timestamp("2020-02-02T23:00:00Z") == ts("2020-02-03T10:00:00")


def test_negative_duration_rejected():
    e = ev("2020-02-03T10:00", "2020-02-03T10:00:30", duration=-30)
    kept, rej = filter_anomalies([e])
    assert kept == [] and rej[0].reason is RejectReason.NonPositiveDuration


def test_both_midnight_rejected():
    e = ev("2020-02-03T00:00", "2020-02-03T00:00", duration=0)
    _, rej = filter_anomalies([e])
    assert rej[0].reason is RejectReason.BothMidnight


def test_crossing_midnight_rejected():
    e = ev("2020-02-03T23:30", "2020-02-04T00:30")
    _, rej = filter_anomalies([e])
    assert rej[0].reason is RejectReason.CrossesMidnight


def test_departure_at_end_of_day_is_kept():
    e = ev("2020-02-03T23:30", "2020-02-03T23:59:59")
    kept, _ = filter_anomalies([e])
    assert kept == [e]


def test_overlap_rejects_both_members():
    a = ev("2020-02-03T10:00", "2020-02-03T11:00")
    b = ev("2020-02-03T10:30", "2020-02-03T12:00")
    c = ev("2020-02-03T12:00", "2020-02-03T13:00")
    other = ev("2020-02-03T10:15", "2020-02-03T10:45", slot="B")
    kept, rej = filter_anomalies([a, b, c, other])
    assert kept == [c, other]
    assert sorted((r.event.arrival, r.reason) for r in rej) == [
        (a.arrival, RejectReason.Overlap), (b.arrival, RejectReason.Overlap)]


def _overlap_oracle(events):
    hit = set()
    for i, j in itertools.combinations(range(len(events)), 2):
        x, y = events[i], events[j]
        if x.slot_key == y.slot_key and x.arrival < y.departure and y.arrival < x.departure:
            hit.update((i, j))
    return hit


DAY0 = ts("2020-02-03T00:00")


@st.composite
def event_lists(draw):
    n = draw(st.integers(0, 25))
    out = []
    for _ in range(n):
        slot = draw(st.sampled_from("ABC"))
        start = draw(st.integers(0, 2 * 86400))
        length = draw(st.integers(-600, 4 * 3600))
        a = DAY0 + start
        out.append(ParkingEvent("d", a, a + length, length, "2P", street_marker=slot))
    return out


@settings(max_examples=200, deadline=None)
@given(event_lists())
def test_filter_properties(events):
    kept, rej = filter_anomalies(events)
    assert len(kept) + len(rej) == len(events)
    assert sorted(map(id, kept + [r.event for r in rej])) == sorted(map(id, events))
    again_kept, again_rej = filter_anomalies(kept)
    assert again_rej == [] and again_kept == kept
    for e in kept:
        assert e.duration > 0 and abs(e.duration - (e.departure - e.arrival)) <= 1
        assert e.arrival // 86400 == e.departure // 86400
    # overlap oracle over the single-event survivors
    valid = [e for e in events if e not in [r.event for r in rej if r.reason is not RejectReason.Overlap]]
    expected_overlap = {id(valid[i]) for i in _overlap_oracle(valid)}
    got_overlap = {id(r.event) for r in rej if r.reason is RejectReason.Overlap}
    assert got_overlap == expected_overlap


def test_join_locations():
    slot_a = ParkingEvent("1", DAY0, DAY0 + 60, 60, "2P", street_marker="A")
    slot_b = ParkingEvent("2", DAY0, DAY0 + 60, 60, "2P", street_marker="B")
    square = ((0, 0), (0, 2), (2, 2), (2, 0))
    out, warns = join_locations([slot_a, slot_b], {"A": (5.0, 6.0)}, {"B": square})
    assert (out[0].lon, out[0].lat) == (5.0, 6.0)
    assert (out[1].lon, out[1].lat) == (1.0, 1.0)
    assert warns == []
    with pytest.raises(UnknownSlot):
        join_locations([ParkingEvent("3", DAY0, DAY0 + 60, 60, "2P", street_marker="Z")], {}, {})


def test_join_locations_warns_when_outside_polygon():
    square = ((0, 0), (0, 2), (2, 2), (2, 0))
    _, warns = join_locations([], {"A": (5.0, 5.0)}, {"A": square})
    assert [w.key for w in warns] == ["A"]


def test_rye_roundtrip(tmp_path):
    events = [ParkingEvent("9", DAY0 + 600, DAY0 + 1200, 600, "1P", sector="S", lon=144.1, lat=-38.2)]
    path = tmp_path / "e.csv"
    write_events_csv(path, events)
    back = parse_events(path, "RyeV1")
    assert [(e.arrival, e.departure, e.duration, e.lon, e.lat, e.sector) for e in back] == [
        (DAY0 + 600, DAY0 + 1200, 600, 144.1, -38.2, "S")]


def test_poi_opening_hours(write_csv):
    hours = write_csv("h.csv", ["poi_id", "day", "open", "close"], [["p1", 0, "09:00", "17:00"],
                                                                      ["p1", 5, "18:00", "24:00"]])
    pois = write_csv("p.csv", ["poi_id", "category", "longitude", "latitude", "capacity"],
                     [["p1", "bar", "144.9", "-37.8", "120"], ["p2", "cafe", "144.9", "-37.8", ""]])
    p1, p2 = read_pois(pois, read_opening_hours(hours))
    assert p1.capacity == 120 and p2.capacity is None
    assert p1.is_open(0, 9 * 60) and not p1.is_open(0, 17 * 60) and p1.is_open(5, 23 * 60 + 59)
    assert not p2.is_open(0, 600)


def test_poi_rejects_overlapping_intervals():
    with pytest.raises(ValueError):
        Poi("x", "bar", 0, 0, None, (((60, 120), (100, 200)),) + ((),) * 6)


def test_weather_reader_sorts_and_validates(write_csv):
    path = write_csv("w.csv", ["time", "temp_c", "wind_kmh", "barometer_mbar", "humidity_pct"],
                     [["2020-02-03T10:30", 20, 5, 1013, 50], ["2020-02-03T10:00", 19, 4, 1012, 55]])
    recs = read_weather(path)
    assert [r.temp_c for r in recs] == [19.0, 20.0]
    with pytest.raises(ValueError):
        WeatherRecord(0, 20, -1, 1000, 50)


def test_rejection_summary_counts_every_reason():
    _, rej = filter_anomalies([ev("2020-02-03T10:00", "2020-02-03T10:00:30", duration=-30)])
    summary = rejection_summary(rej)
    assert summary["NonPositiveDuration"] == 1 and set(summary) == {r.value for r in RejectReason}
