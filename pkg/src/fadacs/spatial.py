"""Slot geometry, great-circle distances and clustering of slots into parking lots.

Coordinates are ``(lon, lat)`` pairs in degrees throughout.
"""
from __future__ import annotations

import csv
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.strtree import STRtree

from .errors import InsufficientEdges

EARTH_RADIUS_M = 6_371_000.0
VERTEX_TOL_DEG = 1e-9
THRESHOLD_STD_FACTOR = 1.5


def haversine_m(a, b):
    """Great-circle distance in meters between ``a=(lon, lat)`` and ``b=(lon, lat)``."""
    lon1, lat1 = map(math.radians, a)
    lon2, lat2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_matrix(lonlat_a, lonlat_b):
    """Pairwise distances ``[len(a), len(b)]`` in meters for arrays of ``(lon, lat)`` rows."""
    a = np.radians(np.atleast_2d(np.asarray(lonlat_a, dtype=float)))
    b = np.radians(np.atleast_2d(np.asarray(lonlat_b, dtype=float)))
    dlat = b[None, :, 1] - a[:, None, 1]
    dlon = b[None, :, 0] - a[:, None, 0]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[:, None, 1]) * np.cos(b[None, :, 1]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def normalize_rule(rule):
    """Trim, uppercase and collapse internal whitespace."""
    return re.sub(r"\s+", " ", str(rule).strip()).upper()


def _is_convex(pts):
    n = len(pts)
    sign = 0
    for k in range(n):
        (x0, y0), (x1, y1), (x2, y2) = pts[k], pts[(k + 1) % n], pts[(k + 2) % n]
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        if cross != 0:
            s = 1 if cross > 0 else -1
            if sign and s != sign:
                return False
            sign = s
    return True


def polygon_centroid(polygon):
    """Vertex mean for convex rings, area-weighted (shoelace) centroid otherwise."""
    pts = [tuple(map(float, p)) for p in polygon]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 distinct vertices")
    if _is_convex(pts):
        return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts))
    a = cx = cy = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        cross = x0 * y1 - x1 * y0
        a += cross
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    a *= 0.5
    return (cx / (6 * a), cy / (6 * a))


def point_in_polygon(point, polygon):
    return Polygon(polygon).covers(Point(point))


@dataclass(frozen=True)
class SlotGeometry:
    slot_key: str
    lon: float
    lat: float
    rule: str
    polygon: tuple | None = None
    sector: str | None = None

    def __post_init__(self):
        if self.polygon is not None and len(self.polygon) < 3:
            raise ValueError(f"slot {self.slot_key}: polygon needs >= 3 vertices")

    @property
    def lonlat(self):
        return (self.lon, self.lat)


@dataclass(frozen=True)
class ParkingLot:
    lot_id: int
    slot_keys: frozenset
    rule: str
    centroid: tuple

    @property
    def n_slots(self):
        return len(self.slot_keys)


class UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = dict.fromkeys(self.parent, 0)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1

    def groups(self):
        out = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return list(out.values())


def _polygons_touch(pa, pb, va, vb):
    if pa.boundary.intersects(pb.boundary):
        return True
    d = np.abs(va[:, None, :] - vb[None, :, :]).max(axis=2)
    return bool((d <= VERTEX_TOL_DEG).any())


def connection_graph(slots):
    """Adjacency ``{slot_key: set(slot_key)}`` from polygon contact.

    Two slots are adjacent when their polygons share a vertex (within
    ``VERTEX_TOL_DEG``) or their boundaries intersect. Slots without a polygon
    are isolated.
    """
    adj = {s.slot_key: set() for s in slots}
    with_poly = [s for s in slots if s.polygon is not None]
    if len(with_poly) < 2:
        return adj
    polys = [Polygon(s.polygon) for s in with_poly]
    verts = [np.asarray(s.polygon, dtype=float) for s in with_poly]
    tree = STRtree([p.buffer(VERTEX_TOL_DEG, join_style=2) for p in polys])
    for i, pa in enumerate(polys):
        for j in tree.query(pa.buffer(VERTEX_TOL_DEG, join_style=2)):
            j = int(j)
            if j <= i:
                continue
            if _polygons_touch(pa, polys[j], verts[i], verts[j]):
                a, b = with_poly[i].slot_key, with_poly[j].slot_key
                adj[a].add(b)
                adj[b].add(a)
    return adj


def connection_distances(slots, region=None, graph=None):
    """Centroid distances (m) over connection-graph edges with both ends in ``region``."""
    by_key = {s.slot_key: s for s in slots}
    region = set(by_key) if region is None else set(region)
    graph = connection_graph(slots) if graph is None else graph
    dists = []
    for a in sorted(region):
        for b in sorted(graph.get(a, ())):
            if a < b and b in region:
                dists.append(haversine_m(by_key[a].lonlat, by_key[b].lonlat))
    return dists


def threshold_from_distances(dists):
    """``mean + 1.5 * std`` with the population standard deviation."""
    if len(dists) < 2:
        raise InsufficientEdges(f"need at least 2 connection edges, got {len(dists)}")
    d = np.asarray(dists, dtype=float)
    return float(d.mean() + THRESHOLD_STD_FACTOR * d.std())


def connection_threshold_m(slots, region=None):
    return threshold_from_distances(connection_distances(slots, region))


def _make_lots(groups, by_key):
    groups = [sorted(g) for g in groups]
    groups.sort(key=lambda g: g[0])
    lots = []
    for lot_id, keys in enumerate(groups):
        members = [by_key[k] for k in keys]
        centroid = (float(np.mean([m.lon for m in members])), float(np.mean([m.lat for m in members])))
        lots.append(ParkingLot(lot_id, frozenset(keys), normalize_rule(members[0].rule), centroid))
    return lots


def cluster_slots(slots, threshold_m, graph=None):
    """Group slots into lots by connection, distance and rule.

    Slots are linked when they share a (normalized) rule and either their
    polygons touch or their coordinates lie within ``threshold_m``; lots are
    the connected components. Slots with different rules never share a lot,
    even when their polygons touch. Lot ids follow the sorted minimum slot key.
    """
    by_key = {s.slot_key: s for s in slots}
    if len(by_key) != len(slots):
        raise ValueError("duplicate slot keys")
    graph = connection_graph(slots) if graph is None else graph
    uf = UnionFind(sorted(by_key))
    by_rule = defaultdict(list)
    for s in slots:
        by_rule[normalize_rule(s.rule)].append(s)
    for members in by_rule.values():
        members.sort(key=lambda s: s.slot_key)
        keys = [s.slot_key for s in members]
        rule_set = set(keys)
        for k in keys:
            for nb in graph.get(k, ()):
                if nb in rule_set:
                    uf.union(k, nb)
        if len(members) > 1:
            d = haversine_matrix([s.lonlat for s in members], [s.lonlat for s in members])
            ii, jj = np.nonzero(np.triu(d <= threshold_m, k=1))
            for i, j in zip(ii, jj):
                uf.union(keys[i], keys[j])
    return _make_lots(uf.groups(), by_key)


def cluster_by_sector(slots, threshold_m):
    """Cluster slots that carry no polygons (Rye-style data).

    Slots are first grouped by ``(sector, rule)``; groups with the same rule
    are then merged whenever their nearest members lie within ``threshold_m``.
    """
    by_key = {s.slot_key: s for s in slots}
    groups = defaultdict(list)
    for s in slots:
        groups[(s.sector or "", normalize_rule(s.rule))].append(s)
    names = sorted(groups)
    uf = UnionFind(names)
    coords = {n: [m.lonlat for m in groups[n]] for n in names}
    for a_idx, a in enumerate(names):
        for b in names[a_idx + 1:]:
            if a[1] == b[1] and haversine_matrix(coords[a], coords[b]).min() <= threshold_m:
                uf.union(a, b)
    merged = [[m.slot_key for n in g for m in groups[n]] for g in uf.groups()]
    return _make_lots(merged, by_key)


def apply_rule_overrides(slots, overrides):
    """Replace slot rules from an override table ``{slot_key: rule}``."""
    if not overrides:
        return list(slots)
    out = []
    for s in slots:
        rule = overrides.get(s.slot_key)
        out.append(s if rule is None else SlotGeometry(s.slot_key, s.lon, s.lat, rule, s.polygon, s.sector))
    return out


def _interleave16(x):
    x &= 0xFFFF
    x = (x | (x << 8)) & 0x00FF00FF
    x = (x | (x << 4)) & 0x0F0F0F0F
    x = (x | (x << 2)) & 0x33333333
    x = (x | (x << 1)) & 0x55555555
    return x


def morton_order(lots):
    """Lot indices sorted by Z-order code of ``(lat, lon)`` quantized to 16 bits on the bounding box.

    Longitude occupies the even bits, latitude the odd bits; ties fall back to ``lot_id``.
    """
    if not lots:
        return []
    lon = np.array([lot.centroid[0] for lot in lots])
    lat = np.array([lot.centroid[1] for lot in lots])

    def quant(v):
        span = v.max() - v.min()
        if span == 0:
            return np.zeros(len(v), dtype=np.int64)
        return np.round((v - v.min()) / span * 0xFFFF).astype(np.int64)

    qx, qy = quant(lon), quant(lat)
    codes = [(_interleave16(int(x)) | (_interleave16(int(y)) << 1), lots[n].lot_id, n)
             for n, (x, y) in enumerate(zip(qx, qy))]
    return [n for _, _, n in sorted(codes)]


LOT_COLUMNS = ["lot_id", "rule", "n_slots", "centroid_lon", "centroid_lat", "slot_keys"]


def write_lots_csv(path, lots):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOT_COLUMNS)
        for lot in lots:
            w.writerow([lot.lot_id, lot.rule, lot.n_slots, repr(float(lot.centroid[0])),
                        repr(float(lot.centroid[1])), ";".join(sorted(lot.slot_keys))])


def read_lots_csv(path):
    lots = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            lots.append(ParkingLot(int(row["lot_id"]), frozenset(row["slot_keys"].split(";")),
                                   row["rule"], (float(row["centroid_lon"]), float(row["centroid_lat"]))))
    return lots


def lots_to_json(lots):
    return [{"lot_id": lot.lot_id, "rule": lot.rule, "n_slots": lot.n_slots,
             "centroid": list(lot.centroid), "slot_keys": sorted(lot.slot_keys)} for lot in lots]


def lots_from_json(data):
    return [ParkingLot(d["lot_id"], frozenset(d["slot_keys"]), d["rule"], tuple(d["centroid"]))
            for d in data]


def write_lots_json(path, lots):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(lots_to_json(lots), fh, indent=2)
        fh.write("\n")


SLOT_COLUMNS = ["slot_key", "sector", "rule", "longitude", "latitude"]


def write_slots_csv(path, slots):
    """Slot inventory (polygons are not stored; pass them separately as WKT)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SLOT_COLUMNS)
        for s in sorted(slots, key=lambda s: s.slot_key):
            w.writerow([s.slot_key, s.sector or "", s.rule, repr(float(s.lon)), repr(float(s.lat))])


def read_slots_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [SlotGeometry(r["slot_key"], float(r["longitude"]), float(r["latitude"]), r["rule"], None,
                             r["sector"] or None) for r in csv.DictReader(fh)]
