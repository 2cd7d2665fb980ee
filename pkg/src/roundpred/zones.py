"""Polygonal zone maps: point location, section grouping, and distances.

A map is a set of integer-id zones, each a simple polygon with a kind
(entry, exit, circular, conflict, excluded), plus sections that group the
circular zones into ring segments.  Entry/exit/conflict zones may name the
section they feed into.  Point-in-polygon is even-odd with boundary points
counted as inside, and overlap ties resolve to the lowest zone id, so
location is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

KINDS = ("entry", "exit", "circular", "conflict", "excluded")
_EDGE_EPS = 1e-9


class GeometryError(ValueError):
    """A polygon is degenerate or self-intersecting."""


class MapError(ValueError):
    """Zone/section structure is inconsistent."""


def _clean_polygon(vertices) -> np.ndarray:
    poly = np.asarray(vertices, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2:
        raise GeometryError(f"polygon must be an (n, 2) vertex list, got shape {poly.shape}")
    if not np.all(np.isfinite(poly)):
        raise GeometryError("polygon has non-finite vertices")
    if len(poly) >= 2 and np.array_equal(poly[0], poly[-1]):
        poly = poly[:-1]
    if len(poly) < 3:
        raise GeometryError(f"polygon needs at least 3 distinct vertices, got {len(poly)}")
    nxt = np.roll(poly, -1, axis=0)
    if np.any(np.all(poly == nxt, axis=1)):
        raise GeometryError("polygon has a zero-length edge")
    _check_simple(poly)
    return poly


def _check_simple(poly: np.ndarray):
    n = len(poly)
    segs = [(poly[i], poly[(i + 1) % n]) for i in range(n)]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            p1, p2 = segs[i]
            p3, p4 = segs[j]
            d1, d2 = cross(p3, p4, p1), cross(p3, p4, p2)
            d3, d4 = cross(p1, p2, p3), cross(p1, p2, p4)
            if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
                raise GeometryError(f"polygon edges {i} and {j} cross")


def _contains(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd containment with boundary points inside; pts is (n, 2)."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        dx, dy = x2 - x1, y2 - y1
        seg_len = float(np.hypot(dx, dy))
        cross = (x - x1) * dy - (y - y1) * dx
        t = (x - x1) * dx + (y - y1) * dy
        slack = _EDGE_EPS * seg_len
        on_edge |= (np.abs(cross) <= slack * seg_len) & (t >= -slack) & (t <= seg_len**2 + slack)
        if dy != 0.0:
            cond = (y1 > y) != (y2 > y)
            x_at = x1 + (y - y1) * dx / dy
            inside ^= cond & (x < x_at)
    return inside | on_edge


def _distance(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Euclidean distance to the polygon (zero for points inside)."""
    best = np.full(len(pts), np.inf)
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        d = b - a
        len2 = float(d @ d)
        t = np.clip(((pts - a) @ d) / len2, 0.0, 1.0)
        proj = a + t[:, None] * d
        best = np.minimum(best, np.hypot(*(pts - proj).T))
    best[_contains(poly, pts)] = 0.0
    return best


@dataclass(frozen=True)
class Zone:
    id: int
    kind: str
    polygon: np.ndarray = field(repr=False)
    feeds_section: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MapError(f"zone {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(self, "polygon", _clean_polygon(self.polygon))
        if self.feeds_section is not None and self.kind in ("circular", "excluded"):
            raise MapError(f"zone {self.id}: {self.kind} zones cannot declare feeds_section")

    def contains(self, points) -> np.ndarray:
        return _contains(self.polygon, np.atleast_2d(np.asarray(points, dtype=np.float64)))

    def distance(self, points) -> np.ndarray:
        return _distance(self.polygon, np.atleast_2d(np.asarray(points, dtype=np.float64)))


class ZoneMap:
    """Validated collection of zones plus the circular-zone section grouping."""

    def __init__(self, zones, sections: dict[int, tuple[int, ...]]):
        zone_list = sorted(zones, key=lambda z: z.id)
        ids = [z.id for z in zone_list]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise MapError(f"duplicate zone ids {dupes}")
        self._zones = {z.id: z for z in zone_list}
        self._ordered = zone_list
        self._sections = {int(k): tuple(int(z) for z in v) for k, v in sections.items()}
        self._section_of_zone: dict[int, int] = {}
        for sid, members in self._sections.items():
            for zid in members:
                if zid not in self._zones:
                    raise MapError(f"section {sid} references unknown zone {zid}")
                if self._zones[zid].kind != "circular":
                    raise MapError(f"section {sid} includes non-circular zone {zid}")
                if zid in self._section_of_zone:
                    raise MapError(f"circular zone {zid} appears in more than one section")
                self._section_of_zone[zid] = sid
        for z in zone_list:
            if z.kind == "circular" and z.id not in self._section_of_zone:
                raise MapError(f"circular zone {z.id} belongs to no section")
            if z.feeds_section is not None and z.feeds_section not in self._sections:
                raise MapError(f"zone {z.id} feeds unknown section {z.feeds_section}")

    # -- accessors ---------------------------------------------------------

    @property
    def zones(self) -> tuple[Zone, ...]:
        return tuple(self._ordered)

    @property
    def sections(self) -> dict[int, tuple[int, ...]]:
        return dict(self._sections)

    def zone(self, zone_id: int) -> Zone:
        try:
            return self._zones[zone_id]
        except KeyError:
            raise KeyError(f"unknown zone id {zone_id}") from None

    def zones_of_kind(self, kind: str) -> tuple[Zone, ...]:
        if kind not in KINDS:
            raise MapError(f"unknown kind {kind!r}")
        return tuple(z for z in self._ordered if z.kind == kind)

    # -- queries -----------------------------------------------------------

    def locate(self, point) -> int | None:
        ids = self.locate_many(np.asarray(point, dtype=np.float64)[None, :])
        return None if ids[0] < 0 else int(ids[0])

    def locate_many(self, points) -> np.ndarray:
        """Lowest containing zone id per point, -1 where no zone contains it."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be (n, 2), got {pts.shape}")
        out = np.full(len(pts), -1, dtype=np.int64)
        for z in self._ordered:  # ascending id: first hit is the lowest id
            open_idx = np.nonzero(out < 0)[0]
            if open_idx.size == 0:
                break
            hit = _contains(z.polygon, pts[open_idx])
            out[open_idx[hit]] = z.id
        return out

    def section_of(self, zone_id: int) -> int | None:
        z = self.zone(zone_id)
        if z.kind == "circular":
            return self._section_of_zone[zone_id]
        if z.kind == "excluded":
            return None
        return z.feeds_section

    def sections_at(self, points) -> np.ndarray:
        """Section id per point via locate + section_of; -1 where undefined."""
        ids = self.locate_many(points)
        out = np.full(len(ids), -1, dtype=np.int64)
        for zid in np.unique(ids):
            if zid < 0:
                continue
            sec = self.section_of(int(zid))
            if sec is not None:
                out[ids == zid] = sec
        return out

    def min_distance_to_kinds(self, points, kinds) -> np.ndarray:
        """Distance from each point to the nearest zone among the given kinds."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        best = np.full(len(pts), np.inf)
        for z in self._ordered:
            if z.kind in kinds:
                best = np.minimum(best, _distance(z.polygon, pts))
        return best

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        zones = []
        for z in self._ordered:
            rec = {"id": z.id, "kind": z.kind, "polygon": z.polygon.tolist()}
            if z.feeds_section is not None:
                rec["feeds_section"] = z.feeds_section
            zones.append(rec)
        sections = [{"id": sid, "zones": list(members)} for sid, members in sorted(self._sections.items())]
        return {"zones": zones, "sections": sections}

    @classmethod
    def from_dict(cls, data: dict) -> "ZoneMap":
        try:
            zone_recs = data["zones"]
            section_recs = data["sections"]
        except KeyError as exc:
            raise MapError(f"map is missing key {exc}") from None
        zones = [
            Zone(
                id=int(rec["id"]),
                kind=str(rec["kind"]),
                polygon=rec["polygon"],
                feeds_section=(int(rec["feeds_section"]) if rec.get("feeds_section") is not None else None),
            )
            for rec in zone_recs
        ]
        sections = {int(rec["id"]): tuple(int(z) for z in rec["zones"]) for rec in section_recs}
        return cls(zones, sections)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ZoneMap":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise MapError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(data)
