"""HD map model: elements of parallel lanes with polyline centerlines.

Geometry is evaluated in the map's UTM zone. Bearings are radians clockwise
from grid north, lateral offsets are positive to the left of the direction
of travel along the centerline.
"""

from __future__ import annotations

import json
import re
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import IO, Iterable, Sequence

import jsonschema
import numpy as np
from scipy.spatial import cKDTree

from .geodesy import GeodesyError, GeoPoint, UtmPoint, latlon_to_xy, xy_to_latlon, zone_number_for

LANE_TYPES = ("car", "bike", "sidewalk", "parking")
MIN_WIDTH, MAX_WIDTH = 0.5, 10.0
MIN_VERTEX_SEPARATION = 0.01
ARC_LENGTH_TOLERANCE = 0.2
_TIE_EPS = 1e-12
TIE_DISTANCE = 1e-6


class MapFormatError(ValueError):
    """Map file is not valid JSON or does not follow the map schema."""


class MapValidationError(ValueError):
    """Map parses but violates a semantic invariant."""


@dataclass(eq=False)
class Lane:
    lane_id: str
    lane_type: str
    width: float
    centerline: list[GeoPoint]
    successor_ids: list[str] = field(default_factory=list)
    predecessor_ids: list[str] = field(default_factory=list)
    # filled in by HdMap
    element_id: str = ""
    index: int = -1
    xy: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._cum = None
        self._planar = None  # ((zone, northern), xy) when built from planar points

    def _attach(self, element_id: str, index: int, xy: np.ndarray, zone: tuple[int, str]) -> None:
        self.element_id = element_id
        self._zone = zone
        self.index = index
        self.xy = np.ascontiguousarray(xy, dtype=float)
        self.xy.setflags(write=False)
        d = np.diff(self.xy, axis=0)
        self._seg = d
        self._seg_len = np.hypot(d[:, 0], d[:, 1])
        self._cum = np.concatenate(([0.0], np.cumsum(self._seg_len)))
        self._bearing = np.mod(np.arctan2(d[:, 0], d[:, 1]), 2 * np.pi)

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Planar point at arc length ``s`` (clamped to the lane)."""
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1, len(self._seg_len) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        return self.xy[i] + t * self._seg[i]


@dataclass(eq=False)
class MapElement:
    element_id: str
    lanes: list[Lane]
    successor_ids: list[str] = field(default_factory=list)
    predecessor_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class LaneProjection:
    lane_id: str
    arc_length_s: float
    lateral_offset: float
    projected_point: UtmPoint
    lane_direction: float
    clamped: bool = False


class HdMap:
    """Immutable lane map in one UTM zone with a vertex KD-tree index."""

    def __init__(self, elements: Iterable[MapElement], utm_zone: str, version: int = 1):
        self.version = version
        self.utm_zone = utm_zone
        self.zone_number = int(utm_zone[:-1])
        self.zone_letter = utm_zone[-1].upper()
        self.northern = self.zone_letter >= "N"
        self.elements: dict[str, MapElement] = {}
        self.lanes: dict[str, Lane] = {}
        for el in elements:
            if el.element_id in self.elements:
                raise MapValidationError(f"duplicate element id {el.element_id!r}")
            self.elements[el.element_id] = el
            for i, lane in enumerate(el.lanes):
                if lane.lane_id in self.lanes:
                    raise MapValidationError(f"duplicate lane id {lane.lane_id!r}")
                self.lanes[lane.lane_id] = lane
                lane._attach(el.element_id, i, self._lane_xy(lane), (self.zone_number, self.zone_letter))
        self._validate()

        owners, verts = [], []
        self._lane_order = list(self.lanes.values())
        for k, lane in enumerate(self._lane_order):
            verts.append(lane.xy)
            owners.append(np.full(len(lane.xy), k))
        self._vertex_owner = np.concatenate(owners)
        self._tree = cKDTree(np.vstack(verts))
        self._max_half_segment = max(float(l._seg_len.max()) for l in self._lane_order) / 2

    def _lane_xy(self, lane: Lane) -> np.ndarray:
        lat = np.array([p.latitude for p in lane.centerline])
        lon = np.array([p.longitude for p in lane.centerline])
        for la, lo in zip(lat, lon):
            if zone_number_for(la, lo) != self.zone_number or (la >= 0) != self.northern:
                raise MapValidationError(
                    f"lane {lane.lane_id!r}: point ({la}, {lo}) lies outside UTM zone {self.utm_zone}"
                )
        planar = lane._planar
        if planar is not None and planar[0] == (self.zone_number, self.northern):
            # built from planar coordinates in this zone: keep them exactly
            return planar[1]
        e, n, _ = latlon_to_xy(lat, lon, self.zone_number, self.northern)
        return np.column_stack([e, n])

    def _validate(self) -> None:
        for el in self.elements.values():
            if not el.lanes:
                raise MapValidationError(f"element {el.element_id!r} has no lanes")
            for ref in el.successor_ids + el.predecessor_ids:
                if ref not in self.elements:
                    raise MapValidationError(f"element {el.element_id!r} references unknown element {ref!r}")
            lengths = []
            for lane in el.lanes:
                if lane.lane_type not in LANE_TYPES:
                    raise MapValidationError(f"lane {lane.lane_id!r}: unknown type {lane.lane_type!r}")
                if not MIN_WIDTH < lane.width < MAX_WIDTH:
                    raise MapValidationError(f"lane {lane.lane_id!r}: width {lane.width} outside ({MIN_WIDTH}, {MAX_WIDTH})")
                if len(lane.centerline) < 2:
                    raise MapValidationError(f"lane {lane.lane_id!r}: centerline needs at least 2 points")
                if lane._seg_len.min() <= MIN_VERTEX_SEPARATION:
                    i = int(np.argmin(lane._seg_len))
                    raise MapValidationError(f"lane {lane.lane_id!r}: vertices {i} and {i + 1} closer than 1 cm")
                for ref in lane.successor_ids + lane.predecessor_ids:
                    if ref not in self.lanes:
                        raise MapValidationError(f"lane {lane.lane_id!r} references unknown lane {ref!r}")
                lengths.append(lane.length)
            if (max(lengths) - min(lengths)) > ARC_LENGTH_TOLERANCE * max(lengths):
                raise MapValidationError(
                    f"element {el.element_id!r}: lane lengths {min(lengths):.1f}..{max(lengths):.1f} m disagree by more than 20%"
                )

    def lane(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    def adjacent_lane(self, lane: Lane, step: int) -> Lane | None:
        """Neighbour ``step`` positions to the right (+) or left (-) in the same element."""
        lanes = self.elements[lane.element_id].lanes
        j = lane.index + step
        return lanes[j] if 0 <= j < len(lanes) else None

    def lanes_near(self, xy: Sequence[float], radius: float) -> list[Lane]:
        """Lanes that may have centerline points within ``radius`` of ``xy``."""
        idx = self._tree.query_ball_point(np.asarray(xy, dtype=float), radius + self._max_half_segment)
        owners = sorted(set(self._vertex_owner[idx].tolist()))
        return [self._lane_order[k] for k in owners]

    def nearest_element(self, p: UtmPoint) -> MapElement:
        _, i = self._tree.query([p.easting, p.northing])
        return self.elements[self._lane_order[self._vertex_owner[i]].element_id]

    def utm(self, xy: Sequence[float]) -> UtmPoint:
        return UtmPoint(float(xy[0]), float(xy[1]), self.zone_number, self.zone_letter)

    def to_xy(self, p: GeoPoint) -> np.ndarray:
        e, n, _ = latlon_to_xy(p.latitude, p.longitude, self.zone_number, self.northern)
        return np.array([float(e), float(n)])

    def to_geo(self, xy: Sequence[float], altitude: float = 0.0) -> GeoPoint:
        lat, lon, _ = xy_to_latlon(xy[0], xy[1], self.zone_number, self.northern)
        return GeoPoint(float(lat), float(lon), altitude)

    def convergence(self, xy: Sequence[float]) -> float:
        """Grid convergence (rad) at a planar point; grid = true - convergence."""
        return float(xy_to_latlon(xy[0], xy[1], self.zone_number, self.northern)[2])

    def to_dict(self) -> dict:
        def pts(lane):
            return [[p.latitude, p.longitude] for p in lane.centerline]

        return {
            "version": self.version,
            "utm_zone": self.utm_zone,
            "elements": [
                {
                    "id": el.element_id,
                    "successors": list(el.successor_ids),
                    "predecessors": list(el.predecessor_ids),
                    "lanes": [
                        {
                            "id": l.lane_id,
                            "type": l.lane_type,
                            "width": l.width,
                            "centerline": pts(l),
                            "successors": list(l.successor_ids),
                            "predecessors": list(l.predecessor_ids),
                        }
                        for l in el.lanes
                    ],
                }
                for el in self.elements.values()
            ],
        }


def _schema() -> dict:
    return json.loads(resources.files("laas.schemas").joinpath("map.schema.json").read_text())


def load_map(source: str | bytes | IO) -> HdMap:
    """Parse and validate a JSON map (text, bytes or a readable file object)."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MapFormatError(f"map file is not UTF-8: {exc}") from None
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None

    error = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(_schema()).iter_errors(doc))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise MapFormatError(f"{where}: {error.message}")

    elements = []
    for e in doc["elements"]:
        lanes = []
        for l in e["lanes"]:
            try:
                centerline = [GeoPoint(*pt) for pt in l["centerline"]]
            except GeodesyError as exc:
                raise MapValidationError(f"lane {l['id']!r}: {exc}") from None
            lanes.append(
                Lane(
                    lane_id=l["id"],
                    lane_type=l["type"],
                    width=float(l["width"]),
                    centerline=centerline,
                    successor_ids=list(l.get("successors", [])),
                    predecessor_ids=list(l.get("predecessors", [])),
                )
            )
        elements.append(MapElement(e["id"], lanes, list(e.get("successors", [])), list(e.get("predecessors", []))))
    return HdMap(elements, doc["utm_zone"], doc["version"])


_POINT = re.compile(r"\[\s+(-?[\d.eE+-]+),\s+(-?[\d.eE+-]+)(?:,\s+(-?[\d.eE+-]+))?\s+\]")


def dump_map(hd_map: HdMap) -> str:
    text = json.dumps(hd_map.to_dict(), indent=1)
    # one centerline point per line
    return _POINT.sub(lambda m: "[" + ", ".join(g for g in m.groups() if g) + "]", text) + "\n"


def lane_from_xy(lane_id: str, lane_type: str, width: float, xy, zone_number: int, northern: bool = True, **links) -> Lane:
    """Build a lane from planar centerline coordinates in the given zone."""
    xy = np.asarray(xy, dtype=float)
    lat, lon, _ = xy_to_latlon(xy[:, 0], xy[:, 1], zone_number, northern)
    lane = Lane(lane_id, lane_type, width, [GeoPoint(float(a), float(b)) for a, b in zip(lat, lon)], **links)
    lane._planar = ((zone_number, northern), xy.copy())
    return lane


def lane_direction_at(lane: Lane, s: float) -> float:
    """Bearing of the centerline segment containing ``s``.

    At an interior vertex the outgoing segment wins; at the far end the
    final segment is used.
    """
    if not -1e-9 <= s <= lane.length + 1e-9:
        raise ValueError(f"arc length {s} outside [0, {lane.length}] on lane {lane.lane_id!r}")
    i = int(np.searchsorted(lane._cum, s, side="right")) - 1
    return float(lane._bearing[min(max(i, 0), len(lane._bearing) - 1)])


def _project_xy(p: np.ndarray, lane: Lane):
    rel = p - lane.xy[:-1]
    seg_len2 = lane._seg_len**2
    t = np.clip(np.einsum("ij,ij->i", rel, lane._seg) / seg_len2, 0.0, 1.0)
    q = lane.xy[:-1] + t[:, None] * lane._seg
    dist = np.hypot(p[0] - q[:, 0], p[1] - q[:, 1])
    s = lane._cum[:-1] + t * lane._seg_len
    # nearest segment; near-equal distances resolve to the smallest arc length
    close = np.flatnonzero(dist <= dist.min() + _TIE_EPS)
    i = int(close[np.argmin(s[close])])
    return i, float(t[i]), q[i], float(dist[i]), float(s[i])


def project_onto_lane(p: UtmPoint | Sequence[float], lane: Lane) -> LaneProjection:
    """Closest point on the lane centerline to ``p``."""
    xy = p.xy if isinstance(p, UtmPoint) else np.asarray(p, dtype=float)
    i, t, q, dist, s = _project_xy(xy, lane)
    d = lane._seg[i]
    cross = d[0] * (xy[1] - q[1]) - d[1] * (xy[0] - q[0])
    offset = math.copysign(dist, cross) if dist > 0 else 0.0
    last = len(lane._seg_len) - 1
    clamped = (i == 0 and t == 0.0 and float(np.dot(xy - lane.xy[0], d)) < 0) or (
        i == last and t == 1.0 and float(np.dot(xy - lane.xy[-1], d)) > 0
    )
    zone, letter = lane._zone
    return LaneProjection(
        lane_id=lane.lane_id,
        arc_length_s=s,
        lateral_offset=offset,
        projected_point=UtmPoint(float(q[0]), float(q[1]), zone, letter),
        lane_direction=lane_direction_at(lane, s),
        clamped=bool(clamped),
    )


def candidate_lanes(p: UtmPoint | Sequence[float], hd_map: HdMap, gate_radius: float) -> list[tuple[Lane, LaneProjection]]:
    """Lanes within ``gate_radius`` of ``p``, nearest first.

    Projections that fall off either end of a lane are excluded. Equal
    distances are ordered by lane id.
    """
    if gate_radius <= 0:
        raise ValueError("gate_radius must be positive")
    xy = p.xy if isinstance(p, UtmPoint) else np.asarray(p, dtype=float)
    out = []
    for lane in hd_map.lanes_near(xy, gate_radius):
        proj = project_onto_lane(p, lane)
        if abs(proj.lateral_offset) <= gate_radius and not proj.clamped:
            out.append((lane, proj))
    out.sort(key=lambda lp: abs(lp[1].lateral_offset))
    # offsets within TIE_DISTANCE of each other count as equal
    ranked, rank = [], 0
    for k, lp in enumerate(out):
        if k and abs(lp[1].lateral_offset) - abs(out[k - 1][1].lateral_offset) > TIE_DISTANCE:
            rank = k
        ranked.append((rank, lp[0].lane_id, lp))
    return [lp for _, _, lp in sorted(ranked, key=lambda r: r[:2])]
