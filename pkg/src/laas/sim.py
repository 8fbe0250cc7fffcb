"""Ground-truth traces on an HD map and the GNSS error model applied to them."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geodesy import GeoPoint, UtmPoint, geo_to_utm, utm_to_geo
from .hdmap import HdMap, MapElement, lane_from_xy, load_map, project_onto_lane
from .measurement import GpsMeasurement

BLEND_S = 3.0
_U64 = (1 << 64) - 1

CSV_HEADER = ["user_id", "timestamp_ms", "lat", "lon", "heading_deg", "speed_mps", "true_lane"]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class LaneSchedule:
    """Lane plan of one simulated participant.

    ``entries`` are ``(start_time_s, lane_id)`` pairs, ``speed_profile``
    gives the speed for each entry, ``start_s`` the arc length on the first
    lane at t = 0.
    """

    user_id: str
    user_kind: str
    entries: tuple[tuple[float, str], ...]
    speed_profile: tuple[float, ...]
    start_s: float = 0.0

    def __post_init__(self):
        if self.user_kind not in ("car", "cyclist"):
            raise ScheduleError(f"unknown user kind {self.user_kind!r}")
        if not self.entries or self.entries[0][0] != 0:
            raise ScheduleError(f"{self.user_id}: first entry must start at t = 0")
        times = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScheduleError(f"{self.user_id}: entry start times must increase")
        if len(self.speed_profile) != len(self.entries):
            raise ScheduleError(f"{self.user_id}: one speed per entry required")
        if any(v < 0 for v in self.speed_profile):
            raise ScheduleError(f"{self.user_id}: negative speed")


@dataclass(frozen=True)
class ErrorModelConfig:
    bias_east: float = 0.0
    bias_north: float = 0.0
    sigma_pos: float = 0.0
    sigma_vel: float = 0.0
    sigma_heading: float = 0.0  # degrees
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_pos, self.sigma_vel, self.sigma_heading) < 0:
            raise ValueError("error model sigmas must be non-negative")


@dataclass(frozen=True)
class GroundTruthSample:
    user_id: str
    timestamp_ms: int
    position: GeoPoint
    lane_id: str
    heading: float
    speed: float


class _Track:
    """Closed-form position of one scheduled user as a function of time."""

    def __init__(self, hd_map: HdMap, sched: LaneSchedule):
        self.hd_map = hd_map
        self.sched = sched
        lanes = []
        for _, lane_id in sched.entries:
            if lane_id not in hd_map.lanes:
                raise ScheduleError(f"{sched.user_id}: unknown lane {lane_id!r}")
            lanes.append(hd_map.lane(lane_id))
        for (t, _), a, b in zip(sched.entries[1:], lanes, lanes[1:]):
            if a.element_id != b.element_id:
                raise ScheduleError(f"{sched.user_id}: lane {b.lane_id!r} not reachable from {a.lane_id!r} at t={t}")
        for (t0, _), (t1, _) in zip(sched.entries, sched.entries[1:]):
            if t1 - t0 < BLEND_S:
                raise ScheduleError(f"{sched.user_id}: lane changes closer than the {BLEND_S} s blend")
        self.lanes = lanes
        # arc length on each entry's lane at the entry start time
        self.s0 = [float(sched.start_s)]
        for k in range(1, len(lanes)):
            t_c = sched.entries[k][0]
            prev = self._on_lane(k - 1, t_c)
            self.s0.append(project_onto_lane(prev, lanes[k]).arc_length_s)

    def _entry(self, t: float) -> int:
        k = 0
        while k + 1 < len(self.sched.entries) and self.sched.entries[k + 1][0] <= t:
            k += 1
        return k

    def _s(self, k: int, t: float) -> float:
        return self.s0[k] + self.sched.speed_profile[k] * (t - self.sched.entries[k][0])

    def _on_lane(self, k: int, t: float) -> np.ndarray:
        s = self._s(k, t)
        lane = self.lanes[k]
        if not 0 <= s <= lane.length:
            raise ScheduleError(f"{self.sched.user_id} leaves lane {lane.lane_id!r} at t={t:.2f} s (s={s:.1f} m)")
        return lane.point_at(s)

    def position(self, t: float) -> np.ndarray:
        k = self._entry(t)
        here = self._on_lane(k, t)
        t_c = self.sched.entries[k][0]
        if k == 0 or t - t_c >= BLEND_S:
            return here
        # previous lane continues at the new speed during the blend
        prev_lane = self.lanes[k - 1]
        s_prev = self._s(k - 1, t_c) + self.sched.speed_profile[k] * (t - t_c)
        if not 0 <= s_prev <= prev_lane.length:
            raise ScheduleError(f"{self.sched.user_id} leaves lane {prev_lane.lane_id!r} during a lane change")
        alpha = (t - t_c) / BLEND_S
        return (1 - alpha) * prev_lane.point_at(s_prev) + alpha * here

    def lane_id(self, t: float) -> str:
        k = self._entry(t)
        if k > 0 and t < self.sched.entries[k][0] + BLEND_S / 2:
            return self.lanes[k - 1].lane_id
        return self.lanes[k].lane_id


def generate_ground_truth(
    hd_map: HdMap,
    schedules: Sequence[LaneSchedule],
    duration_s: float,
    sample_rate_hz: float = 1.0,
    start_ms: int = 0,
) -> list[GroundTruthSample]:
    """Sample every scheduled user at a fixed rate, ordered by time then user."""
    if duration_s <= 0 or sample_rate_hz <= 0:
        raise ValueError("duration and sample rate must be positive")
    tracks = [_Track(hd_map, s) for s in schedules]
    n = int(math.floor(duration_s * sample_rate_hz + 1e-9))
    dt = 0.05
    out = []
    for i in range(n):
        t = i / sample_rate_hz
        for tr in tracks:
            p = tr.position(t)
            # direction of motion from t onward; at blend ends the path has a kink
            d = tr.position(t + dt) - p
            speed = tr.sched.speed_profile[tr._entry(t)]
            geo = hd_map.to_geo(p)
            if np.hypot(*d) > 0:
                grid = math.atan2(d[0], d[1])
                heading = math.degrees(grid + hd_map.convergence(p)) % 360.0
            else:
                heading = 0.0
            out.append(
                GroundTruthSample(
                    user_id=tr.sched.user_id,
                    timestamp_ms=start_ms + int(round(t * 1000)),
                    position=geo,
                    lane_id=tr.lane_id(t),
                    heading=heading % 360.0,
                    speed=float(speed),
                )
            )
    return out


def sample_rng(seed: int, user_id: str, timestamp_ms: int) -> np.random.Generator:
    """Generator keyed by (seed, user, timestamp) so each sample's noise is
    independent of which other samples are generated."""
    key = [seed & _U64, zlib.crc32(user_id.encode("utf-8")), timestamp_ms & _U64]
    return np.random.default_rng(np.random.SeedSequence(key))


def apply_error_model(truth: Iterable[GroundTruthSample], cfg: ErrorModelConfig) -> list[tuple[str, GpsMeasurement]]:
    """Bias plus per-sample Gaussian noise, one measurement per truth sample."""
    out = []
    for g in truth:
        rng = sample_rng(cfg.seed, g.user_id, g.timestamp_ms)
        z = [float(v) for v in rng.standard_normal(4)]
        de = cfg.bias_east + cfg.sigma_pos * z[0]
        dn = cfg.bias_north + cfg.sigma_pos * z[1]
        if de or dn:
            u = geo_to_utm(g.position)
            moved = utm_to_geo(UtmPoint(u.easting + de, u.northing + dn, u.zone_number, u.zone_letter))
            position = GeoPoint(moved.latitude, moved.longitude, g.position.altitude)
        else:
            position = g.position
        speed = max(0.0, g.speed + cfg.sigma_vel * z[2])
        heading = (g.heading + cfg.sigma_heading * z[3]) % 360.0
        out.append((g.user_id, GpsMeasurement(g.timestamp_ms, position, heading, speed)))
    return out


# -- default scenario -------------------------------------------------------

ORIGIN = GeoPoint(53.5625, 9.9830)  # Hamburg, zone 32U

# lanes left to right: two car lanes, bike lane, parking at the curb
LANE_LAYOUT = (("0", "car", 3.5), ("1", "car", 3.5), ("3", "bike", 2.0), ("2", "parking", 2.5))


@dataclass(frozen=True)
class RoadGeometry:
    """Straight leg, circular curve, straight leg, described by the road centre."""

    first_leg_m: float = 560.0
    curve_radius_m: float = 120.0
    curve_angle_deg: float = -90.0  # negative turns left
    second_leg_m: float = 130.0
    initial_bearing_deg: float = 225.0
    straight_step_m: float = 5.0
    curve_step_m: float = 2.0


def _reference_line(geom: RoadGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Centre points and their bearings, sampled densely."""
    pts, brg = [], []
    b0 = math.radians(geom.initial_bearing_deg)
    p = np.zeros(2)
    n1 = int(math.ceil(geom.first_leg_m / geom.straight_step_m))
    for i in range(n1 + 1):
        s = geom.first_leg_m * i / n1
        pts.append(p + s * np.array([math.sin(b0), math.cos(b0)]))
        brg.append(b0)
    start = pts[-1]
    turn = math.radians(geom.curve_angle_deg)
    arc = abs(turn) * geom.curve_radius_m
    n2 = int(math.ceil(arc / geom.curve_step_m))
    side = -1.0 if turn < 0 else 1.0  # centre of curvature: left (-) or right (+) of travel
    centre = start + side * geom.curve_radius_m * np.array([math.cos(b0), -math.sin(b0)])
    for i in range(1, n2 + 1):
        b = b0 + turn * i / n2
        pts.append(centre - side * geom.curve_radius_m * np.array([math.cos(b), -math.sin(b)]))
        brg.append(b)
    b1 = b0 + turn
    end = pts[-1]
    n3 = int(math.ceil(geom.second_leg_m / geom.straight_step_m))
    for i in range(1, n3 + 1):
        s = geom.second_leg_m * i / n3
        pts.append(end + s * np.array([math.sin(b1), math.cos(b1)]))
        brg.append(b1)
    return np.array(pts), np.array(brg)


def build_default_map(geom: RoadGeometry = RoadGeometry(), origin: GeoPoint = ORIGIN) -> HdMap:
    o = geo_to_utm(origin)
    ref, brg = _reference_line(geom)
    ref = ref + np.array([o.easting, o.northing])
    left = np.column_stack([-np.cos(brg), np.sin(brg)])
    total = sum(w for _, _, w in LANE_LAYOUT)
    lanes, edge = [], total / 2
    for lane_id, kind, width in LANE_LAYOUT:
        offset = edge - width / 2
        edge -= width
        lanes.append(lane_from_xy(lane_id, kind, width, ref + offset * left, o.zone_number, origin.latitude >= 0))
    return HdMap([MapElement("road", lanes)], f"{o.zone_number}{o.zone_letter}")


def load_default_map() -> HdMap:
    """The bundled map; generated once by :func:`build_default_map`."""
    return load_map(resources.files("laas.data").joinpath("default_map.json").read_text())


def default_scenario() -> tuple[HdMap, list[LaneSchedule]]:
    """Four-lane road with one curve; a car and two cyclists changing lanes."""
    hd_map = load_default_map()
    car, bike = 8.0, 5.0
    schedules = [
        LaneSchedule("car", "car", ((0, "0"), (90, "1")), (car, car), start_s=30.0),
        LaneSchedule("cyclist1", "cyclist", ((0, "2"), (20, "1"), (60, "3")), (bike,) * 3, start_s=120.0),
        LaneSchedule("cyclist2", "cyclist", ((0, "3"), (60, "1"), (90, "0")), (bike,) * 3, start_s=117.0),
    ]
    return hd_map, schedules


DEFAULT_DURATION_S = 100.0
DEFAULT_RATE_HZ = 1.0


# -- export -----------------------------------------------------------------


def measurement_message(m: GpsMeasurement) -> dict:
    """Wire form of a fix as published on a session input topic."""
    return {
        "t_ms": m.timestamp_ms,
        "lat": m.position.latitude,
        "lon": m.position.longitude,
        "alt": m.position.altitude,
        "heading_deg": m.heading,
        "speed_mps": m.speed,
    }


def write_truth_csv(path: Path, truth: Sequence[GroundTruthSample]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for g in truth:
            w.writerow([g.user_id, g.timestamp_ms, repr(g.position.latitude), repr(g.position.longitude), repr(g.heading), repr(g.speed), g.lane_id])


def write_measurements(out_dir: Path, measurements: Sequence[tuple[str, GpsMeasurement]], truth: Sequence[GroundTruthSample]) -> None:
    """``measurements.csv`` plus one wire-format NDJSON stream per user."""
    out_dir = Path(out_dir)
    lanes = {(g.user_id, g.timestamp_ms): g.lane_id for g in truth}
    with open(out_dir / "measurements.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for uid, m in measurements:
            w.writerow([uid, m.timestamp_ms, repr(m.position.latitude), repr(m.position.longitude), repr(m.heading), repr(m.speed), lanes.get((uid, m.timestamp_ms), "")])
    streams = out_dir / "streams"
    streams.mkdir(exist_ok=True)
    by_user: dict[str, list[str]] = {}
    for uid, m in measurements:
        by_user.setdefault(uid, []).append(json.dumps(measurement_message(m)))
    for uid, lines in by_user.items():
        (streams / f"{uid}.ndjson").write_text("\n".join(lines) + "\n")


def read_truth_csv(path: Path) -> list[GroundTruthSample]:
    with open(path, newline="") as f:
        return [
            GroundTruthSample(
                r["user_id"], int(r["timestamp_ms"]), GeoPoint(float(r["lat"]), float(r["lon"])),
                r["true_lane"], float(r["heading_deg"]), float(r["speed_mps"]),
            )
            for r in csv.DictReader(f)
        ]


def read_streams(in_dir: Path) -> dict[str, list[GpsMeasurement]]:
    streams = {}
    for p in sorted((Path(in_dir) / "streams").glob("*.ndjson")):
        msgs = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
        streams[p.stem] = [
            GpsMeasurement(d["t_ms"], GeoPoint(d["lat"], d["lon"], d.get("alt", 0.0)), d["heading_deg"], d["speed_mps"])
            for d in msgs
        ]
    return streams
