from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from laas.geodesy import GeoPoint, xy_to_latlon
from laas.hdmap import HdMap, MapElement, lane_from_xy
from laas.measurement import GpsMeasurement

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ZONE = 32
# a planar anchor inside zone 32U, near Hamburg
E0, N0 = 565000.0, 5935000.0


def fix(t_ms, e, n, heading=0.0, speed=0.0, zone=ZONE) -> GpsMeasurement:
    """A fix at planar coordinates ``(e, n)``."""
    lat, lon, _ = xy_to_latlon(e, n, zone, True)
    return GpsMeasurement(t_ms, GeoPoint(float(lat), float(lon)), heading % 360.0, speed)


def straight_map(offsets, length=200.0, bearing="east", width=3.5, types=None, spacing=10.0, origin=(E0, N0)) -> HdMap:
    """Parallel straight lanes in one element.

    ``offsets`` are signed distances to the left of the travel direction and
    must be given left to right (descending).
    """
    n = int(round(length / spacing))
    s = np.linspace(0.0, length, n + 1)
    e0, n0 = origin
    lanes = []
    for k, off in enumerate(offsets):
        if bearing == "east":
            xy = np.column_stack([e0 + s, np.full_like(s, n0 + off)])
        else:  # north
            xy = np.column_stack([np.full_like(s, e0 - off), n0 + s])
        lane_type = types[k] if types else "car"
        lanes.append(lane_from_xy(str(k), lane_type, width, xy, ZONE))
    return HdMap([MapElement("road", lanes)], "32U")


@pytest.fixture
def three_lane_map() -> HdMap:
    return straight_map([3.5, 0.0, -3.5])


@pytest.fixture
def two_lane_map() -> HdMap:
    return straight_map([1.75, -1.75])


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
