from __future__ import annotations

import math

import numpy as np
import pytest
import utm
from hypothesis import given
from hypothesis import strategies as st

from laas.geodesy import (
    GeodesyError,
    GeoPoint,
    UtmPoint,
    central_meridian,
    geo_to_utm,
    grid_convergence,
    latlon_to_xy,
    utm_to_geo,
    xy_to_latlon,
    zone_number_for,
)


def test_central_meridian_equator_is_false_origin():
    u = geo_to_utm(GeoPoint(0.0, 3.0))
    assert u.zone_number == 31
    assert u.easting == pytest.approx(500000.0, abs=0.01)
    assert u.northing == pytest.approx(0.0, abs=0.01)


def test_inverse_of_false_origin():
    g = utm_to_geo(UtmPoint(500000.0, 0.0, 31, "N"))
    assert g.latitude == pytest.approx(0.0, abs=1e-6)
    assert g.longitude == pytest.approx(3.0, abs=1e-6)


@pytest.mark.parametrize("lat, lon", [(53.56, 9.98), (53.5625, 9.983), (53.55, 10.02)])
def test_hamburg_matches_reference_converter(lat, lon):
    u = geo_to_utm(GeoPoint(lat, lon))
    e, n, zone, letter = utm.from_latlon(lat, lon)
    assert (u.zone_number, u.zone_letter) == (zone, letter) == (32, "U")
    assert abs(u.easting - e) < 0.01
    assert abs(u.northing - n) < 0.01


def test_reference_converter_agreement_worldwide():
    rng = np.random.default_rng(11)
    lat = rng.uniform(-80, 84, 500)
    lon = rng.uniform(-180, 180, 500)
    for a, o in zip(lat, lon):
        u = geo_to_utm(GeoPoint(float(a), float(o)))
        e, n, zone, _ = utm.from_latlon(a, o, force_zone_number=u.zone_number)
        assert abs(u.easting - e) < 0.01 and abs(u.northing - n) < 0.01


def _zone32_sample(n, seed):
    # at least 1 km inside the zone edges (6-12 deg E), mid latitudes
    rng = np.random.default_rng(seed)
    lat = rng.uniform(-80.0, 84.0, n)
    margin = np.degrees(1000.0 / (6371000.0 * np.cos(np.radians(lat))))
    lon = 6.0 + margin + rng.uniform(0, 1, n) * (6.0 - 2 * margin)
    return lat, lon


def test_round_trip_ten_thousand_points():
    lat, lon = _zone32_sample(10_000, 1)
    north = lat >= 0
    worst = 0.0
    for hemi in (True, False):
        sel = north == hemi
        e, n, _ = latlon_to_xy(lat[sel], lon[sel], 32, hemi)
        la, lo, _ = xy_to_latlon(e, n, 32, hemi)
        worst = max(worst, float(np.max(np.abs(la - lat[sel]))), float(np.max(np.abs(lo - lon[sel]))))
    assert worst < 1e-6


def test_round_trip_through_point_types():
    lat, lon = _zone32_sample(1000, 2)
    for a, o in zip(lat, lon):
        p = GeoPoint(float(a), float(o))
        back = utm_to_geo(geo_to_utm(p))
        assert abs(back.latitude - p.latitude) < 1e-6
        assert abs(back.longitude - p.longitude) < 1e-6


@given(st.floats(-80, 84), st.floats(-179.9, 179.9))
def test_round_trip_property(lat, lon):
    p = GeoPoint(lat, lon)
    u = geo_to_utm(p)
    back = utm_to_geo(u)
    assert abs(back.latitude - lat) < 1e-6
    assert abs(back.longitude - lon) < 1e-6


def test_zone_exceptions():
    assert zone_number_for(60.0, 5.0) == 32  # south-west Norway
    assert zone_number_for(78.0, 10.0) == 33  # Svalbard
    assert zone_number_for(53.56, 9.98) == 32
    assert central_meridian(32) == 9.0


def test_out_of_band_latitude_rejected():
    with pytest.raises(GeodesyError):
        geo_to_utm(GeoPoint(85.0, 10.0))
    with pytest.raises(GeodesyError):
        geo_to_utm(GeoPoint(-84.5, 10.0))


@pytest.mark.parametrize(
    "point",
    [
        UtmPoint(0.0, 5000000.0, 32, "U"),
        UtmPoint(950000.0, 5000000.0, 32, "U"),
        UtmPoint(500000.0, -1.0, 32, "U"),
        UtmPoint(500000.0, 5000000.0, 61, "U"),
        UtmPoint(500000.0, 5000000.0, 32, "I"),
    ],
)
def test_invalid_utm_rejected(point):
    with pytest.raises(GeodesyError):
        utm_to_geo(point)


def test_invalid_geo_rejected():
    with pytest.raises(GeodesyError):
        GeoPoint(91.0, 0.0)
    with pytest.raises(GeodesyError):
        GeoPoint(0.0, 181.0)


def test_southern_hemisphere_false_northing():
    u = geo_to_utm(GeoPoint(-33.9, 18.4))
    e, n, zone, letter = utm.from_latlon(-33.9, 18.4)
    assert u.zone_letter == letter and not u.northern
    assert abs(u.northing - n) < 0.01


def test_grid_convergence_sign_and_size():
    # east of the central meridian in the north, grid north lies east of true north
    g = grid_convergence(GeoPoint(53.56, 10.5))
    approx = math.radians(10.5 - 9.0) * math.sin(math.radians(53.56))
    assert g > 0
    assert g == pytest.approx(approx, rel=1e-3)
    assert grid_convergence(GeoPoint(53.56, 9.0)) == pytest.approx(0.0, abs=1e-12)


def test_forced_zone_projection():
    # a map anchored in zone 32 keeps using it just across the boundary
    p = GeoPoint(53.5, 12.01)
    u = geo_to_utm(p, zone_number=32)
    e, n, _, _ = utm.from_latlon(53.5, 12.01, force_zone_number=32)
    assert u.zone_number == 32
    assert abs(u.easting - e) < 0.01
