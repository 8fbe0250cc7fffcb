"""WGS84 <-> UTM conversion.

Transverse Mercator via the Krueger n-series (6th order), which is accurate
to a few nanometres inside a zone. ``latlon_to_xy``/``xy_to_latlon`` work on
scalars or numpy arrays; ``geo_to_utm``/``utm_to_geo`` wrap them for points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0

_BANDS = "CDEFGHJKLMNPQRSTUVWX"

_n = WGS84_F / (2 - WGS84_F)
_E = math.sqrt(WGS84_F * (2 - WGS84_F))
_A = WGS84_A / (1 + _n) * (1 + _n**2 / 4 + _n**4 / 64 + _n**6 / 256)

_ALPHA = (
    _n / 2 - 2 * _n**2 / 3 + 5 * _n**3 / 16 + 41 * _n**4 / 180 - 127 * _n**5 / 288 + 7891 * _n**6 / 37800,
    13 * _n**2 / 48 - 3 * _n**3 / 5 + 557 * _n**4 / 1440 + 281 * _n**5 / 630 - 1983433 * _n**6 / 1935360,
    61 * _n**3 / 240 - 103 * _n**4 / 140 + 15061 * _n**5 / 26880 + 167603 * _n**6 / 181440,
    49561 * _n**4 / 161280 - 179 * _n**5 / 168 + 6601661 * _n**6 / 7257600,
    34729 * _n**5 / 80640 - 3418889 * _n**6 / 1995840,
    212378941 * _n**6 / 319334400,
)
_BETA = (
    _n / 2 - 2 * _n**2 / 3 + 37 * _n**3 / 96 - _n**4 / 360 - 81 * _n**5 / 512 + 96199 * _n**6 / 604800,
    _n**2 / 48 + _n**3 / 15 - 437 * _n**4 / 1440 + 46 * _n**5 / 105 - 1118711 * _n**6 / 3870720,
    17 * _n**3 / 480 - 37 * _n**4 / 840 - 209 * _n**5 / 4480 + 5569 * _n**6 / 90720,
    4397 * _n**4 / 161280 - 11 * _n**5 / 504 - 830251 * _n**6 / 7257600,
    4583 * _n**5 / 161280 - 108847 * _n**6 / 3991680,
    20648693 * _n**6 / 638668800,
)


class GeodesyError(ValueError):
    """Coordinate outside the domain of the UTM projection."""


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0) or not (-180.0 <= self.longitude <= 180.0):
            raise GeodesyError(f"invalid coordinate ({self.latitude}, {self.longitude})")


@dataclass(frozen=True)
class UtmPoint:
    easting: float
    northing: float
    zone_number: int
    zone_letter: str

    @property
    def northern(self) -> bool:
        return self.zone_letter.upper() >= "N"

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.easting, self.northing])


def zone_number_for(latitude: float, longitude: float) -> int:
    if longitude == 180.0:
        longitude = -180.0
    if 56.0 <= latitude < 64.0 and 3.0 <= longitude < 12.0:
        return 32
    if 72.0 <= latitude <= 84.0 and longitude >= 0.0:
        if longitude < 9.0:
            return 31
        if longitude < 21.0:
            return 33
        if longitude < 33.0:
            return 35
        if longitude < 42.0:
            return 37
    return int((longitude + 180.0) // 6.0) % 60 + 1


def zone_letter_for(latitude: float) -> str:
    if abs(latitude) > 84.0:
        raise GeodesyError(f"latitude {latitude} outside UTM band (|lat| <= 84)")
    band = _BANDS[min(max(int((latitude + 80.0) // 8.0), 0), len(_BANDS) - 1)]
    # tiny negative latitudes round into band N; keep the letter on the southern side
    return "M" if latitude < 0 and band >= "N" else band


def central_meridian(zone_number: int) -> float:
    return (zone_number - 1) * 6.0 - 180.0 + 3.0


def _conformal_tan(phi):
    s = np.sin(phi)
    tau = np.tan(phi)
    sig = np.sinh(_E * np.arctanh(_E * s))
    return tau * np.sqrt(1 + sig**2) - sig * np.sqrt(1 + tau**2)


def latlon_to_xy(lat, lon, zone_number: int, northern: bool = True):
    """Project degrees (scalar or array) to easting/northing in a fixed zone.

    Returns ``(easting, northing, convergence_rad)``. The convergence is the
    angle from true north to grid north, so ``grid_bearing = true_bearing -
    convergence``.
    """
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float) - central_meridian(zone_number))
    lam = (lam + np.pi) % (2 * np.pi) - np.pi

    tp = _conformal_tan(phi)
    xip = np.arctan2(tp, np.cos(lam))
    etap = np.arcsinh(np.sin(lam) / np.hypot(tp, np.cos(lam)))

    xi, eta = xip.copy(), etap.copy()
    p, q = np.ones_like(xip), np.zeros_like(xip)
    for j, a in enumerate(_ALPHA, start=1):
        c2, s2 = np.cos(2 * j * xip), np.sin(2 * j * xip)
        ch, sh = np.cosh(2 * j * etap), np.sinh(2 * j * etap)
        xi = xi + a * s2 * ch
        eta = eta + a * c2 * sh
        p = p + 2 * j * a * c2 * ch
        q = q + 2 * j * a * s2 * sh

    easting = FALSE_EASTING + K0 * _A * eta
    northing = K0 * _A * xi
    if not northern:
        northing = northing + FALSE_NORTHING_SOUTH
    gamma = np.arctan2(tp * np.tan(lam), np.sqrt(1 + tp**2)) + np.arctan2(q, p)
    return easting, northing, gamma


def xy_to_latlon(easting, northing, zone_number: int, northern: bool = True):
    """Inverse of :func:`latlon_to_xy`; returns ``(lat_deg, lon_deg, convergence_rad)``."""
    x = np.asarray(easting, dtype=float)
    y = np.asarray(northing, dtype=float)
    if not northern:
        y = y - FALSE_NORTHING_SOUTH
    xi = y / (K0 * _A)
    eta = (x - FALSE_EASTING) / (K0 * _A)

    xip, etap = xi.copy(), eta.copy()
    p, q = np.ones_like(xi), np.zeros_like(xi)
    for j, b in enumerate(_BETA, start=1):
        c2, s2 = np.cos(2 * j * xi), np.sin(2 * j * xi)
        ch, sh = np.cosh(2 * j * eta), np.sinh(2 * j * eta)
        xip = xip - b * s2 * ch
        etap = etap - b * c2 * sh
        p = p - 2 * j * b * c2 * ch
        q = q + 2 * j * b * s2 * sh

    taup = np.sin(xip) / np.sqrt(np.sinh(etap) ** 2 + np.cos(xip) ** 2)
    lam = np.arctan2(np.sinh(etap), np.cos(xip))

    # Newton iteration for the geographic from the conformal latitude tangent.
    tau = taup.copy()
    for _ in range(8):
        sig = np.sinh(_E * np.arctanh(_E * tau / np.sqrt(1 + tau**2)))
        taui = tau * np.sqrt(1 + sig**2) - sig * np.sqrt(1 + tau**2)
        dtau = (taup - taui) / np.sqrt(1 + taui**2) * (1 + (1 - _E**2) * tau**2) / (
            (1 - _E**2) * np.sqrt(1 + tau**2)
        )
        tau = tau + dtau
        if np.all(np.abs(dtau) < 1e-14 * np.maximum(1.0, np.abs(tau))):
            break

    lat = np.degrees(np.arctan(tau))
    lon = np.degrees(lam) + central_meridian(zone_number)
    lon = (lon + 180.0) % 360.0 - 180.0
    gamma = np.arctan(np.tan(xip) * np.tanh(etap)) + np.arctan2(q, p)
    return lat, lon, gamma


def geo_to_utm(p: GeoPoint, zone_number: int | None = None) -> UtmPoint:
    """Convert a WGS84 point to UTM.

    The zone follows the longitude (with the Norway/Svalbard exceptions)
    unless ``zone_number`` forces one, as the HD map does for its
    single-zone planar frame.
    """
    letter = zone_letter_for(p.latitude)
    zone = zone_number if zone_number is not None else zone_number_for(p.latitude, p.longitude)
    e, n, _ = latlon_to_xy(p.latitude, p.longitude, zone, p.latitude >= 0)
    return UtmPoint(float(e), float(n), zone, letter)


def utm_to_geo(p: UtmPoint) -> GeoPoint:
    if not 1 <= p.zone_number <= 60:
        raise GeodesyError(f"zone number {p.zone_number} outside 1..60")
    if p.zone_letter.upper() not in _BANDS:
        raise GeodesyError(f"unknown latitude band {p.zone_letter!r}")
    if not (100000.0 <= p.easting <= 900000.0):
        raise GeodesyError(f"easting {p.easting} outside [100000, 900000]")
    if not (0.0 <= p.northing <= 10000000.0):
        raise GeodesyError(f"northing {p.northing} outside [0, 10000000]")
    lat, lon, _ = xy_to_latlon(p.easting, p.northing, p.zone_number, p.northern)
    return GeoPoint(float(lat), float(lon))


def grid_convergence(p: GeoPoint, zone_number: int | None = None) -> float:
    """Meridian convergence in radians (true north -> grid north)."""
    zone = zone_number if zone_number is not None else zone_number_for(p.latitude, p.longitude)
    return float(latlon_to_xy(p.latitude, p.longitude, zone, p.latitude >= 0)[2])
