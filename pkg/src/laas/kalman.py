"""Constant-velocity Kalman filter on UTM easting/northing.

State is ``[easting, northing, v_east, v_north]`` in metres and m/s. The
measurement observes all four components: position from the fix, velocity
from speed and heading.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geodesy import latlon_to_xy
from .measurement import GpsMeasurement


class MeasurementOrderError(ValueError):
    """Measurement timestamp does not advance past the filter state."""


@dataclass(frozen=True)
class KalmanParams:
    sigma_pos_meas: float = 0.5
    sigma_vel_meas: float = 0.25
    sigma_pos_init: float = 10.0
    sigma_vel_init: float = 2.0
    accel_psd: float = 0.5  # white-noise acceleration spectral density, m^2/s^3

    def __post_init__(self):
        for name in ("sigma_pos_meas", "sigma_vel_meas", "sigma_pos_init", "sigma_vel_init"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.accel_psd < 0:
            raise ValueError("accel_psd must be non-negative")


@dataclass(frozen=True, eq=False)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray
    last_timestamp_ms: int

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[2:]


def measurement_vector(m: GpsMeasurement, zone_number: int, northern: bool = True) -> np.ndarray:
    """``[e, n, ve, vn]`` of a fix; heading is rotated from true to grid north."""
    e, n, gamma = latlon_to_xy(m.position.latitude, m.position.longitude, zone_number, northern)
    h = np.radians(m.heading) - float(gamma)
    return np.array([float(e), float(n), m.speed * np.sin(h), m.speed * np.cos(h)])


def kalman_init(m: GpsMeasurement, zone_number: int, northern: bool = True, params: KalmanParams = KalmanParams()) -> KalmanState:
    mean = measurement_vector(m, zone_number, northern)
    p, v = params.sigma_pos_init**2, params.sigma_vel_init**2
    return KalmanState(mean, np.diag([p, p, v, v]), m.timestamp_ms)


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, accel_psd: float) -> np.ndarray:
    """Exact discretisation of continuous white-noise acceleration."""
    q = accel_psd * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = q
    Q[np.ix_([1, 3], [1, 3])] = q
    return Q


def kalman_predict(s: KalmanState, dt: float, params: KalmanParams = KalmanParams()) -> KalmanState:
    """Propagate ``dt`` seconds. ``last_timestamp_ms`` keeps the last fix time."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    F = transition(dt)
    P = F @ s.covariance @ F.T + process_noise(dt, params.accel_psd)
    return replace(s, mean=F @ s.mean, covariance=(P + P.T) / 2)


def kalman_update(
    s: KalmanState,
    m: GpsMeasurement,
    zone_number: int,
    northern: bool = True,
    params: KalmanParams = KalmanParams(),
) -> KalmanState:
    if m.timestamp_ms <= s.last_timestamp_ms:
        raise MeasurementOrderError(f"timestamp {m.timestamp_ms} does not follow {s.last_timestamp_ms}")
    z = measurement_vector(m, zone_number, northern)
    rp, rv = params.sigma_pos_meas**2, params.sigma_vel_meas**2
    R = np.diag([rp, rp, rv, rv])
    P = s.covariance
    S = P + R
    K = np.linalg.solve(S.T, P.T).T  # P S^-1
    mean = s.mean + K @ (z - s.mean)
    I_K = np.eye(4) - K
    P = I_K @ P @ I_K.T + K @ R @ K.T  # Joseph form
    return KalmanState(mean, (P + P.T) / 2, m.timestamp_ms)


def kalman_step(
    s: KalmanState | None,
    m: GpsMeasurement,
    zone_number: int,
    northern: bool = True,
    params: KalmanParams = KalmanParams(),
) -> KalmanState:
    """Initialise on the first fix, otherwise predict to ``m`` and update."""
    if s is None:
        return kalman_init(m, zone_number, northern, params)
    if m.timestamp_ms <= s.last_timestamp_ms:
        raise MeasurementOrderError(f"timestamp {m.timestamp_ms} does not follow {s.last_timestamp_ms}")
    s = kalman_predict(s, (m.timestamp_ms - s.last_timestamp_ms) / 1000.0, params)
    return kalman_update(s, m, zone_number, northern, params)
