from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laas.geodesy import GeoPoint
from laas.kalman import (
    KalmanParams,
    KalmanState,
    MeasurementOrderError,
    kalman_init,
    kalman_predict,
    kalman_step,
    kalman_update,
)
from laas.measurement import GpsMeasurement

from conftest import E0, N0, ZONE, fix


def test_init_at_false_origin_heading_north():
    m = GpsMeasurement(0, GeoPoint(0.0, 3.0), 0.0, 5.0)
    s = kalman_init(m, 31)
    assert np.allclose(s.mean, [500000.0, 0.0, 0.0, 5.0], atol=1e-6)
    p = KalmanParams()
    assert np.allclose(np.diag(s.covariance), [p.sigma_pos_init**2] * 2 + [p.sigma_vel_init**2] * 2)
    assert s.last_timestamp_ms == 0


def test_init_heading_east():
    s = kalman_init(GpsMeasurement(0, GeoPoint(0.0, 3.0), 90.0, 3.0), 31)
    assert np.allclose(s.velocity, [3.0, 0.0], atol=1e-12)


def test_init_zero_speed():
    s = kalman_init(GpsMeasurement(0, GeoPoint(0.0, 3.0), 123.0, 0.0), 31)
    assert np.allclose(s.velocity, [0.0, 0.0])


def test_init_rotates_heading_into_grid():
    # off the central meridian the true heading differs from the grid bearing
    m = fix(0, E0, N0, heading=0.0, speed=10.0)
    s = kalman_init(m, ZONE)
    assert s.velocity[0] < 0  # grid north lies east of true north here
    assert np.hypot(*s.velocity) == pytest.approx(10.0)


def _state(mean, cov=None, t=0):
    return KalmanState(np.asarray(mean, float), np.eye(4) if cov is None else cov, t)


def test_predict_moves_position_only():
    s = kalman_predict(_state([0, 0, 1, 2]), 1.0)
    assert np.allclose(s.mean, [1, 2, 1, 2])


def test_predict_grows_covariance():
    s0 = _state([0, 0, 1, 2])
    s1 = kalman_predict(s0, 1.0)
    assert np.trace(s1.covariance) > np.trace(s0.covariance)


@pytest.mark.parametrize("dt", [0.0, -1.0])
def test_predict_rejects_nonpositive_dt(dt):
    with pytest.raises(ValueError):
        kalman_predict(_state([0, 0, 0, 0]), dt)


def test_two_half_steps_equal_one_full_step():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    s0 = _state(rng.normal(size=4), a @ a.T + np.eye(4))
    params = KalmanParams(accel_psd=0.7)
    half = kalman_predict(kalman_predict(s0, 0.5, params), 0.5, params)
    full = kalman_predict(s0, 1.0, params)

    # independent construction of the constant-velocity model
    def F(dt):
        return np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], float)

    def Q(dt):
        q = 0.7
        return q * np.array(
            [
                [dt**3 / 3, 0, dt**2 / 2, 0],
                [0, dt**3 / 3, 0, dt**2 / 2],
                [dt**2 / 2, 0, dt, 0],
                [0, dt**2 / 2, 0, dt],
            ]
        )

    P = s0.covariance
    oracle = F(1.0) @ P @ F(1.0).T + Q(1.0)
    assert np.allclose(full.covariance, oracle, atol=1e-12)
    assert np.allclose(half.mean, full.mean, atol=1e-12)
    assert np.allclose(half.covariance, full.covariance, atol=1e-12)


def test_update_ordering_error():
    s = kalman_init(fix(1000, E0, N0), ZONE)
    with pytest.raises(MeasurementOrderError):
        kalman_update(s, fix(1000, E0, N0), ZONE)
    with pytest.raises(MeasurementOrderError):
        kalman_step(s, fix(500, E0, N0), ZONE)


def test_uninformative_measurement_changes_nothing():
    prior = kalman_predict(kalman_init(fix(0, E0, N0, 90.0, 5.0), ZONE), 1.0)
    loose = KalmanParams(sigma_pos_meas=1e9, sigma_vel_meas=1e9)
    post = kalman_update(prior, fix(1000, E0 + 30, N0 - 20, 180.0, 2.0), ZONE, params=loose)
    assert np.allclose(post.mean, prior.mean, atol=1e-6)
    assert np.allclose(post.covariance, prior.covariance, atol=1e-6)


def test_exact_measurement_wins():
    prior = kalman_predict(kalman_init(fix(0, E0, N0, 90.0, 5.0), ZONE), 1.0)
    tight = KalmanParams(sigma_pos_meas=1e-6, sigma_vel_meas=1e-6)
    m = fix(1000, E0 + 30, N0 - 20, 90.0, 2.0)
    post = kalman_update(prior, m, ZONE, params=tight)
    z = kalman_init(m, ZONE).mean
    assert np.allclose(post.mean, z, atol=1e-6)


def test_update_shrinks_trace():
    s = kalman_predict(kalman_init(fix(0, E0, N0, 45.0, 4.0), ZONE), 1.0)
    post = kalman_update(s, fix(1000, E0 + 3, N0 + 3, 45.0, 4.0), ZONE)
    assert np.trace(post.covariance) <= np.trace(s.covariance)


def test_filter_beats_raw_on_stationary_target():
    rng = np.random.default_rng(20240601)
    params = KalmanParams(sigma_pos_meas=2.0)
    s, raw, filt = None, [], []
    for k in range(100):
        e, n = E0 + 2.0 * rng.standard_normal(), N0 + 2.0 * rng.standard_normal()
        s = kalman_step(s, fix(1000 * k, e, n), ZONE, params=params)
        raw.append(np.hypot(e - E0, n - N0))
        filt.append(np.hypot(*(s.position - [E0, N0])))
    rmse = lambda v: float(np.sqrt(np.mean(np.square(v))))
    assert rmse(filt) < rmse(raw)
    assert rmse(filt) < 0.6 * rmse(raw)


def _assert_spd(P):
    assert np.max(np.abs(P - P.T)) < 1e-9
    assert np.min(np.linalg.eigvalsh(P)) > 0


def test_covariance_stays_spd_over_ten_thousand_cycles():
    rng = np.random.default_rng(5)
    params = KalmanParams(sigma_pos_meas=0.3, sigma_vel_meas=0.1, accel_psd=0.05)
    s = kalman_init(fix(0, E0, N0, 10.0, 2.0), ZONE, params=params)
    t = 0
    for _ in range(10_000):
        t += int(rng.integers(1, 5000))
        e = E0 + rng.normal(0, 50)
        n = N0 + rng.normal(0, 50)
        s = kalman_step(s, fix(t, e, n, float(rng.uniform(0, 360)), float(rng.uniform(0, 30))), ZONE, params=params)
        _assert_spd(s.covariance)


@given(
    st.floats(0.01, 10.0),
    st.floats(0.01, 10.0),
    st.floats(0.0, 5.0),
    st.lists(st.floats(0.001, 30.0), min_size=1, max_size=30),
)
def test_covariance_spd_property(sp, sv, q, dts):
    params = KalmanParams(sigma_pos_meas=sp, sigma_vel_meas=sv, accel_psd=q)
    s = kalman_init(fix(0, E0, N0, 0.0, 1.0), ZONE, params=params)
    t = 0
    for dt in dts:
        t += max(1, int(dt * 1000))
        s = kalman_step(s, fix(t, E0 + dt, N0 - dt, 90.0, 1.0), ZONE, params=params)
        _assert_spd(s.covariance)


def test_params_validation():
    with pytest.raises(ValueError):
        KalmanParams(sigma_pos_meas=0.0)
    with pytest.raises(ValueError):
        KalmanParams(accel_psd=-1.0)


def test_measurement_validation():
    with pytest.raises(ValueError):
        GpsMeasurement(0, GeoPoint(0, 0), 360.0, 1.0)
    with pytest.raises(ValueError):
        GpsMeasurement(0, GeoPoint(0, 0), 0.0, -0.1)
