from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from laas.hdmap import HdMap, MapElement, lane_from_xy, project_onto_lane
from laas.service import messages
from laas.sim import (
    BLEND_S,
    CSV_HEADER,
    ErrorModelConfig,
    LaneSchedule,
    ScheduleError,
    apply_error_model,
    default_scenario,
    generate_ground_truth,
    read_streams,
    read_truth_csv,
    write_measurements,
    write_truth_csv,
)

from conftest import E0, N0, ZONE, straight_map


@pytest.fixture(scope="module")
def scenario():
    hd_map, schedules = default_scenario()
    return hd_map, schedules, generate_ground_truth(hd_map, schedules, 100.0, 1.0)


def test_straight_lane_kinematics():
    m = straight_map([0.0])
    truth = generate_ground_truth(m, [LaneSchedule("u", "cyclist", ((0, "0"),), (5.0,))], 10.0, 1.0)
    assert len(truth) == 10
    xy = np.array([m.to_xy(g.position) for g in truth])
    steps = np.hypot(*np.diff(xy, axis=0).T)
    assert np.allclose(steps, 5.0, atol=1e-6)
    assert [g.timestamp_ms for g in truth] == list(range(0, 10000, 1000))
    assert all(g.speed == 5.0 and g.lane_id == "0" for g in truth)


def test_default_scenario_shape(scenario):
    hd_map, schedules, truth = scenario
    assert len(hd_map.lanes) == 4
    assert len(truth) == 300
    assert sorted({g.user_id for g in truth}) == ["car", "cyclist1", "cyclist2"]
    widths = {lid: lane.width for lid, lane in hd_map.lanes.items()}
    assert widths == {"0": 3.5, "1": 3.5, "2": 2.5, "3": 2.0}
    c1 = next(s for s in schedules if s.user_id == "cyclist1")
    assert [t for t, _ in c1.entries] == [0, 20, 60]


def test_default_scenario_has_a_curve(scenario):
    hd_map = scenario[0]
    lane = hd_map.lane("0")
    bearings = np.degrees(lane._bearing)
    assert bearings.max() - bearings.min() == pytest.approx(90.0, abs=1.0)


def test_lane_flips_at_blend_midpoint():
    hd_map, schedules = default_scenario()
    c1 = [s for s in schedules if s.user_id == "cyclist1"]
    truth = generate_ground_truth(hd_map, c1, 25.0, 10.0)
    lane_at = {g.timestamp_ms: g.lane_id for g in truth}
    assert lane_at[20000] == "2"
    assert lane_at[21400] == "2"
    assert lane_at[21500] == "1"
    assert lane_at[23000] == "1"


def test_bias_only_displacement(scenario):
    hd_map, _, truth = scenario
    meas = apply_error_model(truth, ErrorModelConfig(-8.0, 8.0))
    for g, (uid, m) in zip(truth, meas):
        assert uid == g.user_id and m.timestamp_ms == g.timestamp_ms
        d = hd_map.to_xy(m.position) - hd_map.to_xy(g.position)
        assert np.allclose(d, [-8.0, 8.0], atol=1e-6)
        assert math.hypot(*d) == pytest.approx(11.3137, abs=1e-4)


def test_zero_config_is_identity(scenario):
    truth = scenario[2]
    meas = apply_error_model(truth, ErrorModelConfig())
    for g, (_, m) in zip(truth, meas):
        assert m.position == g.position
        assert m.heading == g.heading and m.speed == g.speed


def test_same_seed_same_output_other_seed_differs(scenario):
    truth = scenario[2]
    cfg = ErrorModelConfig(-8, 8, 1.0, 0.25, 0.05, seed=42)
    a = apply_error_model(truth, cfg)
    b = apply_error_model(truth, cfg)
    c = apply_error_model(truth, ErrorModelConfig(-8, 8, 1.0, 0.25, 0.05, seed=43))
    assert a == b
    assert a != c


def test_noise_commutes_with_subsampling(scenario):
    truth = scenario[2]
    cfg = ErrorModelConfig(-8, 8, 2.0, 0.5, 0.05, seed=9)
    k = 3
    full = apply_error_model(truth, cfg)
    assert full[::k] == apply_error_model(truth[::k], cfg)
    # a different rate samples the same instants with the same noise
    hd_map, schedules, _ = scenario
    sparse = generate_ground_truth(hd_map, schedules, 100.0, 0.5)
    noisy = {(u, m.timestamp_ms): m for u, m in full}
    for u, m in apply_error_model(sparse, cfg):
        assert noisy[(u, m.timestamp_ms)] == m


def test_noise_statistics_match_config():
    hd_map, schedules = default_scenario()
    truth = generate_ground_truth(hd_map, schedules, 100.0, 34.0)
    assert len(truth) >= 10_000
    cfg = ErrorModelConfig(-8.0, 8.0, 2.0, 0.5, 0.05, seed=123)
    meas = apply_error_model(truth, cfg)
    d = np.array([hd_map.to_xy(m.position) - hd_map.to_xy(g.position) for g, (_, m) in zip(truth, meas)])
    de, dn = d[:, 0] + 8.0, d[:, 1] - 8.0
    dv = np.array([m.speed - g.speed for g, (_, m) in zip(truth, meas)])
    dh = np.array([(m.heading - g.heading + 180.0) % 360.0 - 180.0 for g, (_, m) in zip(truth, meas)])
    for x, sigma in ((de, 2.0), (dn, 2.0), (dv, 0.5), (dh, 0.05)):
        assert abs(np.std(x) / sigma - 1) < 0.05
        assert abs(np.mean(x)) < 4 * sigma / math.sqrt(len(x))
    assert abs(np.corrcoef(de, dn)[0, 1]) < 0.05


def test_speed_noise_is_clamped():
    m = straight_map([0.0])
    truth = generate_ground_truth(m, [LaneSchedule("u", "car", ((0, "0"),), (0.0,), start_s=5.0)], 50.0, 1.0)
    meas = apply_error_model(truth, ErrorModelConfig(sigma_vel=3.0, seed=1))
    assert all(m.speed >= 0.0 for _, m in meas)
    assert any(m.speed == 0.0 for _, m in meas)


def _in_blend(schedules, g):
    sched = next(s for s in schedules if s.user_id == g.user_id)
    t = g.timestamp_ms / 1000.0
    return any(t0 <= t < t0 + BLEND_S for t0, _ in sched.entries[1:])


def test_headings_follow_lane_outside_blends(scenario):
    hd_map, schedules, truth = scenario
    checked = 0
    for g in truth:
        if _in_blend(schedules, g):
            continue
        xy = hd_map.to_xy(g.position)
        proj = project_onto_lane(xy, hd_map.lane(g.lane_id))
        grid = math.radians(g.heading) - hd_map.convergence(xy)
        diff = (grid - proj.lane_direction + math.pi) % (2 * math.pi) - math.pi
        assert abs(math.degrees(diff)) < 1.0
        checked += 1
    assert checked > 250


def test_truth_stays_on_its_lane_outside_blends(scenario):
    hd_map, schedules, truth = scenario
    for g in truth:
        if _in_blend(schedules, g):
            continue
        lane = hd_map.lane(g.lane_id)
        proj = project_onto_lane(hd_map.to_xy(g.position), lane)
        assert abs(proj.lateral_offset) <= lane.width / 2
        assert not proj.clamped


def test_adjacent_lane_changes_stay_within_half_width():
    m = straight_map([3.5, 0.0])
    sched = LaneSchedule("u", "car", ((0, "0"), (5, "1")), (5.0, 5.0), start_s=10.0)
    for g in generate_ground_truth(m, [sched], 15.0, 10.0):
        lane = m.lane(g.lane_id)
        assert abs(project_onto_lane(m.to_xy(g.position), lane).lateral_offset) <= lane.width / 2 + 1e-6


@pytest.mark.parametrize(
    "kwargs, pattern",
    [
        ({"entries": ((1, "0"),), "speed_profile": (5.0,)}, "t = 0"),
        ({"entries": ((0, "0"), (0, "1")), "speed_profile": (5.0, 5.0)}, "increase"),
        ({"entries": ((0, "0"),), "speed_profile": (5.0, 5.0)}, "one speed"),
        ({"entries": ((0, "0"),), "speed_profile": (-1.0,)}, "negative"),
    ],
)
def test_schedule_validation(kwargs, pattern):
    with pytest.raises(ScheduleError, match=pattern):
        LaneSchedule("u", "car", **kwargs)
    with pytest.raises(ScheduleError):
        LaneSchedule("u", "tram", ((0, "0"),), (1.0,))


def test_unknown_and_unreachable_lanes():
    m = straight_map([0.0])
    with pytest.raises(ScheduleError, match="unknown lane"):
        generate_ground_truth(m, [LaneSchedule("u", "car", ((0, "9"),), (1.0,))], 5.0)
    a = lane_from_xy("a", "car", 3.5, [[E0, N0], [E0 + 100, N0]], ZONE)
    b = lane_from_xy("b", "car", 3.5, [[E0 + 100, N0], [E0 + 200, N0]], ZONE)
    two = HdMap([MapElement("e1", [a], successor_ids=["e2"]), MapElement("e2", [b], predecessor_ids=["e1"])], "32U")
    with pytest.raises(ScheduleError, match="not reachable"):
        generate_ground_truth(two, [LaneSchedule("u", "car", ((0, "a"), (5, "b")), (1.0, 1.0))], 10.0)


def test_changes_closer_than_blend_rejected():
    m = straight_map([3.5, 0.0])
    sched = LaneSchedule("u", "car", ((0, "0"), (5, "1"), (6, "0")), (1.0,) * 3, start_s=10.0)
    with pytest.raises(ScheduleError, match="blend"):
        generate_ground_truth(m, [sched], 10.0)


def test_leaving_the_map_is_reported():
    m = straight_map([0.0], length=50.0)
    with pytest.raises(ScheduleError, match="leaves lane"):
        generate_ground_truth(m, [LaneSchedule("u", "car", ((0, "0"),), (10.0,))], 10.0)


def test_error_model_validation():
    with pytest.raises(ValueError):
        ErrorModelConfig(sigma_pos=-1.0)


def test_csv_and_stream_export(tmp_path, scenario):
    hd_map, _, truth = scenario
    meas = apply_error_model(truth, ErrorModelConfig(-8, 8, 1.0, 0.25, 0.05, seed=5))
    write_truth_csv(tmp_path / "truth.csv", truth)
    write_measurements(tmp_path, meas, truth)
    with open(tmp_path / "measurements.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 301
    back = read_truth_csv(tmp_path / "truth.csv")
    assert [(g.user_id, g.timestamp_ms, g.lane_id) for g in back] == [(g.user_id, g.timestamp_ms, g.lane_id) for g in truth]
    assert all(a.position.latitude == b.position.latitude for a, b in zip(back, truth))
    streams = read_streams(tmp_path)
    assert sorted(streams) == ["car", "cyclist1", "cyclist2"]
    assert streams["car"] == [m for u, m in meas if u == "car"]
    for line in (tmp_path / "streams" / "car.ndjson").read_text().splitlines():
        messages.validator("measurement").validate(json.loads(line))
