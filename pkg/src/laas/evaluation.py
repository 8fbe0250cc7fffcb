"""Offline evaluation: run the pipeline over simulated scenarios and score it."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .bayes import BayesParams
from .geodesy import latlon_to_xy
from .hdmap import HdMap
from .kalman import KalmanParams
from .measurement import CorrectedPosition, GpsMeasurement
from .pipeline import LanePositioner
from .sim import (
    DEFAULT_DURATION_S,
    DEFAULT_RATE_HZ,
    ErrorModelConfig,
    GroundTruthSample,
    apply_error_model,
    default_scenario,
    generate_ground_truth,
)

BIAS = (-8.0, 8.0)
SIGMA_HEADING = 0.05
TABLE_NOISE = ((0.5, 0.25), (1.0, 0.25), (2.0, 0.5), (4.0, 0.5))
TABLE_HEADER = ["kalman", "sigma_pos", "sigma_vel", "mean_err_x", "mean_err_y", "rmse_x", "rmse_y", "aed", "accuracy"]


class AlignmentError(ValueError):
    """Estimates and ground truth do not cover the same (user, timestamp) keys."""


@dataclass(frozen=True)
class ExperimentConfig:
    sigma_pos: float
    sigma_vel: float
    kalman_enabled: bool = True
    bias_east: float = BIAS[0]
    bias_north: float = BIAS[1]
    sigma_heading: float = SIGMA_HEADING
    n_runs: int = 20
    base_seed: int = 0
    bayes: BayesParams = field(default_factory=BayesParams)
    kalman: KalmanParams | None = None  # None: measurement noise matched to the error model

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")

    def kalman_params(self) -> KalmanParams | None:
        if not self.kalman_enabled:
            return None
        if self.kalman is not None:
            return self.kalman
        base = KalmanParams()
        return replace(
            base,
            sigma_pos_meas=self.sigma_pos or base.sigma_pos_meas,
            sigma_vel_meas=self.sigma_vel or base.sigma_vel_meas,
        )

    def error_model(self, seed: int) -> ErrorModelConfig:
        return ErrorModelConfig(self.bias_east, self.bias_north, self.sigma_pos, self.sigma_vel, self.sigma_heading, seed)


@dataclass(frozen=True)
class ExperimentResult:
    mean_err_x: float
    mean_err_y: float
    rmse_x: float
    rmse_y: float
    aed: float
    accuracy: float | None


def compute_metrics(
    estimates: Sequence[CorrectedPosition],
    truth: Sequence[GroundTruthSample],
    hd_map: HdMap,
    with_accuracy: bool = True,
) -> ExperimentResult:
    """Per-axis signed mean and RMSE in map UTM coordinates, AED and lane accuracy."""
    by_key = {(g.user_id, g.timestamp_ms): g for g in truth}
    keys = [(c.user_id, c.timestamp_ms) for c in estimates]
    if not keys:
        raise AlignmentError("no estimates")
    seen = set()
    for k in keys:
        if k in seen:
            raise AlignmentError(f"duplicate estimate for {k}")
        if k not in by_key:
            raise AlignmentError(f"estimate {k} has no ground truth")
        seen.add(k)
    if len(seen) != len(by_key):
        first = min(k for k in by_key if k not in seen)
        raise AlignmentError(f"ground truth {first} has no estimate")
    ref = [by_key[k] for k in keys]
    zone, north = hd_map.zone_number, hd_map.northern
    ee, en, _ = latlon_to_xy([c.position.latitude for c in estimates], [c.position.longitude for c in estimates], zone, north)
    te, tn, _ = latlon_to_xy([g.position.latitude for g in ref], [g.position.longitude for g in ref], zone, north)
    dx, dy = np.asarray(ee) - te, np.asarray(en) - tn
    accuracy = None
    if with_accuracy:
        accuracy = float(np.mean([c.lane_id == g.lane_id for c, g in zip(estimates, ref)]))
    return ExperimentResult(
        mean_err_x=float(dx.mean()),
        mean_err_y=float(dy.mean()),
        rmse_x=float(np.sqrt(np.mean(dx**2))),
        rmse_y=float(np.sqrt(np.mean(dy**2))),
        aed=float(np.mean(np.hypot(dx, dy))),
        accuracy=accuracy,
    )


def epochs(measurements: Iterable[tuple[str, GpsMeasurement]]) -> list[tuple[int, dict[str, GpsMeasurement]]]:
    """Group measurements into per-timestamp ticks, in time order."""
    ticks: dict[int, dict[str, GpsMeasurement]] = {}
    for uid, m in measurements:
        ticks.setdefault(m.timestamp_ms, {})[uid] = m
    return sorted(ticks.items())


def run_offline(
    measurements: Sequence[tuple[str, GpsMeasurement]],
    hd_map: HdMap,
    bayes: BayesParams = BayesParams(),
    kalman: KalmanParams | None = KalmanParams(),
) -> list[CorrectedPosition]:
    """One pipeline step per tick. Users without a lane this tick keep their raw fix."""
    positioner = LanePositioner(hd_map, bayes, kalman)
    out = []
    for t_ms, tick in epochs(measurements):
        got = {c.user_id: c for c in positioner.step(tick).corrections}
        for uid in sorted(tick):
            out.append(got.get(uid) or CorrectedPosition.unmatched(uid, t_ms, tick[uid].position))
    return out


def raw_estimates(measurements: Sequence[tuple[str, GpsMeasurement]]) -> list[CorrectedPosition]:
    return [CorrectedPosition.unmatched(uid, m.timestamp_ms, m.position) for uid, m in measurements]


_SCENARIO_CACHE: dict = {}


def scenario_truth() -> tuple[HdMap, list[GroundTruthSample]]:
    if "default" not in _SCENARIO_CACHE:
        hd_map, schedules = default_scenario()
        _SCENARIO_CACHE["default"] = (hd_map, generate_ground_truth(hd_map, schedules, DEFAULT_DURATION_S, DEFAULT_RATE_HZ))
    return _SCENARIO_CACHE["default"]


def run_single(cfg: ExperimentConfig, seed: int, corrected: bool = True) -> ExperimentResult:
    hd_map, truth = scenario_truth()
    meas = apply_error_model(truth, cfg.error_model(seed))
    if not corrected:
        return compute_metrics(raw_estimates(meas), truth, hd_map, with_accuracy=False)
    return compute_metrics(run_offline(meas, hd_map, cfg.bayes, cfg.kalman_params()), truth, hd_map)


def _run_index(args) -> ExperimentResult:
    cfg, i, corrected = args
    return run_single(cfg, cfg.base_seed + i, corrected)


def mean_result(results: Sequence[ExperimentResult]) -> ExperimentResult:
    vals = {}
    for f in fields(ExperimentResult):
        col = [getattr(r, f.name) for r in results]
        vals[f.name] = None if any(v is None for v in col) else float(np.mean(col))
    return ExperimentResult(**vals)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, corrected: bool = True) -> ExperimentResult:
    """Mean metrics over ``cfg.n_runs`` runs seeded ``base_seed + i``."""
    tasks = [(cfg, i, corrected) for i in range(cfg.n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_index, tasks))
    else:
        results = [_run_index(t) for t in tasks]
    return mean_result(results)


@dataclass(frozen=True)
class TableRow:
    kalman: str  # "raw", "off" or "on"
    sigma_pos: float
    sigma_vel: float
    result: ExperimentResult


def table_configs(runs: int = 20, base_seed: int = 0, bayes: BayesParams = BayesParams()) -> list[tuple[str, ExperimentConfig]]:
    """The uncorrected baseline followed by each noise level without and with Kalman."""
    lo_pos, lo_vel = TABLE_NOISE[0]
    rows = [("raw", ExperimentConfig(lo_pos, lo_vel, False, n_runs=runs, base_seed=base_seed, bayes=bayes))]
    for sp, sv in TABLE_NOISE:
        for on in (False, True):
            rows.append(("on" if on else "off", ExperimentConfig(sp, sv, on, n_runs=runs, base_seed=base_seed, bayes=bayes)))
    return rows


def run_table(runs: int = 20, base_seed: int = 0, jobs: int = 1, bayes: BayesParams = BayesParams()) -> list[TableRow]:
    rows = []
    for kind, cfg in table_configs(runs, base_seed, bayes):
        res = run_experiment(cfg, jobs, corrected=kind != "raw")
        rows.append(TableRow(kind, cfg.sigma_pos, cfg.sigma_vel, res))
    return rows


def table_csv(rows: Sequence[TableRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        x = r.result
        acc = "" if x.accuracy is None else repr(x.accuracy)
        w.writerow([r.kalman, repr(r.sigma_pos), repr(r.sigma_vel), repr(x.mean_err_x), repr(x.mean_err_y), repr(x.rmse_x), repr(x.rmse_y), repr(x.aed), acc])
    return buf.getvalue()


def table_text(rows: Sequence[TableRow]) -> str:
    head = f"{'kalman':>6} {'s_pos':>5} {'s_vel':>5} {'mean_x':>7} {'mean_y':>7} {'rmse_x':>7} {'rmse_y':>7} {'aed':>6} {'acc':>5}"
    lines = [head, "-" * len(head)]
    for r in rows:
        x = r.result
        acc = "  -" if x.accuracy is None else f"{x.accuracy:5.2f}"
        lines.append(
            f"{r.kalman:>6} {r.sigma_pos:5.2f} {r.sigma_vel:5.2f} {x.mean_err_x:7.2f} {x.mean_err_y:7.2f} "
            f"{x.rmse_x:7.2f} {x.rmse_y:7.2f} {x.aed:6.2f} {acc}"
        )
    return "\n".join(lines)
