"""Per-epoch orchestration: Kalman smoothing, grouping, lane filtering.

``process_epoch`` handles one group. ``LanePositioner`` keeps the Kalman
states and the last hypothesis sets of all participants and is shared by
the offline evaluation and the edge service, so both produce identical
corrections for identical inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.cluster.hierarchy import linkage, to_tree
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .bayes import (
    BayesParams,
    Hypothesis,
    HypothesisSet,
    NoCandidateLaneError,
    align_prior,
    bayes_predict,
    bayes_update,
    combine_priors,
    corrected_positions,
    enumerate_hypotheses,
    select_hypothesis,
)
from .hdmap import HdMap, project_onto_lane
from .kalman import KalmanParams, KalmanState, kalman_init, kalman_step
from .measurement import CorrectedPosition, GpsMeasurement

log = logging.getLogger(__name__)

MAX_GROUP_SIZE = 8


def filter_measurement(
    state: KalmanState | None,
    m: GpsMeasurement,
    hd_map: HdMap,
    kalman: KalmanParams | None,
) -> KalmanState:
    """Kalman step, or a fresh state built from the raw fix when ``kalman`` is None.

    A filter that diverges (non-finite state) is restarted from the fix; a
    fix that cannot be placed in the map's zone raises ValueError.
    """
    zone, north = hd_map.zone_number, hd_map.northern
    if kalman is None:
        s = kalman_init(m, zone, north)
    else:
        s = kalman_step(state, m, zone, north, kalman)
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.covariance))):
            log.warning("filter diverged at t=%d, restarting", m.timestamp_ms)
            s = kalman_init(m, zone, north, kalman)
    if not np.all(np.isfinite(s.mean)):
        raise ValueError(f"fix at ({m.position.latitude}, {m.position.longitude}) not representable in zone {hd_map.utm_zone}")
    return s


def _singleton_winner(h: HypothesisSet, state: KalmanState, hd_map: HdMap) -> Hypothesis:
    # lone user: among equally probable lanes take the nearest one
    best = float(h.log_p.max())
    tied = [lid for lid, lp in zip(h.lane_ids[0], h.log_p) if lp >= best - 1e-12]
    lane_id = min(tied, key=lambda lid: (abs(project_onto_lane(state.position, hd_map.lane(lid)).lateral_offset), lid))
    return Hypothesis({h.user_ids[0]: lane_id}, float(h.log_p[h.lane_ids[0].index(lane_id)]))


def process_epoch(
    measurements: Sequence[tuple[str, GpsMeasurement]],
    prior: HypothesisSet | None,
    states: Mapping[str, KalmanState],
    hd_map: HdMap,
    params: BayesParams,
    kalman: KalmanParams | None = KalmanParams(),
    group_id: str = "",
) -> tuple[HypothesisSet, list[CorrectedPosition], dict[str, KalmanState]]:
    """Run one filter cycle for one group of users.

    ``prior`` may describe a different user set or different candidate
    lanes; surviving assignments keep their mass. Raises
    :class:`NoCandidateLaneError` for a user without any lane in the gate;
    the caller drops that user and retries.
    """
    new_states = {uid: filter_measurement(states.get(uid), m, hd_map, kalman) for uid, m in measurements}
    headings = {uid: m.heading for uid, m in measurements}
    t_ms = max(m.timestamp_ms for _, m in measurements)
    group = sorted(new_states.items())

    h = enumerate_hypotheses(group, hd_map, params, group_id, t_ms)
    if prior is not None:
        h = replace(h, log_p=prior.log_p.copy()) if prior.same_structure(h) else align_prior(prior, h, params)
    h = bayes_predict(h, [(uid, s, headings[uid]) for uid, s in group], hd_map, params)
    h = bayes_update(h, group, hd_map, params)

    winner = _singleton_winner(h, group[0][1], hd_map) if len(group) == 1 else select_hypothesis(h)
    return h, corrected_positions(winner, group, hd_map), new_states


def group_users(positions: Mapping[str, np.ndarray], radius: float, max_size: int = MAX_GROUP_SIZE) -> list[list[str]]:
    """Single-linkage clusters of users closer than ``radius``.

    Clusters larger than ``max_size`` are split at their longest
    spanning-tree edge until every part fits.
    """
    ids = sorted(positions)
    if not ids:
        return []
    xy = np.array([positions[u] for u in ids], dtype=float)
    pairs = np.array(sorted(cKDTree(xy).query_pairs(radius)), dtype=int).reshape(-1, 2)
    n = len(ids)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)

    groups = []
    for lab in sorted(set(labels.tolist()), key=lambda l: int(np.flatnonzero(labels == l)[0])):
        groups.extend(_split(np.flatnonzero(labels == lab), xy, max_size))
    return sorted([sorted(ids[i] for i in g) for g in groups])


def _split(members: np.ndarray, xy: np.ndarray, max_size: int) -> list[np.ndarray]:
    if len(members) <= max_size:
        return [members]
    # the top merge of a single-linkage tree is the longest spanning-tree edge
    root = to_tree(linkage(xy[members], method="single"))
    parts = []
    for child in (root.get_left(), root.get_right()):
        parts.extend(_split(members[np.sort(child.pre_order())], xy, max_size))
    return parts


@dataclass
class EpochResult:
    corrections: list[CorrectedPosition] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    failed_groups: dict[str, str] = field(default_factory=dict)
    groups: list[list[str]] = field(default_factory=list)


class LanePositioner:
    """Stateful multi-user driver around :func:`process_epoch`.

    Feed it the latest fix of every active user once per epoch via
    :meth:`step`. Users are grouped on their filtered positions; each group
    is filtered independently and a failure in one group is logged and
    does not affect the others.
    """

    def __init__(
        self,
        hd_map: HdMap,
        bayes: BayesParams = BayesParams(),
        kalman: KalmanParams | None = KalmanParams(),
        grouping_radius_m: float = 100.0,
        max_group_size: int = MAX_GROUP_SIZE,
    ):
        self.hd_map = hd_map
        self.bayes = bayes
        self.kalman = kalman
        self.grouping_radius_m = grouping_radius_m
        self.max_group_size = max_group_size
        self.states: dict[str, KalmanState] = {}
        self.hypotheses: list[HypothesisSet] = []

    def step(self, measurements: Mapping[str, GpsMeasurement]) -> EpochResult:
        result = EpochResult()
        if not measurements:
            return result
        filtered = {}
        for uid, m in measurements.items():
            try:
                filtered[uid] = filter_measurement(self.states.get(uid), m, self.hd_map, self.kalman)
            except ValueError as exc:
                log.warning("dropping fix of %s: %s", uid, exc)
        result.groups = group_users({u: s.position for u, s in filtered.items()}, self.grouping_radius_m, self.max_group_size)

        new_sets = []
        for members in result.groups:
            gid = members[0]
            try:
                h, corrections, states = self._run_group(members, measurements, gid, result)
            except Exception as exc:  # isolate groups from each other
                log.exception("group %s failed", gid)
                result.failed_groups[gid] = repr(exc)
                continue
            self.states.update(states)
            if h is not None:
                new_sets.append(h)
                result.corrections.extend(corrections)
        for uid in result.dropped:
            self.states[uid] = filtered[uid]
        self.hypotheses = new_sets
        return result

    def _run_group(self, members, measurements, gid, result):
        members = list(members)
        while members:
            prior = combine_priors(self.hypotheses, members, gid)
            try:
                return process_epoch(
                    [(u, measurements[u]) for u in members],
                    prior,
                    self.states,
                    self.hd_map,
                    self.bayes,
                    self.kalman,
                    gid,
                )
            except NoCandidateLaneError as exc:
                members.remove(exc.user_id)
                result.dropped.append(exc.user_id)
        return None, [], {}

    def forget(self, user_ids) -> None:
        """Drop all state of users that left (expired sessions)."""
        gone = set(user_ids)
        for uid in gone:
            self.states.pop(uid, None)
        kept = []
        for h in self.hypotheses:
            rest = [u for u in h.user_ids if u not in gone]
            if rest:
                kept.append(h.marginalize(rest) if len(rest) < len(h.user_ids) else h)
        self.hypotheses = kept

    def rename(self, mapping: Mapping[str, str]) -> None:
        """Move state to new user ids (session id rotation)."""
        for old, new in mapping.items():
            if old in self.states:
                self.states[new] = self.states.pop(old)
        self.hypotheses = [h.relabel(mapping) if set(mapping) & set(h.user_ids) else h for h in self.hypotheses]
