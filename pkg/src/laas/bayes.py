"""Discrete Bayes filter over joint user-to-lane assignments.

A ``HypothesisSet`` covers the full Cartesian product of every user's
candidate lanes, so the distribution is stored as a dense log-probability
tensor with one axis per user (users sorted by id, lanes sorted by id on
each axis). Individual ``Hypothesis`` objects are materialised on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import product
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .hdmap import HdMap, candidate_lanes, project_onto_lane
from .kalman import KalmanState
from .measurement import CorrectedPosition

NORMALIZATION_TOLERANCE = 1e-6
_TIE_TOLERANCE = 1e-12


class NoCandidateLaneError(LookupError):
    def __init__(self, user_id: str):
        super().__init__(f"no lane within the gate for user {user_id!r}")
        self.user_id = user_id


class HypothesisContractError(ValueError):
    """Input distribution violates a precondition (empty or unnormalized)."""


@dataclass(frozen=True)
class BayesParams:
    sigma_angle: float = math.radians(5.0)
    sigma_dist: float = 2.0
    stay_bias: float = 0.5
    probability_floor: float = 1e-6
    gate_radius: float = 18.0

    def __post_init__(self):
        for name in ("sigma_angle", "sigma_dist", "probability_floor", "gate_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.stay_bias < 1:
            raise ValueError("stay_bias must lie in (0, 1)")
        if not self.probability_floor < 1:
            raise ValueError("probability_floor must be below 1")


@dataclass(frozen=True)
class Hypothesis:
    assignment: Mapping[str, str]
    log_probability: float

    @property
    def probability(self) -> float:
        return math.exp(self.log_probability)


@dataclass(eq=False)
class HypothesisSet:
    group_id: str
    user_ids: tuple[str, ...]
    lane_ids: tuple[tuple[str, ...], ...]
    log_p: np.ndarray
    epoch_timestamp_ms: int = 0

    def __post_init__(self):
        if list(self.user_ids) != sorted(self.user_ids) or len(set(self.user_ids)) != len(self.user_ids):
            raise ValueError("user ids must be unique and sorted")
        if self.log_p.shape != tuple(len(l) for l in self.lane_ids):
            raise ValueError(f"tensor shape {self.log_p.shape} does not match lane lists")

    def __len__(self) -> int:
        return int(self.log_p.size)

    @property
    def probabilities(self) -> np.ndarray:
        """Flat probabilities in the order of :attr:`hypotheses`."""
        return np.exp(self.log_p).ravel()

    @property
    def hypotheses(self) -> list[Hypothesis]:
        flat = self.log_p.ravel()
        return [
            Hypothesis(dict(zip(self.user_ids, lanes)), float(flat[k]))
            for k, lanes in enumerate(product(*self.lane_ids))
        ]

    def probability_of(self, assignment: Mapping[str, str]) -> float:
        idx = tuple(self.lane_ids[u].index(assignment[uid]) for u, uid in enumerate(self.user_ids))
        return float(np.exp(self.log_p[idx]))

    def lane_marginal(self, user_id: str) -> dict[str, float]:
        u = self.user_ids.index(user_id)
        axes = tuple(a for a in range(self.log_p.ndim) if a != u)
        m = np.exp(logsumexp(self.log_p, axis=axes)) if axes else np.exp(self.log_p)
        return dict(zip(self.lane_ids[u], m.tolist()))

    def marginalize(self, keep: Iterable[str]) -> "HypothesisSet":
        """Distribution over the users in ``keep`` (others summed out)."""
        keep = sorted(set(keep) & set(self.user_ids))
        axes = tuple(a for a, uid in enumerate(self.user_ids) if uid not in keep)
        log_p = logsumexp(self.log_p, axis=axes) if axes else self.log_p.copy()
        lanes = tuple(self.lane_ids[self.user_ids.index(uid)] for uid in keep)
        return HypothesisSet(self.group_id, tuple(keep), lanes, np.asarray(log_p), self.epoch_timestamp_ms)

    def relabel(self, mapping: Mapping[str, str]) -> "HypothesisSet":
        """Rename users, reordering axes so ids stay sorted."""
        new_ids = [mapping.get(u, u) for u in self.user_ids]
        order = sorted(range(len(new_ids)), key=lambda a: new_ids[a])
        return HypothesisSet(
            self.group_id,
            tuple(new_ids[a] for a in order),
            tuple(self.lane_ids[a] for a in order),
            np.transpose(self.log_p, order).copy(),
            self.epoch_timestamp_ms,
        )

    def same_structure(self, other: "HypothesisSet") -> bool:
        return self.user_ids == other.user_ids and self.lane_ids == other.lane_ids


def _normalize_and_floor(log_p: np.ndarray, floor: float) -> np.ndarray:
    p = np.exp(log_p - logsumexp(log_p))
    # floor must stay below 1/|H| or it would flatten the distribution
    floor = min(floor, 0.5 / p.size)
    p = np.maximum(p, floor)
    return np.log(p / p.sum())


def _check_normalized(h: HypothesisSet) -> None:
    if h.log_p.size == 0:
        raise HypothesisContractError("empty hypothesis set")
    total = float(np.exp(logsumexp(h.log_p)))
    if not abs(total - 1.0) <= NORMALIZATION_TOLERANCE:
        raise HypothesisContractError(f"hypothesis probabilities sum to {total}, expected 1")


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


def enumerate_hypotheses(
    group: Sequence[tuple[str, KalmanState]],
    hd_map: HdMap,
    params: BayesParams,
    group_id: str = "",
    epoch_timestamp_ms: int = 0,
) -> HypothesisSet:
    """Uniform distribution over every combination of gated candidate lanes."""
    if not group:
        raise HypothesisContractError("empty group")
    users = sorted(group, key=lambda g: g[0])
    lane_ids = []
    for uid, state in users:
        cands = candidate_lanes(hd_map.utm(state.position), hd_map, params.gate_radius)
        if not cands:
            raise NoCandidateLaneError(uid)
        lane_ids.append(tuple(sorted(lane.lane_id for lane, _ in cands)))
    shape = tuple(len(l) for l in lane_ids)
    n = int(np.prod(shape))
    return HypothesisSet(
        group_id or users[0][0],
        tuple(uid for uid, _ in users),
        tuple(lane_ids),
        np.full(shape, -math.log(n)),
        epoch_timestamp_ms,
    )


def lane_transition_matrix(
    lane_ids: Sequence[str],
    position: np.ndarray,
    heading_deg: float,
    hd_map: HdMap,
    params: BayesParams,
) -> np.ndarray:
    """Row-stochastic lane transition matrix for one user.

    Each lane keeps ``stay_bias + (1 - stay_bias) * exp(-dtheta^2 / 2 sigma^2)``
    of its mass, where ``dtheta`` is the heading relative to the lane
    direction at the user's projection. The rest moves to the adjacent lane
    on the side the heading points to, if that lane is a candidate.
    """
    k = len(lane_ids)
    T = np.eye(k)
    heading_grid = math.radians(heading_deg) - hd_map.convergence(position)
    index = {lid: a for a, lid in enumerate(lane_ids)}
    for a, lid in enumerate(lane_ids):
        lane = hd_map.lane(lid)
        proj = project_onto_lane(position, lane)
        dtheta = _wrap(heading_grid - proj.lane_direction)
        if dtheta == 0.0:
            continue
        target = hd_map.adjacent_lane(lane, 1 if dtheta > 0 else -1)
        if target is None or target.lane_id not in index:
            continue
        w_stay = params.stay_bias + (1 - params.stay_bias) * math.exp(-(dtheta**2) / (2 * params.sigma_angle**2))
        T[a, a] = w_stay
        T[a, index[target.lane_id]] += 1.0 - w_stay
    return T


def bayes_predict(
    h: HypothesisSet,
    group: Sequence[tuple[str, KalmanState, float]],
    hd_map: HdMap,
    params: BayesParams,
) -> HypothesisSet:
    _check_normalized(h)
    by_user = {uid: (state, heading) for uid, state, heading in group}
    if set(by_user) != set(h.user_ids):
        raise HypothesisContractError("group users do not match the hypothesis set")
    p = np.exp(h.log_p)
    for axis, uid in enumerate(h.user_ids):
        state, heading = by_user[uid]
        T = lane_transition_matrix(h.lane_ids[axis], state.position, heading, hd_map, params)
        p = np.moveaxis(np.tensordot(p, T, axes=([axis], [0])), -1, axis)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    return replace(h, log_p=_normalize_and_floor(log_p, params.probability_floor))


def pair_log_likelihood(
    h: HypothesisSet,
    positions: Mapping[str, np.ndarray],
    hd_map: HdMap,
    sigma_dist: float,
) -> np.ndarray:
    """Log-likelihood tensor of the relative-distance comparison (unnormalized)."""
    n = len(h.user_ids)
    ll = np.zeros(h.log_p.shape)
    if n < 2:
        return ll
    snapped = []
    for axis, uid in enumerate(h.user_ids):
        pos = positions[uid]
        snapped.append(
            np.array([project_onto_lane(pos, hd_map.lane(lid)).projected_point.xy for lid in h.lane_ids[axis]])
        )
    for i in range(n):
        for j in range(i + 1, n):
            d_meas = float(np.linalg.norm(positions[h.user_ids[i]] - positions[h.user_ids[j]]))
            diff = snapped[i][:, None, :] - snapped[j][None, :, :]
            d_hyp = np.hypot(diff[..., 0], diff[..., 1])
            term = -((d_hyp - d_meas) ** 2) / (2 * sigma_dist**2)
            shape = [1] * n
            shape[i], shape[j] = term.shape
            ll = ll + term.reshape(shape)
    return ll


def bayes_update(
    h: HypothesisSet,
    group: Sequence[tuple[str, KalmanState]],
    hd_map: HdMap,
    params: BayesParams,
) -> HypothesisSet:
    _check_normalized(h)
    positions = {uid: np.asarray(state.position, dtype=float) for uid, state in group}
    if set(positions) != set(h.user_ids):
        raise HypothesisContractError("group users do not match the hypothesis set")
    if len(h.user_ids) < 2:
        return replace(h, log_p=h.log_p.copy())
    ll = pair_log_likelihood(h, positions, hd_map, params.sigma_dist)
    return replace(h, log_p=_normalize_and_floor(h.log_p + ll, params.probability_floor))


def select_hypothesis(h: HypothesisSet) -> Hypothesis:
    """Most probable hypothesis; exact ties go to the lexicographically
    smallest lane sequence (users in id order)."""
    if h.log_p.size == 0:
        raise HypothesisContractError("empty hypothesis set")
    best = float(h.log_p.max())
    tied = np.argwhere(h.log_p >= best - _TIE_TOLERANCE)
    lanes = min(tuple(h.lane_ids[a][i] for a, i in enumerate(idx)) for idx in tied)
    idx = tuple(h.lane_ids[a].index(l) for a, l in enumerate(lanes))
    return Hypothesis(dict(zip(h.user_ids, lanes)), float(h.log_p[idx]))


def corrected_positions(
    winner: Hypothesis,
    group: Sequence[tuple[str, KalmanState]],
    hd_map: HdMap,
) -> list[CorrectedPosition]:
    """Snap each user laterally onto the lane the winning hypothesis assigns."""
    out = []
    confidence = min(1.0, math.exp(winner.log_probability))
    for uid, state in group:
        proj = project_onto_lane(state.position, hd_map.lane(winner.assignment[uid]))
        out.append(
            CorrectedPosition(
                user_id=uid,
                timestamp_ms=state.last_timestamp_ms,
                lane_id=proj.lane_id,
                position=hd_map.to_geo(proj.projected_point.xy),
                confidence=confidence,
            )
        )
    return out


def combine_priors(sets: Iterable[HypothesisSet], user_ids: Iterable[str], group_id: str = "") -> HypothesisSet | None:
    """Joint prior for ``user_ids`` built from earlier (possibly different) groups.

    Each earlier set contributes its marginal over the users it shares with
    the new group; the contributions are independent so they multiply.
    Returns ``None`` when no earlier set covers any of the users.
    """
    wanted = set(user_ids)
    parts = [s.marginalize(wanted) for s in sets if wanted & set(s.user_ids)]
    if not parts:
        return None
    if len(parts) == 1:
        part = parts[0]
        return replace(part, group_id=group_id or part.group_id)
    users, lanes, log_p = [], [], np.zeros(())
    for part in parts:
        users.extend(part.user_ids)
        lanes.extend(part.lane_ids)
        log_p = np.add.outer(log_p, part.log_p)
    order = sorted(range(len(users)), key=lambda a: users[a])
    return HypothesisSet(
        group_id or users[order[0]],
        tuple(users[a] for a in order),
        tuple(lanes[a] for a in order),
        np.transpose(log_p, order).copy(),
        max(p.epoch_timestamp_ms for p in parts),
    )


def align_prior(prior: HypothesisSet, target: HypothesisSet, params: BayesParams) -> HypothesisSet:
    """Carry ``prior`` mass onto the structure of ``target``.

    Assignments present in both keep their prior mass; users absent from the
    prior are uniform; assignments involving a lane the prior did not know
    start at the probability floor. The result is normalized.
    """
    prior = prior.marginalize(target.user_ids)
    if not prior.user_ids:
        return replace(target, log_p=target.log_p.copy())
    p = np.exp(prior.log_p - logsumexp(prior.log_p))
    # pad every axis with a zero slot so unknown lanes index into it
    p = np.pad(p, [(0, 1)] * p.ndim)
    index = []
    for uid, lanes in zip(target.user_ids, target.lane_ids):
        if uid in prior.user_ids:
            old = prior.lane_ids[prior.user_ids.index(uid)]
            index.append(np.array([old.index(l) if l in old else len(old) for l in lanes]))
    carried = p[np.ix_(*index)]
    # broadcast in users that are new to this group with a uniform factor
    shape = [len(l) if uid in prior.user_ids else 1 for uid, l in zip(target.user_ids, target.lane_ids)]
    carried = carried.reshape(shape) * np.ones(target.log_p.shape)
    if carried.sum() <= 0:
        return replace(target, log_p=target.log_p.copy())
    with np.errstate(divide="ignore"):
        log_p = np.log(carried)
    return replace(target, log_p=_normalize_and_floor(log_p, params.probability_floor))
