"""Records exchanged between the simulator, the filters and the service."""

from __future__ import annotations

from dataclasses import dataclass

from .geodesy import GeoPoint


@dataclass(frozen=True)
class GpsMeasurement:
    """One GNSS fix of one participant."""

    timestamp_ms: int
    position: GeoPoint
    heading: float  # degrees clockwise from true north, [0, 360)
    speed: float  # m/s

    def __post_init__(self):
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"heading {self.heading} outside [0, 360)")
        if not self.speed >= 0.0:
            raise ValueError(f"speed {self.speed} must be non-negative")


@dataclass(frozen=True)
class CorrectedPosition:
    """Lane assignment and lane-snapped position for one participant.

    ``lane_id`` is ``None`` only for the unmatched fallback used by the
    evaluation when no lane was within the gate; ``confidence`` is 0 then.
    """

    user_id: str
    timestamp_ms: int
    lane_id: str | None
    position: GeoPoint
    confidence: float

    @classmethod
    def unmatched(cls, user_id: str, timestamp_ms: int, position: GeoPoint) -> "CorrectedPosition":
        return cls(user_id, timestamp_ms, None, position, 0.0)
