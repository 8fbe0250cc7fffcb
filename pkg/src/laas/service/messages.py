"""Topic layout and JSON payloads of the positioning service."""

from __future__ import annotations

import base64
import binascii
import json
import math
from functools import lru_cache
from importlib import resources

import jsonschema

from ..geodesy import GeoPoint
from ..measurement import CorrectedPosition, GpsMeasurement
from ..sim import measurement_message as measurement_to_dict  # noqa: F401  (re-exported)

SERVICE_NAME = "laas"
SESSION_PLACEHOLDER = "{session_id}"


class PayloadError(ValueError):
    """Payload is not valid UTF-8 JSON or violates its schema."""


def announce_topic(cluster: str, service: str = SERVICE_NAME) -> str:
    return f"ldm/{cluster}/service/announce/{service}"


def request_topic(cluster: str) -> str:
    return f"ldm/{cluster}/{SERVICE_NAME}/session/request"


def input_topic(cluster: str, session_id: str) -> str:
    return f"ldm/{cluster}/{SERVICE_NAME}/{session_id}/in"


def output_topic(cluster: str, session_id: str) -> str:
    return f"ldm/{cluster}/{SERVICE_NAME}/{session_id}/out"


def epoch_topic(cluster: str) -> str:
    return f"ldm/{cluster}/{SERVICE_NAME}/epoch"


def input_wildcard(cluster: str) -> str:
    return f"ldm/{cluster}/{SERVICE_NAME}/+/in"


def session_from_input_topic(cluster: str, topic: str) -> str | None:
    prefix, suffix = f"ldm/{cluster}/{SERVICE_NAME}/", "/in"
    if not (topic.startswith(prefix) and topic.endswith(suffix)):
        return None
    sid = topic[len(prefix) : -len(suffix)]
    return sid if sid and "/" not in sid else None


@lru_cache(maxsize=None)
def validator(name: str) -> jsonschema.Draft202012Validator:
    text = resources.files("laas.schemas").joinpath(f"{name}.schema.json").read_text()
    return jsonschema.Draft202012Validator(json.loads(text))


def _reject_constant(token: str):
    raise PayloadError(f"non-finite number {token} not allowed")


def decode(payload: bytes, schema: str) -> dict:
    """Parse and validate a payload, unwrapping a base64 envelope if present."""
    try:
        obj = json.loads(payload.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise PayloadError(f"not UTF-8 JSON: {exc}") from None
    if isinstance(obj, dict) and "enc" in obj:
        if not validator("envelope").is_valid(obj):
            raise PayloadError("malformed envelope")
        try:
            inner = base64.b64decode(obj["data"], validate=True)
        except (binascii.Error, ValueError) as exc:
            raise PayloadError(f"bad base64: {exc}") from None
        return decode(inner, schema)
    err = jsonschema.exceptions.best_match(validator(schema).iter_errors(obj))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise PayloadError(f"{schema} schema violation at {where}: {err.message}")
    return obj


def encode(obj: dict, wrap: bool = False) -> bytes:
    raw = json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if not wrap:
        return raw
    env = {"enc": "base64", "data": base64.b64encode(raw).decode("ascii")}
    return json.dumps(env, separators=(",", ":")).encode("utf-8")


def measurement_from_dict(d: dict) -> GpsMeasurement:
    pos = GeoPoint(float(d["lat"]), float(d["lon"]), float(d.get("alt", 0.0)))
    return GpsMeasurement(int(d["t_ms"]), pos, float(d["heading_deg"]), float(d["speed_mps"]))


def correction_to_dict(c: CorrectedPosition) -> dict:
    # the user id is the service's internal alias and never leaves the process
    if c.lane_id is None or not math.isfinite(c.confidence):
        raise ValueError("only matched corrections are published")
    return {
        "t_ms": c.timestamp_ms,
        "lane_id": c.lane_id,
        "lat": c.position.latitude,
        "lon": c.position.longitude,
        "confidence": min(1.0, c.confidence),
    }


def correction_from_dict(d: dict, user_id: str) -> CorrectedPosition:
    return CorrectedPosition(user_id, int(d["t_ms"]), d["lane_id"], GeoPoint(d["lat"], d["lon"]), float(d["confidence"]))
