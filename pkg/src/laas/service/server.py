"""The positioning service: anonymous sessions, epoch scheduling, delivery."""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import secrets
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from ..bayes import BayesParams
from ..hdmap import HdMap, load_map
from ..kalman import KalmanParams
from ..measurement import GpsMeasurement
from ..pipeline import LanePositioner
from . import messages as msg
from .bus import Bus
from .core import announce_service, laas_descriptor

log = logging.getLogger(__name__)

BROKER_ENV = "LAAS_BROKER"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceConfig:
    broker: str = "127.0.0.1:1883"
    cluster: str = "local"
    epoch_period_ms: int = 1000
    session_timeout_ms: int = 5000
    session_rotation_period_s: float = 300.0
    grouping_radius_m: float = 100.0
    bayes: BayesParams = field(default_factory=BayesParams)
    kalman: KalmanParams | None = field(default_factory=KalmanParams)
    map_path: str | None = None  # None: bundled default map
    encrypt_payloads: bool = False
    version: str = "1"

    def __post_init__(self):
        if not self.epoch_period_ms > 0:
            raise ConfigError("epoch_period_ms must be positive")
        if not self.session_timeout_ms > self.epoch_period_ms:
            raise ConfigError("session_timeout_ms must exceed epoch_period_ms")
        if not self.session_rotation_period_s > 0:
            raise ConfigError("session_rotation_period_s must be positive")
        if not self.grouping_radius_m > 0:
            raise ConfigError("grouping_radius_m must be positive")
        if not self.cluster or any(c in self.cluster for c in "/+#"):
            raise ConfigError(f"bad cluster name {self.cluster!r}")

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> "ServiceConfig":
        d = dict(d)
        env = os.environ if env is None else env
        known = {"broker", "cluster", "epoch_period_ms", "session_timeout_ms", "session_rotation_period_s",
                 "grouping_radius_m", "bayes", "kalman", "map", "encrypt_payloads", "version"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in known - {"bayes", "kalman", "map"} if k in d}
        if env.get(BROKER_ENV):
            kw["broker"] = env[BROKER_ENV]
        if "map" in d:
            kw["map_path"] = d["map"]
        try:
            if "bayes" in d:
                kw["bayes"] = _bayes_from_dict(d["bayes"])
            if "kalman" in d:
                kw["kalman"] = _kalman_from_dict(d["kalman"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path, env: dict | None = None) -> "ServiceConfig":
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
        cfg = cls.from_dict(d, env)
        if cfg.map_path and not Path(cfg.map_path).is_absolute():
            cfg = replace(cfg, map_path=str((p.parent / cfg.map_path).resolve()))
        return cfg

    def load_map(self) -> HdMap:
        if self.map_path is None:
            from ..sim import load_default_map

            return load_default_map()
        p = Path(self.map_path)
        if not p.exists():
            raise ConfigError(f"map file not found: {p}")
        return load_map(p.read_bytes())


_BAYES_KEYS = {"sigma_angle_deg": "sigma_angle", "sigma_dist_m": "sigma_dist", "stay_bias": "stay_bias",
               "probability_floor": "probability_floor", "gate_radius_m": "gate_radius"}


def _bayes_from_dict(d: dict) -> BayesParams:
    unknown = set(d) - set(_BAYES_KEYS)
    if unknown:
        raise ConfigError(f"unknown bayes keys: {sorted(unknown)}")
    kw = {_BAYES_KEYS[k]: float(v) for k, v in d.items()}
    if "sigma_angle" in kw:
        kw["sigma_angle"] = math.radians(kw["sigma_angle"])
    return BayesParams(**kw)


def _kalman_from_dict(d: dict) -> KalmanParams | None:
    d = dict(d)
    if not d.pop("enabled", True):
        return None
    return KalmanParams(**{k: float(v) for k, v in d.items()})


@dataclass
class Session:
    session_id: str
    alias: str  # internal, stable across rotations, never published
    created_at: float
    last_seen_at: float
    rotation_deadline: float
    last_t_ms: int | None = None


def _reply_topic_of(payload: bytes):
    try:
        obj = json.loads(payload.decode("utf-8"), parse_constant=float)
    except (UnicodeDecodeError, ValueError, RecursionError):
        return None
    return obj.get("reply_to") if isinstance(obj, dict) else None


def _valid_reply_topic(topic: str, cluster: str) -> bool:
    if not isinstance(topic, str) or not topic or len(topic) > 256:
        return False
    if any(c in topic for c in "+#\x00") or topic.startswith("$"):
        return False
    return not topic.startswith(f"ldm/{cluster}/")


class LaasService:
    """Positioning service bound to a bus.

    Incoming fixes are buffered per session (latest wins); every epoch the
    buffer is snapshotted and run through one shared :class:`LanePositioner`.
    Clients are known only by random session ids, which rotate.
    """

    def __init__(
        self,
        bus: Bus,
        hd_map: HdMap,
        config: ServiceConfig = ServiceConfig(),
        clock: Callable[[], float] = time.monotonic,
        new_id: Callable[[], str] = lambda: secrets.token_hex(16),
    ):
        self.bus = bus
        self.config = config
        self.clock = clock
        self._new_id = new_id
        self.positioner = LanePositioner(hd_map, config.bayes, config.kalman, config.grouping_radius_m)
        self.descriptor = laas_descriptor(config.cluster, config.version)
        self.counters: Counter[str] = Counter()
        self.epoch_index = 0
        self._lock = threading.RLock()
        self._epoch_lock = threading.Lock()
        self._sessions: dict[str, Session] = {}
        self._grace: dict[str, tuple[Session, int]] = {}
        self._buffer: dict[str, tuple[Session, GpsMeasurement]] = {}
        self._forget: list[str] = []
        self._aliases = (f"p{i:08d}" for i in itertools.count())
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- wiring ----------------------------------------------------------

    def attach(self) -> None:
        """Subscribe to the request and input topics and announce."""
        c = self.config.cluster
        self.bus.subscribe(msg.request_topic(c), self._guard(self.handle_request))
        self.bus.subscribe(msg.input_wildcard(c), self._guard(self.handle_input))
        announce_service(self.bus, c, self.descriptor)

    def _guard(self, fn):
        def wrapped(topic: str, payload: bytes) -> None:
            try:
                fn(topic, payload)
            except Exception:
                self._count("handler_errors")
                log.exception("unexpected error handling %s", topic)

        return wrapped

    def _count(self, name: str) -> None:
        with self._lock:
            self.counters[name] += 1

    def _send(self, topic: str, obj: dict) -> None:
        self.bus.publish(topic, msg.encode(obj, self.config.encrypt_payloads))

    # -- sessions --------------------------------------------------------

    def handle_request(self, topic: str, payload: bytes) -> None:
        try:
            reply = msg.decode(payload, "session_request")["reply_to"]
            ok = True
        except msg.PayloadError:
            reply, ok = _reply_topic_of(payload), False
        if not _valid_reply_topic(reply, self.config.cluster):
            self._count("requests_dropped")
            return
        if not ok:
            self._count("requests_malformed")
            self._send(reply, {"error": "malformed session request"})
            return
        s = self.open_session()
        self._send(reply, self._session_info(s) | {"epoch_period_ms": self.config.epoch_period_ms})

    def open_session(self) -> Session:
        now = self.clock()
        with self._lock:
            sid = self._new_id()
            while sid in self._sessions or sid in self._grace:
                sid = self._new_id()
            s = Session(sid, next(self._aliases), now, now, now + self.config.session_rotation_period_s)
            self._sessions[sid] = s
            self.counters["sessions_opened"] += 1
        return s

    def _session_info(self, s: Session) -> dict:
        c = self.config.cluster
        return {"session_id": s.session_id, "input_topic": msg.input_topic(c, s.session_id), "output_topic": msg.output_topic(c, s.session_id)}

    def _expire(self, now: float) -> None:
        timeout = self.config.session_timeout_ms / 1000.0
        for sid, s in list(self._sessions.items()):
            if now - s.last_seen_at > timeout:
                del self._sessions[sid]
                self._buffer.pop(s.alias, None)
                self._forget.append(s.alias)
                self.counters["sessions_expired"] += 1
        for old, (s, _) in list(self._grace.items()):
            if s.session_id not in self._sessions:
                del self._grace[old]

    def _lookup(self, sid: str) -> Session | None:
        s = self._sessions.get(sid)
        if s is not None:
            return s
        entry = self._grace.get(sid)
        if entry is not None and self.epoch_index <= entry[1]:
            return entry[0]
        return None

    def rotate_sessions(self, now: float | None = None) -> list[str]:
        """Give sessions past their deadline a new id; returns the retired ids."""
        now = self.clock() if now is None else now
        retired = []
        with self._lock:
            for sid, s in list(self._sessions.items()):
                if now < s.rotation_deadline:
                    continue
                new = self._new_id()
                while new in self._sessions or new in self._grace:
                    new = self._new_id()
                del self._sessions[sid]
                s.session_id = new
                s.rotation_deadline = now + self.config.session_rotation_period_s
                self._sessions[new] = s
                self._grace[sid] = (s, self.epoch_index)  # the next epoch is the grace epoch
                self.counters["sessions_rotated"] += 1
                retired.append(sid)
        for sid in retired:
            s = self._grace[sid][0]
            self._send(msg.output_topic(self.config.cluster, sid), {"rotate_to": self._session_info(s)})
        return retired

    # -- data path -------------------------------------------------------

    def handle_input(self, topic: str, payload: bytes) -> None:
        sid = msg.session_from_input_topic(self.config.cluster, topic)
        if sid is None:
            self._count("unknown_session")
            return
        self.ingest_measurement(sid, payload)

    def ingest_measurement(self, session_id: str, payload: bytes) -> bool:
        now = self.clock()
        with self._lock:
            self._expire(now)
            s = self._lookup(session_id)
            if s is None:
                self.counters["unknown_session"] += 1
                return False
        try:
            m = msg.measurement_from_dict(msg.decode(payload, "measurement"))
        except (msg.PayloadError, ValueError) as exc:
            log.debug("schema drop: %s", exc)
            self._count("schema_violation")
            return False
        with self._lock:
            if s.session_id not in self._sessions:  # expired meanwhile
                self.counters["unknown_session"] += 1
                return False
            if s.last_t_ms is not None and m.timestamp_ms <= s.last_t_ms:
                self.counters["stale"] += 1
                return False
            s.last_t_ms = m.timestamp_ms
            s.last_seen_at = now
            self._buffer[s.alias] = (s, m)
            self.counters["accepted"] += 1
        return True

    def run_epoch(self, now: float | None = None) -> list[tuple[str, dict]]:
        """Process the buffered fixes once; returns what was published."""
        now = self.clock() if now is None else now
        with self._epoch_lock:
            with self._lock:
                self._expire(now)
                snapshot, self._buffer = self._buffer, {}
                forget, self._forget = self._forget, []
            if forget:
                self.positioner.forget(forget)
            published = []
            if snapshot:
                try:
                    result = self.positioner.step({alias: m for alias, (_, m) in snapshot.items()})
                except Exception:
                    log.exception("epoch %d failed", self.epoch_index)
                    self._count("epoch_errors")
                    result = None
                if result is not None:
                    for gid, err in result.failed_groups.items():
                        log.error("group %s failed: %s", gid, err)
                    self.counters["dropped_no_lane"] += len(result.dropped)
                    for c in result.corrections:
                        s = snapshot[c.user_id][0]
                        out = msg.output_topic(self.config.cluster, s.session_id)
                        body = msg.correction_to_dict(c)
                        self._send(out, body)
                        published.append((out, body))
            beat = {"epoch": self.epoch_index, "period_ms": self.config.epoch_period_ms}
            with self._lock:
                self.epoch_index += 1
                for old, (_, last) in list(self._grace.items()):
                    if self.epoch_index > last:
                        del self._grace[old]
            # clients may align their sends to this; it carries no client data
            self._send(msg.epoch_topic(self.config.cluster), beat)
            return published

    def tick(self) -> None:
        self.run_epoch()
        self.rotate_sessions()

    # -- scheduling ------------------------------------------------------

    def start(self) -> None:
        self.attach()
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="laas-epoch", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        period = self.config.epoch_period_ms / 1000.0
        nxt = time.monotonic() + period
        while not self._stop.wait(max(0.0, nxt - time.monotonic())):
            try:
                self.tick()
            except Exception:
                log.exception("epoch tick failed")
                self._count("epoch_errors")
            nxt += period
            if nxt < time.monotonic():
                nxt = time.monotonic() + period

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)
