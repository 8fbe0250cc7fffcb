"""Shared helpers for the service tests and the acceptance suite."""

from __future__ import annotations

import base64
import json
import random
import secrets

import numpy as np

from laas.evaluation import run_offline, scenario_truth
from laas.service import messages as msg
from laas.service.broker import LoopbackBroker
from laas.service.bus import InMemoryBus, MqttBus
from laas.service.client import ReplayClient
from laas.service.server import LaasService, ServiceConfig
from laas.sim import ErrorModelConfig, apply_error_model

OUTBOUND_SCHEMAS = ("correction", "session_response", "rotation", "epoch", "descriptor")


def _unwrap(payload: bytes):
    obj = json.loads(payload)
    if isinstance(obj, dict) and "enc" in obj:
        obj = json.loads(base64.b64decode(obj["data"]))
    return obj


class Clock:
    def __init__(self, t: float = 1000.0):
        self.t = t

    def __call__(self) -> float:
        return self.t


class Recorder:
    """Every message seen on the bus, in order."""

    def __init__(self, bus):
        self.seen: list[tuple[str, bytes]] = []
        bus.subscribe("#", lambda t, p: self.seen.append((t, p)))

    def on(self, topic: str) -> list[dict]:
        return [_unwrap(p) for t, p in self.seen if t == topic]


def request_session(bus, cluster: str = "local") -> dict:
    reply = f"clients/{secrets.token_hex(6)}/reply"
    got = []
    bus.subscribe(reply, lambda t, p: got.append(msg.decode(p, "session_response")))
    bus.publish(msg.request_topic(cluster), msg.encode({"reply_to": reply}))
    assert len(got) == 1, got
    return got[0]


def audit_outbound(seen, cluster: str, client_strings) -> list[str]:
    """Problems with messages the service published; empty when anonymous."""
    problems = []
    inbound = (msg.request_topic(cluster),)
    for topic, payload in seen:
        if topic in inbound or topic.endswith("/in"):
            continue
        obj = _unwrap(payload)
        if not any(msg.validator(s).is_valid(obj) for s in OUTBOUND_SCHEMAS):
            problems.append(f"{topic}: no outbound schema matches {obj}")
        text = json.dumps(obj)
        for s in client_strings:
            if s in text:
                problems.append(f"{topic}: contains client value {s!r}")
    return problems


def fuzz_payloads(n: int, seed: int = 0) -> list[bytes]:
    """Random bytes mixed with near-miss JSON."""
    rnd = random.Random(seed)
    good = {"t_ms": 1000, "lat": 53.56, "lon": 9.98, "alt": 0.0, "heading_deg": 90.0, "speed_mps": 5.0}
    weird = [None, -1, 1e308, "x", [], {}, True, 2**70, -0.0, "NaN", 360.0, -90.5]
    out = []
    for i in range(n):
        kind = i % 4
        if kind == 0:
            out.append(rnd.randbytes(rnd.randint(0, 64)))
        elif kind == 1:
            d = dict(good)
            d[rnd.choice(list(d))] = rnd.choice(weird)
            if rnd.random() < 0.3:
                d.pop(rnd.choice(list(d)))
            out.append(json.dumps(d).encode())
        elif kind == 2:
            s = json.dumps(good)
            cut = rnd.randint(0, len(s))
            out.append((s[:cut] + rnd.choice(["", "}", "NaN", "Infinity", "\x00", "[[[["])).encode("utf-8", "surrogatepass"))
        else:
            out.append(rnd.choice([b"[" * 5000, b'{"enc":"base64","data":"!!"}', b'{"enc":"base64","data":"e30="}',
                                   b'{"reply_to":"' + rnd.randbytes(8).hex().encode() + b'"}', b"\xff\xfe", b"null"]))
    return out


def scenario_streams(seed: int = 4, sigma_pos: float = 1.0, sigma_vel: float = 0.25):
    hd_map, truth = scenario_truth()
    meas = apply_error_model(truth, ErrorModelConfig(-8.0, 8.0, sigma_pos, sigma_vel, 0.05, seed))
    streams: dict[str, list] = {}
    for uid, m in meas:
        streams.setdefault(uid, []).append(m)
    return hd_map, meas, streams


def max_offline_gap(online, offline, hd_map) -> tuple[float, int, int]:
    """Largest position gap in metres, and counts of online and offline lane fixes."""
    want = {(c.user_id, c.timestamp_ms): c for c in offline if c.lane_id is not None}
    got = {(c.user_id, c.timestamp_ms): c for c in online}
    gap = 0.0
    for key, c in want.items():
        if key not in got or got[key].lane_id != c.lane_id:
            return float("inf"), len(got), len(want)
        gap = max(gap, float(np.hypot(*(hd_map.to_xy(got[key].position) - hd_map.to_xy(c.position)))))
    return gap, len(got), len(want)


def loopback_replay(ticks: int | None = None, epoch_ms: int = 100):
    """Aligned replay through a real MQTT broker next to the offline run."""
    hd_map, meas, streams = scenario_streams()
    if ticks is not None:
        streams = {u: ms[:ticks] for u, ms in streams.items()}
        meas = [(u, m) for u, m in meas if m.timestamp_ms < ticks * 1000]
    cfg = ServiceConfig(epoch_period_ms=epoch_ms, session_timeout_ms=600_000)
    with LoopbackBroker() as broker:
        svc_bus, cli_bus = MqttBus(broker.address), MqttBus(broker.address)
        svc = LaasService(svc_bus, hd_map, cfg)
        svc.start()
        try:
            result = ReplayClient(cli_bus, timeout_s=10.0).replay(streams)
        finally:
            svc.stop()
            cli_bus.close()
            svc_bus.close()
    return max_offline_gap(result.corrections, run_offline(meas, hd_map, cfg.bayes, cfg.kalman), hd_map)


def realtime_latencies(ticks: int = 15, epoch_ms: int = 1000, clients: int = 3):
    hd_map, _, streams = scenario_streams()
    streams = {u: ms[:ticks] for u, ms in sorted(streams.items())[:clients]}
    cfg = ServiceConfig(epoch_period_ms=epoch_ms)
    with LoopbackBroker() as broker:
        svc_bus, cli_bus = MqttBus(broker.address), MqttBus(broker.address)
        svc = LaasService(svc_bus, hd_map, cfg)
        svc.start()
        try:
            result = ReplayClient(cli_bus).replay(streams, realtime=True, period_s=epoch_ms / 1000.0)
        finally:
            svc.stop()
            cli_bus.close()
            svc_bus.close()
    return result


def in_memory_service(hd_map, **cfg):
    bus = InMemoryBus()
    clock = Clock()
    rec = Recorder(bus)
    svc = LaasService(bus, hd_map, ServiceConfig(**cfg), clock=clock)
    svc.attach()
    return bus, clock, rec, svc
