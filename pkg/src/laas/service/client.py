"""Replay recorded fix streams against a running service as anonymous clients."""

from __future__ import annotations

import logging
import queue
import secrets
import time
from dataclasses import dataclass, field

import numpy as np

from ..measurement import CorrectedPosition, GpsMeasurement
from . import messages as msg
from .bus import Bus

log = logging.getLogger(__name__)


class ReplayError(RuntimeError):
    pass


@dataclass
class _Handle:
    user: str
    session_id: str
    input_topic: str
    output_topic: str


@dataclass
class ReplayResult:
    corrections: list[CorrectedPosition] = field(default_factory=list)
    latencies_s: list[float] = field(default_factory=list)
    rotations: int = 0

    def latency_percentile(self, q: float) -> float:
        if not self.latencies_s:
            return float("nan")
        return float(np.percentile(self.latencies_s, q))


class ReplayClient:
    """Opens one session per user, publishes fixes and collects corrections.

    In aligned mode each tick is sent right after an epoch heartbeat, so it
    falls into exactly one service epoch; this reproduces the offline run.
    In realtime mode ticks are sent every ``period_s`` regardless.
    """

    def __init__(self, bus: Bus, cluster: str = "local", wrap: bool = False, timeout_s: float = 10.0):
        self.bus = bus
        self.cluster = cluster
        self.wrap = wrap
        self.timeout_s = timeout_s
        self._inbox: queue.Queue = queue.Queue()
        self._handles: dict[str, _Handle] = {}
        self._by_output: dict[str, str] = {}
        self.epoch_period_ms: int | None = None

    def _enqueue(self, topic: str, payload: bytes) -> None:
        self._inbox.put((topic, payload, time.monotonic()))

    def open_sessions(self, users: list[str]) -> None:
        """Sequentially, in the given order."""
        for user in users:
            reply = f"clients/{secrets.token_hex(8)}/reply"
            self.bus.subscribe(reply, self._enqueue)
            self.bus.publish(msg.request_topic(self.cluster), msg.encode({"reply_to": reply}, self.wrap), qos=1)
            deadline = time.monotonic() + self.timeout_s
            while True:
                topic, payload, _ = self._next(deadline, f"session response for {user}")
                if topic != reply:
                    continue
                resp = msg.decode(payload, "session_response")
                if "error" in resp:
                    raise ReplayError(f"session request refused: {resp['error']}")
                break
            self.epoch_period_ms = resp["epoch_period_ms"]
            h = _Handle(user, resp["session_id"], resp["input_topic"], resp["output_topic"])
            self._handles[user] = h
            self._by_output[h.output_topic] = user
            self.bus.subscribe(h.output_topic, self._enqueue)

    def _next(self, deadline: float, what: str):
        try:
            return self._inbox.get(timeout=max(0.0, deadline - time.monotonic()))
        except queue.Empty:
            raise ReplayError(f"timed out waiting for {what}") from None

    _beat_topic: str | None = None

    def _handle(self, topic: str, payload: bytes, t_recv: float, result: ReplayResult, sent: dict) -> CorrectedPosition | None:
        user = self._by_output.get(topic)
        if user is None:
            return None
        try:
            obj = msg.decode(payload, "correction")
        except msg.PayloadError:
            obj = msg.decode(payload, "rotation")["rotate_to"]
            h = self._handles[user]
            h.session_id, h.input_topic, h.output_topic = obj["session_id"], obj["input_topic"], obj["output_topic"]
            self._by_output[h.output_topic] = user
            self.bus.subscribe(h.output_topic, self._enqueue)
            result.rotations += 1
            return None
        c = msg.correction_from_dict(obj, user)
        result.corrections.append(c)
        t_sent = sent.get((user, c.timestamp_ms))
        if t_sent is not None:
            result.latencies_s.append(t_recv - t_sent)
        return c

    def _publish_tick(self, tick: dict[str, GpsMeasurement], sent: dict) -> None:
        for user in sorted(tick):
            m = tick[user]
            body = msg.encode(msg.measurement_to_dict(m), self.wrap)
            sent[(user, m.timestamp_ms)] = time.monotonic()
            self.bus.publish(self._handles[user].input_topic, body)

    def replay(self, streams: dict[str, list[GpsMeasurement]], realtime: bool = False, period_s: float = 1.0) -> ReplayResult:
        if not self._handles:
            self.open_sessions(sorted(streams))
        ticks: dict[int, dict[str, GpsMeasurement]] = {}
        for user, ms in streams.items():
            for m in ms:
                ticks.setdefault(m.timestamp_ms, {})[user] = m
        order = sorted(ticks)
        result, sent = ReplayResult(), {}
        if realtime:
            self._realtime(order, ticks, period_s, result, sent)
        else:
            self._aligned(order, ticks, result, sent)
        result.corrections.sort(key=lambda c: (c.timestamp_ms, c.user_id))
        return result

    def _await_beat(self, result, sent, want: set | None = None, t: int | None = None) -> None:
        """Consume messages until the next epoch heartbeat."""
        deadline = time.monotonic() + self.timeout_s
        while True:
            topic, payload, t_recv = self._next(deadline, "epoch heartbeat")
            if topic == self._beat_topic:
                return
            c = self._handle(topic, payload, t_recv, result, sent)
            if c is not None and want is not None and c.timestamp_ms == t:
                want.discard(c.user_id)

    def _aligned(self, order, ticks, result, sent) -> None:
        epoch_s = (self.epoch_period_ms or 1000) / 1000.0
        self._beat_topic = msg.epoch_topic(self.cluster)
        self.bus.subscribe(self._beat_topic, self._enqueue)
        self._await_beat(result, sent)
        for t in order:
            # sent right after an epoch, so the whole tick lands in the next one
            self._publish_tick(ticks[t], sent)
            want = set(ticks[t])
            self._await_beat(result, sent, want, t)
            # the heartbeat may overtake corrections on other topics
            settle = time.monotonic() + epoch_s / 4
            while want:
                try:
                    topic, payload, t_recv = self._inbox.get(timeout=max(0.0, settle - time.monotonic()))
                except queue.Empty:
                    break  # users without a lane get no correction
                c = self._handle(topic, payload, t_recv, result, sent)
                if c is not None and c.timestamp_ms == t:
                    want.discard(c.user_id)
            if want:
                log.debug("tick %d: no correction for %s", t, sorted(want))

    def _realtime(self, order, ticks, period_s, result, sent) -> None:
        start = time.monotonic()
        for i, t in enumerate(order):
            due = start + i * period_s
            self._drain(due, result, sent)
            self._publish_tick(ticks[t], sent)
        self._drain(time.monotonic() + 2 * max(period_s, (self.epoch_period_ms or 1000) / 1000.0), result, sent)

    def _drain(self, until: float, result, sent) -> None:
        while True:
            left = until - time.monotonic()
            if left <= 0:
                return
            try:
                topic, payload, t_recv = self._inbox.get(timeout=left)
            except queue.Empty:
                return
            self._handle(topic, payload, t_recv, result, sent)
