"""Publish/subscribe transports: an in-process bus and an MQTT client."""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable, Protocol

import paho.mqtt.client as mqtt
from paho.mqtt.client import topic_matches_sub

log = logging.getLogger(__name__)

Handler = Callable[[str, bytes], None]

BACKOFF_START_S = 0.5
BACKOFF_CAP_S = 30.0


class BusConnectionError(ConnectionError):
    pass


class Bus(Protocol):
    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> None: ...

    def subscribe(self, pattern: str, handler: Handler) -> None: ...

    def close(self) -> None: ...


def _dispatch(handler: Handler, topic: str, payload: bytes) -> None:
    try:
        handler(topic, payload)
    except Exception:  # a subscriber bug must not take the transport down
        log.exception("handler for %s raised", topic)


class InMemoryBus:
    """Synchronous broker stand-in with retained messages and MQTT wildcards."""

    def __init__(self):
        self._lock = threading.RLock()
        self._subs: list[tuple[str, Handler]] = []
        self._retained: dict[str, bytes] = {}

    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> None:
        with self._lock:
            if retain:
                if payload:
                    self._retained[topic] = payload
                else:
                    self._retained.pop(topic, None)
            targets = [h for p, h in self._subs if topic_matches_sub(p, topic)]
        for h in targets:
            _dispatch(h, topic, payload)

    def subscribe(self, pattern: str, handler: Handler) -> None:
        with self._lock:
            self._subs.append((pattern, handler))
            retained = [(t, p) for t, p in self._retained.items() if topic_matches_sub(pattern, t)]
        for t, p in retained:
            _dispatch(handler, t, p)

    def close(self) -> None:
        with self._lock:
            self._subs.clear()


def parse_broker(address: str) -> tuple[str, int]:
    """``host[:port]`` with an optional ``mqtt://`` prefix; port defaults to 1883."""
    addr = address.strip()
    if addr.startswith("mqtt://"):
        addr = addr[len("mqtt://") :]
    host, _, port = addr.rpartition(":") if ":" in addr else (addr, "", "1883")
    if not host:
        raise ValueError(f"bad broker address {address!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ValueError(f"bad broker port in {address!r}") from None


class MqttBus:
    """paho-mqtt client that re-subscribes after reconnects.

    The initial connection is retried with exponential backoff capped at
    30 s; ``max_attempts`` of None retries forever.
    """

    def __init__(
        self,
        address: str,
        client_id: str = "",
        max_attempts: int | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.host, self.port = parse_broker(address)
        self._subs: list[tuple[str, Handler]] = []
        self._lock = threading.Lock()
        self._connected = threading.Event()
        self._client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=client_id)
        self._client.on_connect = self._on_connect
        self._client.on_disconnect = self._on_disconnect
        self._client.on_message = self._on_message
        self._client.on_subscribe = self._on_subscribe
        self._pending: dict[int, threading.Event] = {}
        self._client.reconnect_delay_set(min_delay=1, max_delay=int(BACKOFF_CAP_S))
        self._connect(max_attempts, sleep)
        self._client.loop_start()
        if not self._connected.wait(10):
            self._client.loop_stop()
            raise BusConnectionError(f"no CONNACK from {self.host}:{self.port}")

    def _connect(self, max_attempts, sleep) -> None:
        delay, attempt = BACKOFF_START_S, 0
        while True:
            attempt += 1
            try:
                self._client.connect(self.host, self.port, keepalive=30)
                return
            except OSError as exc:
                if max_attempts is not None and attempt >= max_attempts:
                    raise BusConnectionError(f"cannot reach broker {self.host}:{self.port}: {exc}") from exc
                log.warning("broker %s:%d unreachable (%s), retry in %.1f s", self.host, self.port, exc, delay)
                sleep(delay)
                delay = min(delay * 2, BACKOFF_CAP_S)

    def _on_connect(self, client, userdata, flags, reason_code, properties=None):
        if reason_code.is_failure:
            log.error("broker refused connection: %s", reason_code)
            return
        with self._lock:
            patterns = sorted({p for p, _ in self._subs})
        for p in patterns:
            client.subscribe(p, qos=1)
        self._connected.set()

    def _on_disconnect(self, client, userdata, flags, reason_code, properties=None):
        self._connected.clear()
        if reason_code != 0:
            log.warning("disconnected from broker: %s", reason_code)

    def _on_message(self, client, userdata, msg):
        with self._lock:
            targets = [h for p, h in self._subs if topic_matches_sub(p, msg.topic)]
        for h in targets:
            _dispatch(h, msg.topic, msg.payload)

    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> None:
        info = self._client.publish(topic, payload, qos=qos, retain=retain)
        if info.rc != mqtt.MQTT_ERR_SUCCESS:
            log.warning("publish to %s failed: %s", topic, mqtt.error_string(info.rc))

    def _on_subscribe(self, client, userdata, mid, reason_codes, properties=None):
        with self._lock:
            ev = self._pending.pop(mid, None)
        if ev is not None:
            ev.set()

    def subscribe(self, pattern: str, handler: Handler) -> None:
        """Register ``handler``; waits briefly for the broker's SUBACK."""
        ev = None
        with self._lock:
            known = any(p == pattern for p, _ in self._subs)
            self._subs.append((pattern, handler))
            if not known:
                rc, mid = self._client.subscribe(pattern, qos=1)
                if rc == mqtt.MQTT_ERR_SUCCESS:
                    ev = self._pending[mid] = threading.Event()
        if ev is not None and not ev.wait(5):
            log.warning("no SUBACK for %s", pattern)

    def close(self) -> None:
        self._client.disconnect()
        self._client.loop_stop()
