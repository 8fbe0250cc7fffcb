"""Loopback MQTT broker for tests and local demos (needs the ``broker`` extra)."""

from __future__ import annotations

import asyncio
import logging
import socket
import threading

log = logging.getLogger(__name__)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LoopbackBroker:
    """amqtt broker running on its own event loop thread."""

    def __init__(self, host: str = "127.0.0.1", port: int | None = None):
        self.host = host
        self.port = port or free_port()
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="mqtt-broker", daemon=True)
        self._broker = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "LoopbackBroker":
        try:
            from amqtt.broker import Broker
        except ImportError as exc:
            raise RuntimeError("the loopback broker needs amqtt (pip install 'artifact[broker]')") from exc
        config = {
            "listeners": {"default": {"type": "tcp", "bind": self.address}},
            "sys_interval": 0,
            "auth": {"allow-anonymous": True},
            "topic-check": {"enabled": False},
        }
        self._thread.start()

        async def boot():
            self._broker = Broker(config)
            await self._broker.start()

        asyncio.run_coroutine_threadsafe(boot(), self._loop).result(timeout=10)
        return self

    def stop(self) -> None:
        if self._broker is not None:
            try:
                asyncio.run_coroutine_threadsafe(self._broker.shutdown(), self._loop).result(timeout=10)
            except Exception:
                log.debug("broker shutdown raised", exc_info=True)
            self._broker = None
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=5)

    def __enter__(self) -> "LoopbackBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
