"""Service announcement and discovery on the cluster's announcement topics."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass

from . import messages as msg
from .bus import Bus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServiceDescriptor:
    service_name: str
    version: str
    input_topic_template: str
    output_topic_template: str
    description: str
    request_topic: str = ""
    epoch_topic: str = ""

    def __post_init__(self):
        for t in (self.input_topic_template, self.output_topic_template):
            if t.count(msg.SESSION_PLACEHOLDER) != 1 or t.count("{") != 1:
                raise ValueError(f"topic template {t!r} needs exactly one {msg.SESSION_PLACEHOLDER}")

    def input_topic(self, session_id: str) -> str:
        return self.input_topic_template.replace(msg.SESSION_PLACEHOLDER, session_id)

    def output_topic(self, session_id: str) -> str:
        return self.output_topic_template.replace(msg.SESSION_PLACEHOLDER, session_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v or k not in ("request_topic", "epoch_topic")}

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceDescriptor":
        return cls(**d)


def laas_descriptor(cluster: str, version: str) -> ServiceDescriptor:
    return ServiceDescriptor(
        service_name=msg.SERVICE_NAME,
        version=version,
        input_topic_template=msg.input_topic(cluster, msg.SESSION_PLACEHOLDER),
        output_topic_template=msg.output_topic(cluster, msg.SESSION_PLACEHOLDER),
        description="Lane-level position correction for groups of nearby road users.",
        request_topic=msg.request_topic(cluster),
        epoch_topic=msg.epoch_topic(cluster),
    )


def announce_service(bus: Bus, cluster: str, descriptor: ServiceDescriptor) -> None:
    """Publish the descriptor retained so late subscribers receive it at once."""
    payload = json.dumps(descriptor.to_dict(), sort_keys=True).encode("utf-8")
    bus.publish(msg.announce_topic(cluster, descriptor.service_name), payload, qos=1, retain=True)


class LdmCore:
    """Caches every announcement seen on the cluster."""

    def __init__(self, bus: Bus, cluster: str):
        self.cluster = cluster
        self._lock = threading.Lock()
        self._services: dict[str, ServiceDescriptor] = {}
        bus.subscribe(msg.announce_topic(cluster, "+"), self._on_announce)

    def _on_announce(self, topic: str, payload: bytes) -> None:
        name = topic.rsplit("/", 1)[-1]
        if not payload:
            with self._lock:
                self._services.pop(name, None)
            return
        try:
            desc = ServiceDescriptor.from_dict(msg.decode(payload, "descriptor"))
        except (msg.PayloadError, TypeError, ValueError) as exc:
            log.warning("ignoring bad announcement on %s: %s", topic, exc)
            return
        with self._lock:
            self._services[name] = desc

    def list_services(self) -> list[ServiceDescriptor]:
        with self._lock:
            return [self._services[k] for k in sorted(self._services)]
