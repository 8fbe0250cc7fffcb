"""Edge service delivering lane-level corrections over publish/subscribe."""

from .bus import BusConnectionError, InMemoryBus, MqttBus
from .client import ReplayClient, ReplayError, ReplayResult
from .core import LdmCore, ServiceDescriptor, announce_service, laas_descriptor
from .server import ConfigError, LaasService, ServiceConfig

__all__ = [
    "BusConnectionError",
    "ConfigError",
    "InMemoryBus",
    "LaasService",
    "LdmCore",
    "MqttBus",
    "ReplayClient",
    "ReplayError",
    "ReplayResult",
    "ServiceConfig",
    "ServiceDescriptor",
    "announce_service",
    "laas_descriptor",
]
