"""Network face of the task graph: hub service, relay, client and query CLI."""

from .client import HubClient, format_address, parse_address
from .relay import Relay, RelayConfig, RelayThread
from .server import Hub, HubConfig, HubThread

__all__ = [
    "Hub", "HubClient", "HubConfig", "HubThread",
    "Relay", "RelayConfig", "RelayThread",
    "format_address", "parse_address",
]
