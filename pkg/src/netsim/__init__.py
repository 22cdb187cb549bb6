from .config import NetConfig
from .events import Channel, EventKind, NetEvent
from .trace import Trace, TraceRecord
from .network import CompletionRecord, Network, SimReport, XFER

__all__ = [
    "NetConfig",
    "Channel",
    "EventKind",
    "NetEvent",
    "Trace",
    "TraceRecord",
    "CompletionRecord",
    "Network",
    "SimReport",
    "XFER",
]
