from .objects import (
    QPState,
    Access,
    WROpcode,
    WCOpcode,
    WCStatus,
    NodeAddress,
    Partner,
    SendRequest,
    ReceiveRequest,
    WorkCompletion,
    ProtectionDomain,
    MemoryRegion,
    CompletionQueue,
    SharedReceiveQueue,
    QPCaps,
    RetryConfig,
    InflightPacket,
    RequesterState,
    ResponderState,
    QueuePair,
    PSN_MODULUS,
)
from .device import Device, DeviceConfig, DeviceState
from .context import VerbsContext
from .state_machine import USER_EDGES, INTERNAL_EDGES, ALLOWED_EDGES, SENDING_STATES, set_state

__all__ = [
    "QPState",
    "Access",
    "WROpcode",
    "WCOpcode",
    "WCStatus",
    "NodeAddress",
    "Partner",
    "SendRequest",
    "ReceiveRequest",
    "WorkCompletion",
    "ProtectionDomain",
    "MemoryRegion",
    "CompletionQueue",
    "SharedReceiveQueue",
    "QPCaps",
    "RetryConfig",
    "InflightPacket",
    "RequesterState",
    "ResponderState",
    "QueuePair",
    "PSN_MODULUS",
    "Device",
    "DeviceConfig",
    "DeviceState",
    "VerbsContext",
    "USER_EDGES",
    "INTERNAL_EDGES",
    "ALLOWED_EDGES",
    "SENDING_STATES",
    "set_state",
]
