from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional

from verbs import NodeAddress


class EventKind(Enum):
    # processing order within one tick
    MIGRATION_TRIGGER = 0
    WAKEUP = 1
    DELIVER = 2
    TIMER = 3


class Channel(Enum):
    ROCE = "roce"
    BULK = "bulk"


@dataclass
class NetEvent:
    at: int
    seq: int
    kind: EventKind
    # DELIVER
    src: Optional[NodeAddress] = None
    dest: Optional[NodeAddress] = None
    data: bytes = b""
    channel: Channel = Channel.ROCE
    tag: Optional[int] = None
    # TIMER
    qpn: Optional[int] = None
    # MIGRATION_TRIGGER / WAKEUP
    action: Optional[Callable[[int], Any]] = None
