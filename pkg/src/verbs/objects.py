from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag
from typing import Any, Deque, Dict, List, Optional, TYPE_CHECKING

if TYPE_CHECKING:
    from .context import VerbsContext

PSN_MODULUS = 1 << 24
QPN_MASK = 0xFFFFFF
LINK_LOCAL_PREFIX = bytes.fromhex("fe80000000000000")


class QPState(IntEnum):
    RESET = 0
    INIT = 1
    RTR = 2
    RTS = 3
    SQD = 4
    SQE = 5
    ERROR = 6
    STOPPED = 7
    PAUSED = 8


class Access(IntFlag):
    NONE = 0
    LOCAL_WRITE = 1
    REMOTE_WRITE = 2


class WROpcode(IntEnum):
    SEND = 0
    RDMA_WRITE = 1


class WCOpcode(IntEnum):
    SEND = 0
    RDMA_WRITE = 1
    RECV = 2


class WCStatus(IntEnum):
    SUCCESS = 0
    LOC_LEN_ERR = 1
    LOC_PROT_ERR = 2
    REM_ACCESS_ERR = 3
    RETRY_EXC_ERR = 4
    WR_FLUSH_ERR = 5


@dataclass(frozen=True)
class NodeAddress:
    """Routable GID, local LID and vendor GUID of one simulated node.

    The GID is the link-local prefix followed by the GUID, so an address can
    be rebuilt from a GID alone (a RESUME only carries the GID).
    """

    gid: bytes
    lid: int
    guid: int

    @classmethod
    def from_guid(cls, guid: int) -> "NodeAddress":
        guid &= (1 << 64) - 1
        return cls(gid=LINK_LOCAL_PREFIX + guid.to_bytes(8, "big"), lid=(guid % 0xBFFF) + 1, guid=guid)

    @classmethod
    def from_gid(cls, gid: bytes) -> "NodeAddress":
        if len(gid) != 16:
            raise ValueError(f"GID must be 16 bytes, got {len(gid)}")
        guid = int.from_bytes(gid[8:], "big")
        return cls(gid=bytes(gid), lid=(guid % 0xBFFF) + 1, guid=guid)

    def __str__(self) -> str:
        return self.gid.hex()


@dataclass(frozen=True)
class Partner:
    address: NodeAddress
    qpn: int


@dataclass
class SendRequest:
    wr_id: int
    opcode: WROpcode
    lkey: int
    addr: int
    length: int
    rkey: int = 0
    raddr: int = 0
    posted_at: int = 0
    # PSN of the LAST/ONLY packet, known once the SR is fully segmented
    last_psn: Optional[int] = None


@dataclass
class ReceiveRequest:
    wr_id: int
    lkey: int
    addr: int
    max_len: int


@dataclass
class WorkCompletion:
    wr_id: int
    status: WCStatus
    opcode: WCOpcode
    byte_len: int
    qpn: int
    posted_at: int = 0
    completed_at: int = 0


@dataclass
class ProtectionDomain:
    handle: int


@dataclass
class MemoryRegion:
    mrn: int
    lkey: int
    rkey: int
    base: int
    length: int
    access: Access
    pd_handle: int
    buffer: bytearray

    def contains(self, addr: int, length: int) -> bool:
        return addr >= self.base and addr + length <= self.base + self.length

    def read(self, addr: int, length: int) -> bytes:
        off = addr - self.base
        return bytes(self.buffer[off:off + length])

    def write(self, addr: int, data: bytes) -> None:
        off = addr - self.base
        self.buffer[off:off + len(data)] = data

    def snapshot(self) -> Dict[str, Any]:
        return {
            "mrn": self.mrn,
            "lkey": self.lkey,
            "rkey": self.rkey,
            "base": self.base,
            "length": self.length,
            "access": int(self.access),
            "pd": self.pd_handle,
            "buffer": bytes(self.buffer),
        }


class CompletionQueue:
    """Bounded FIFO of work completions. head/tail count polled/pushed entries."""

    def __init__(self, handle: int, depth: int):
        self.handle = handle
        self.depth = depth
        self.ring: Deque[WorkCompletion] = deque()
        self.head = 0
        self.tail = 0
        self.overrun = False

    def push(self, wc: WorkCompletion) -> bool:
        if len(self.ring) >= self.depth:
            self.overrun = True
            return False
        self.ring.append(wc)
        self.tail += 1
        return True

    def poll(self, max_entries: int) -> List[WorkCompletion]:
        out: List[WorkCompletion] = []
        while self.ring and len(out) < max_entries:
            out.append(self.ring.popleft())
            self.head += 1
        return out

    def snapshot(self) -> Dict[str, Any]:
        return {
            "handle": self.handle,
            "depth": self.depth,
            "head": self.head,
            "tail": self.tail,
            "overrun": self.overrun,
            "ring": [vars(wc).copy() for wc in self.ring],
        }


class SharedReceiveQueue:
    def __init__(self, handle: int, pd_handle: int, depth: int):
        self.handle = handle
        self.pd_handle = pd_handle
        self.depth = depth
        self.ring: Deque[ReceiveRequest] = deque()

    def snapshot(self) -> Dict[str, Any]:
        return {
            "handle": self.handle,
            "pd": self.pd_handle,
            "depth": self.depth,
            "ring": [vars(rr).copy() for rr in self.ring],
        }


@dataclass
class QPCaps:
    max_send_wr: int = 128
    max_recv_wr: int = 128


@dataclass
class RetryConfig:
    timeout_ticks: int = 32
    # None retries forever
    max_retries: Optional[int] = 7


@dataclass
class InflightPacket:
    """A sent, unacknowledged packet kept in wire form for go-back-N resends."""

    psn: int
    wire: bytes
    sent_at: int = 0


@dataclass
class RequesterState:
    next_psn: int = 0
    first_unacked_psn: int = 0
    inflight: List[InflightPacket] = field(default_factory=list)
    cur_sr_offset: int = 0
    # fully segmented SRs waiting for the ack of their last PSN
    awaiting: Deque[SendRequest] = field(default_factory=deque)
    # transmit cursor rewound by a NAK or a resume reply
    resend_psn: Optional[int] = None
    retries_used: int = 0
    backoff: int = 1
    sqd_drain: int = 0
    resume_pending: bool = False
    timer_deadline: Optional[int] = None
    resume_deadline: Optional[int] = None


@dataclass
class ResponderState:
    expected_psn: int = 0
    cur_rr_offset: int = 0
    msn: int = 0
    cur_rr: Optional[ReceiveRequest] = None
    nak_latched: bool = False
    sink: bool = False
    write_active: bool = False
    write_va: int = 0
    write_rkey: int = 0
    write_remaining: int = 0


class QueuePair:
    def __init__(
        self,
        ctx: "VerbsContext",
        qpn: int,
        pd_handle: int,
        send_cq: int,
        recv_cq: int,
        srq_handle: Optional[int],
        caps: QPCaps,
    ):
        self.ctx = ctx
        self.qpn = qpn
        self.pd_handle = pd_handle
        self.send_cq = send_cq
        self.recv_cq = recv_cq
        self.srq_handle = srq_handle
        self.caps = caps
        self._state = QPState.RESET
        self.partner: Optional[Partner] = None
        self.mtu = 1024
        self.sq: Deque[SendRequest] = deque()
        self.rq: Deque[ReceiveRequest] = deque()
        self.req = RequesterState()
        self.rsp = ResponderState()
        self.retry = RetryConfig()
        self.transitions: List[tuple] = []

    @property
    def state(self) -> QPState:
        return self._state

    @property
    def outstanding_sends(self) -> int:
        return len(self.sq) + len(self.req.awaiting)

    def reset_queues(self) -> None:
        self.sq.clear()
        self.rq.clear()
        self.req = RequesterState()
        self.rsp = ResponderState()

    def snapshot(self) -> Dict[str, Any]:
        """Observable state, without timers (deadlines are re-armed on restore)."""
        req = self.req
        rsp = self.rsp
        return {
            "qpn": self.qpn,
            "pd": self.pd_handle,
            "state": self._state.name,
            "partner": (self.partner.address.gid, self.partner.qpn) if self.partner else None,
            "mtu": self.mtu,
            "send_cq": self.send_cq,
            "recv_cq": self.recv_cq,
            "srq": self.srq_handle,
            "caps": (self.caps.max_send_wr, self.caps.max_recv_wr),
            "retry": (self.retry.timeout_ticks, self.retry.max_retries),
            "sq": [vars(sr).copy() for sr in self.sq],
            "rq": [vars(rr).copy() for rr in self.rq],
            "req": {
                "next_psn": req.next_psn,
                "first_unacked_psn": req.first_unacked_psn,
                "inflight": [(p.psn, p.wire) for p in req.inflight],
                "cur_sr_offset": req.cur_sr_offset,
                "awaiting": [vars(sr).copy() for sr in req.awaiting],
                "resend_psn": req.resend_psn,
                "retries_used": req.retries_used,
                "backoff": req.backoff,
                "sqd_drain": req.sqd_drain,
                "resume_pending": req.resume_pending,
            },
            "rsp": {
                "expected_psn": rsp.expected_psn,
                "cur_rr_offset": rsp.cur_rr_offset,
                "msn": rsp.msn,
                "cur_rr": vars(rsp.cur_rr).copy() if rsp.cur_rr else None,
                "nak_latched": rsp.nak_latched,
                "sink": rsp.sink,
                "write": (rsp.write_active, rsp.write_va, rsp.write_rkey, rsp.write_remaining),
            },
        }

    def __repr__(self) -> str:
        return f"QueuePair(qpn={self.qpn:#x}, state={self._state.name})"
