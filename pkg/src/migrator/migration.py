from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from common.errors import ArgumentError
from common.utils import gid_hex, strip_empty_values
from verbs import NodeAddress


class Transfer(Enum):
    IN_BAND = "in_band"
    OUT_OF_BAND = "out_of_band"


class MigrationStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass(frozen=True)
class MigrationSpec:
    ctx_id: int
    src: NodeAddress
    dst: NodeAddress
    trigger_tick: int
    transfer: Transfer = Transfer.IN_BAND

    def __post_init__(self):
        if self.src.gid == self.dst.gid:
            raise ArgumentError("migration source and destination must differ")
        if self.trigger_tick < 0:
            raise ArgumentError("trigger_tick must not be negative")


@dataclass
class MigrationReport:
    """Phase timings of one migration, in simulated ticks.

    checkpoint, transfer and restore are contiguous:
    started_at + checkpoint_ticks + transfer_ticks + restore_ticks == finished_at.
    """

    spec: MigrationSpec
    status: MigrationStatus = MigrationStatus.PENDING
    error: Optional[str] = None
    started_at: Optional[int] = None
    finished_at: Optional[int] = None
    checkpoint_ticks: int = 0
    transfer_ticks: int = 0
    restore_ticks: int = 0
    image_bytes: int = 0
    qp_count: int = 0
    resume_count: int = 0
    max_partner_latency_ticks: int = 0
    # (gid, qpn) of the partner QPs, for the latency statistic
    partners: List[Tuple[bytes, int]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.status in (MigrationStatus.COMPLETED, MigrationStatus.FAILED)

    @property
    def total_ticks(self) -> int:
        return self.checkpoint_ticks + self.transfer_ticks + self.restore_ticks

    def to_dict(self) -> Dict[str, Any]:
        return strip_empty_values(
            {
                "ctx_id": self.spec.ctx_id,
                "src": gid_hex(self.spec.src.gid),
                "dst": gid_hex(self.spec.dst.gid),
                "transfer": self.spec.transfer.value,
                "status": self.status.value,
                "error": self.error,
                "started_at": self.started_at,
                "finished_at": self.finished_at,
                "checkpoint_ticks": self.checkpoint_ticks,
                "transfer_ticks": self.transfer_ticks,
                "restore_ticks": self.restore_ticks,
                "image_bytes": self.image_bytes,
                "qp_count": self.qp_count,
                "resume_count": self.resume_count,
                "max_partner_latency_ticks": self.max_partner_latency_ticks,
            }
        )
