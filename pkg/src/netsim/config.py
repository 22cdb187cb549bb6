from dataclasses import dataclass
from typing import FrozenSet, Optional, Tuple

from common.errors import ArgumentError


@dataclass(frozen=True)
class NetConfig:
    seed: int = 1
    latency_ticks: int = 1
    loss_rate: float = 0.0
    dup_rate: float = 0.0
    max_ticks: int = 1_000_000
    # opcode names the loss draw applies to; None means every RoCE datagram
    lossy_opcodes: Optional[FrozenSet[str]] = None
    # (opcode name, loss rate) pairs that replace loss_rate for those opcodes
    opcode_loss: Tuple[Tuple[str, float], ...] = ()
    # payload bytes per image-transfer datagram
    bulk_chunk_bytes: int = 4096

    def __post_init__(self):
        if not 0 <= self.seed < 1 << 64:
            raise ArgumentError(f"seed must fit in 64 bits, got {self.seed}")
        if self.latency_ticks < 1:
            raise ArgumentError(f"latency_ticks must be at least 1, got {self.latency_ticks}")
        for name in ("loss_rate", "dup_rate"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ArgumentError(f"{name} must be in [0, 1), got {value}")
        for opcode, rate in self.opcode_loss:
            if not 0.0 <= rate < 1.0:
                raise ArgumentError(f"loss rate of {opcode} must be in [0, 1), got {rate}")
        if self.max_ticks < 0:
            raise ArgumentError("max_ticks must not be negative")
        if self.bulk_chunk_bytes <= 0:
            raise ArgumentError("bulk_chunk_bytes must be positive")

    def loss_rate_for(self, opcode: Optional[str]) -> float:
        for name, rate in self.opcode_loss:
            if name == opcode:
                return rate
        if self.lossy_opcodes is None or opcode in self.lossy_opcodes:
            return self.loss_rate
        return 0.0
