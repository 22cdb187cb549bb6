from dataclasses import dataclass

from common.errors import ArgumentError


@dataclass(frozen=True)
class TransportConfig:
    # sent-unacked packets per QP
    max_inflight: int = 64
    # ack-requested flag on every n-th MIDDLE packet
    ack_every: int = 16
    # retransmission backoff ceiling, as a multiple of timeout_ticks
    backoff_cap: int = 64
    migration_enabled: bool = True

    def __post_init__(self):
        if self.max_inflight <= 0:
            raise ArgumentError("max_inflight must be positive")
        if self.ack_every <= 0:
            raise ArgumentError("ack_every must be positive")
        if self.backoff_cap < 1:
            raise ArgumentError("backoff_cap must be at least 1")


DEFAULT_TRANSPORT = TransportConfig()
