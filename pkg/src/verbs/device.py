from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from common.errors import ArgumentError, ResourceError
from common.prng import XorShift64Star
from .objects import MemoryRegion, NodeAddress, QueuePair, WorkCompletion

logger = logging.getLogger(__name__)

ID_LIMIT = 1 << 24
# spacing of per-node starting points under DeviceConfig.partitioned
PARTITION_STRIDE = 1 << 16


@dataclass
class DeviceConfig:
    qpn_range: Tuple[int, int] = (0x10, ID_LIMIT)
    mrn_range: Tuple[int, int] = (1, ID_LIMIT)
    key_seed: int = 0
    # first identifier handed out; defaults to the low end of the range
    first_qpn: Optional[int] = None
    first_mrn: Optional[int] = None

    @classmethod
    def partitioned(cls, index: int, key_seed: int = 0) -> "DeviceConfig":
        """Same ranges on every node, but node `index` starts allocating at the
        index-th 2**16 slice, so freshly created IDs do not clash with IDs a
        migration brings in from another node."""
        return cls(
            first_qpn=0x10 + index * PARTITION_STRIDE,
            first_mrn=1 + index * PARTITION_STRIDE,
            key_seed=key_seed,
        )


class DeviceState:
    """Last-assigned identifiers, exposed so a restore can steer the next one."""

    def __init__(self, config: DeviceConfig):
        qpn_range, mrn_range = config.qpn_range, config.mrn_range
        for name, (lo, hi) in (("qpn_range", qpn_range), ("mrn_range", mrn_range)):
            if not 0 < lo < hi:
                raise ArgumentError(f"{name} must satisfy 0 < lo < hi, got [{lo:#x}, {hi:#x})")
        if qpn_range[1] > ID_LIMIT:
            raise ArgumentError("qpn_range exceeds the 24-bit QPN space")
        self.qpn_range = qpn_range
        self.mrn_range = mrn_range
        self.last_qpn = _before(config.first_qpn, qpn_range)
        self.last_mrn = _before(config.first_mrn, mrn_range)


def _before(first: Optional[int], rng: Tuple[int, int]) -> int:
    lo, hi = rng
    if first is None or first == lo:
        # the first assignment wraps around to lo
        return hi - 1
    if not lo < first < hi:
        raise ArgumentError(f"first identifier {first:#x} outside [{lo:#x}, {hi:#x})")
    return first - 1


def _next_free(last: int, rng: Tuple[int, int], taken: Dict[int, Any]) -> Optional[int]:
    lo, hi = rng
    candidate = last
    for _ in range(hi - lo):
        candidate += 1
        if candidate >= hi:
            candidate = lo
        if candidate not in taken:
            return candidate
    return None


class Device:
    """One simulated RDMA device (one per node)."""

    def __init__(self, name: str, address: NodeAddress, config: Optional[DeviceConfig] = None):
        self.name = name
        self.address = address
        self.config = config or DeviceConfig()
        self.state = DeviceState(self.config)
        self.qps: Dict[int, QueuePair] = {}
        self.mrs: Dict[int, MemoryRegion] = {}
        self.contexts: Dict[int, Any] = {}
        self._keys = XorShift64Star(self.config.key_seed ^ address.guid)
        self.clock: Callable[[], int] = lambda: 0
        # Replaced by the network on attach; unit tests read the outbox.
        self.sender: Optional[Callable[[Any, QueuePair, NodeAddress, Any], None]] = None
        self.on_completion: Optional[Callable[[QueuePair, WorkCompletion], None]] = None
        self.outbox: List[Tuple[NodeAddress, Any]] = []

    # ── identifiers ──────────────────────────────────────────────────

    def set_last_qpn(self, value: int) -> None:
        lo, hi = self.state.qpn_range
        if not lo <= value < hi:
            raise ArgumentError(f"last_qpn {value:#x} outside [{lo:#x}, {hi:#x})")
        self.state.last_qpn = value

    def set_last_mrn(self, value: int) -> None:
        lo, hi = self.state.mrn_range
        if not lo <= value < hi:
            raise ArgumentError(f"last_mrn {value:#x} outside [{lo:#x}, {hi:#x})")
        self.state.last_mrn = value

    def steer_qpn(self, wanted: int) -> None:
        """Arrange for the next QPN assignment to attempt `wanted`."""
        lo, hi = self.state.qpn_range
        if not lo <= wanted < hi:
            raise ArgumentError(f"qpn {wanted:#x} outside [{lo:#x}, {hi:#x})")
        self.set_last_qpn(hi - 1 if wanted == lo else wanted - 1)

    def steer_mrn(self, wanted: int) -> None:
        lo, hi = self.state.mrn_range
        if not lo <= wanted < hi:
            raise ArgumentError(f"mrn {wanted:#x} outside [{lo:#x}, {hi:#x})")
        self.set_last_mrn(hi - 1 if wanted == lo else wanted - 1)

    def assign_qpn(self) -> int:
        qpn = _next_free(self.state.last_qpn, self.state.qpn_range, self.qps)
        if qpn is None:
            raise ResourceError(f"{self.name}: QPN range exhausted")
        self.state.last_qpn = qpn
        return qpn

    def assign_mrn(self) -> int:
        mrn = _next_free(self.state.last_mrn, self.state.mrn_range, self.mrs)
        if mrn is None:
            raise ResourceError(f"{self.name}: MRN range exhausted")
        self.state.last_mrn = mrn
        return mrn

    def new_key(self) -> int:
        return self._keys.nonzero_u32()

    # ── contexts ─────────────────────────────────────────────────────

    def open_context(self, ctx_id: int):
        from .context import VerbsContext

        if ctx_id in self.contexts:
            raise ArgumentError(f"{self.name}: context {ctx_id} already open")
        ctx = VerbsContext(self, ctx_id)
        self.contexts[ctx_id] = ctx
        logger.info(f"{self.name}: opened context {ctx_id}")
        return ctx

    def transmit(self, qp: QueuePair, dest: NodeAddress, packet: Any) -> None:
        if self.sender is not None:
            self.sender(self, qp, dest, packet)
        else:
            self.outbox.append((dest, packet))

    def notify_completion(self, qp: QueuePair, wc: WorkCompletion) -> None:
        if self.on_completion is not None:
            self.on_completion(qp, wc)

    def __repr__(self) -> str:
        return f"Device({self.name}, gid={self.address.gid.hex()})"
