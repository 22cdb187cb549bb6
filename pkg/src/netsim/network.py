"""Deterministic discrete-event network.

Within one tick the scheduler runs, in order: migration triggers, wakeups,
datagram deliveries (grouped by destination node in GID order, then in send
order), every requester (nodes by GID, QPs by QPN), then expired timers.
When no requester has work the clock jumps to the next queued event.
"""

from __future__ import annotations

import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

from common.errors import ArgumentError, PacketError
from common.prng import XorShift64Star
from telemetry import record_completion, record_packet
from transport import (
    DEFAULT_TRANSPORT,
    Opcode,
    Packet,
    TransportConfig,
    completer_handle,
    has_work,
    next_deadline,
    on_timer,
    requester_step,
    responder_handle,
)
from verbs import Device, NodeAddress, QueuePair, WorkCompletion
from .config import NetConfig
from .events import Channel, EventKind, NetEvent
from .trace import Trace, TraceRecord

logger = logging.getLogger(__name__)

XFER = "XFER"


@dataclass(frozen=True)
class CompletionRecord:
    tick: int
    node: str
    gid: bytes
    wc: WorkCompletion


@dataclass
class SimReport:
    final_tick: int
    timed_out: bool
    trace: Trace
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    duplicated: int = 0
    unroutable: int = 0
    opcodes: Dict[str, int] = field(default_factory=dict)
    completions: Dict[str, int] = field(default_factory=dict)
    qp_states: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "final_tick": self.final_tick,
            "timed_out": self.timed_out,
            "packets": {
                "sent": self.sent,
                "delivered": self.delivered,
                "dropped": self.dropped,
                "duplicated": self.duplicated,
                "unroutable": self.unroutable,
                "by_opcode": dict(sorted(self.opcodes.items())),
            },
            "completions": dict(sorted(self.completions.items())),
            "qp_states": dict(sorted(self.qp_states.items())),
        }


class Network:
    def __init__(self, config: Optional[NetConfig] = None, transport: Optional[TransportConfig] = None):
        self.config = config or NetConfig()
        self.transport = transport or DEFAULT_TRANSPORT
        self.now = 0
        self.trace = Trace()
        self.completion_log: List[CompletionRecord] = []
        self.counters: Counter = Counter()
        self.opcode_counts: Counter = Counter()
        self.tick_hooks: List[Callable[[int], None]] = []
        # called with (tick, node name, encoded bytes) for every transmitted packet
        self.wire_taps: List[Callable[[int, str, bytes], None]] = []
        self._rng = XorShift64Star(self.config.seed)
        self._events: List[Tuple[int, int, NetEvent]] = []
        self._seq = 0
        self._last_tick = -1
        self._devices: Dict[bytes, Device] = {}
        self._bulk_handlers: Dict[int, Callable[[bytes, int], None]] = {}
        self._armed: Dict[Tuple[bytes, int], int] = {}
        self._next_tag = 1

    # ── topology ─────────────────────────────────────────────────────

    def attach(self, device: Device) -> None:
        if device.address.gid in self._devices:
            raise ArgumentError(f"a node with GID {device.address} is already attached")
        if any(d.name == device.name for d in self._devices.values()):
            raise ArgumentError(f"node name {device.name!r} is already attached")
        self._devices[device.address.gid] = device
        device.clock = lambda: self.now
        device.sender = self._device_send
        device.on_completion = lambda qp, wc, dev=device: self._on_completion(dev, qp, wc)
        logger.info(f"attached {device.name} ({device.address})")

    def detach(self, device: Device) -> None:
        self._devices.pop(device.address.gid, None)
        device.sender = None
        device.on_completion = None

    def device(self, who: Any) -> Device:
        """Look a node up by NodeAddress, raw GID or name."""
        if isinstance(who, NodeAddress):
            who = who.gid
        if isinstance(who, bytes):
            dev = self._devices.get(who)
        else:
            dev = next((d for d in self._devices.values() if d.name == who), None)
        if dev is None:
            raise ArgumentError(f"unknown node {who!r}")
        return dev

    @property
    def devices(self) -> List[Device]:
        return [self._devices[gid] for gid in sorted(self._devices)]

    def find_context(self, ctx_id: int):
        """The live (not checkpointed) context with this id, wherever it runs."""
        for dev in self.devices:
            ctx = dev.contexts.get(ctx_id)
            if ctx is not None and not ctx.frozen:
                return ctx
        return None

    def iter_qps(self) -> Iterator[Tuple[Device, QueuePair]]:
        for dev in self.devices:
            for qpn in sorted(dev.qps):
                yield dev, dev.qps[qpn]

    # ── scheduling ───────────────────────────────────────────────────

    def _push(self, event: NetEvent) -> None:
        heapq.heappush(self._events, (event.at, event.seq, event))

    def _new_event(self, at: int, kind: EventKind, **kwargs) -> NetEvent:
        self._seq += 1
        event = NetEvent(at=at, seq=self._seq, kind=kind, **kwargs)
        self._push(event)
        return event

    def schedule_migration(self, at: int, action: Callable[[int], Any]) -> None:
        self._new_event(max(at, self._last_tick + 1), EventKind.MIGRATION_TRIGGER, action=action)

    def schedule_wakeup(self, at: int, action: Callable[[int], Any]) -> None:
        self._new_event(max(at, self._last_tick + 1), EventKind.WAKEUP, action=action)

    def new_transfer_tag(self, handler: Callable[[bytes, int], None]) -> int:
        tag = self._next_tag
        self._next_tag += 1
        self._bulk_handlers[tag] = handler
        return tag

    # ── datagrams ────────────────────────────────────────────────────

    def send_datagram(
        self,
        src: NodeAddress,
        dst: NodeAddress,
        data: bytes,
        channel: Channel = Channel.ROCE,
        tag: Optional[int] = None,
    ) -> None:
        if dst.gid not in self._devices:
            self.counters["unroutable"] += 1
            logger.warning(f"tick {self.now}: no route to {dst}, datagram dropped")
            return
        at = self.now + self.config.latency_ticks
        if channel == Channel.BULK:
            self._new_event(at, EventKind.DELIVER, src=src, dest=dst, data=data, channel=channel, tag=tag)
            return

        self.counters["sent"] += 1
        opcode = _peek_opcode(data)
        if self._rng.random() < self.config.loss_rate_for(opcode):
            self.counters["dropped"] += 1
            self._trace_raw("DROP", src, data)
            logger.debug(f"tick {self.now}: dropped {opcode} {src} -> {dst}")
            return
        self._new_event(at, EventKind.DELIVER, src=src, dest=dst, data=data)
        if self._rng.random() < self.config.dup_rate:
            self.counters["duplicated"] += 1
            self._trace_raw("DUP", src, data)
            self._new_event(at + 1, EventKind.DELIVER, src=src, dest=dst, data=data)

    def send_bulk(self, src: NodeAddress, dst: NodeAddress, chunks: List[bytes], tag: int) -> int:
        """Pace `chunks` one per tick starting next tick; returns the tick the
        last one arrives."""
        start = self.now + 1
        node = self.device(src).name
        for i, chunk in enumerate(chunks):
            def _send(now: int, i=i, chunk=chunk) -> None:
                self.trace.append(TraceRecord(now, "TX", node, None, XFER, i, None, len(chunk)))
                self.send_datagram(src, dst, chunk, Channel.BULK, tag)
            self.schedule_wakeup(start + i, _send)
        return start + len(chunks) - 1 + self.config.latency_ticks

    def _device_send(self, device: Device, qp: QueuePair, dest: NodeAddress, packet: Packet) -> None:
        self._emit(device, qp, dest, packet)

    def _emit(self, device: Device, qp: QueuePair, dest: NodeAddress, packet: Packet) -> None:
        name = packet.opcode.name
        self.trace.append(
            TraceRecord(
                self.now, "TX", device.name, qp.qpn, name, packet.psn,
                packet.syndrome.name if packet.syndrome is not None else None,
                len(packet.payload),
            )
        )
        self.opcode_counts[name] += 1
        record_packet("tx", name)
        data = packet.encode()
        for tap in self.wire_taps:
            tap(self.now, device.name, data)
        self.send_datagram(device.address, dest, data)

    def _trace_raw(self, direction: str, src: NodeAddress, data: bytes) -> None:
        try:
            pkt = Packet.decode(data)
        except PacketError:
            return
        node = self._devices[src.gid].name if src.gid in self._devices else str(src)
        self.trace.append(
            TraceRecord(
                self.now, direction, node, pkt.dest_qpn, pkt.opcode.name, pkt.psn,
                pkt.syndrome.name if pkt.syndrome is not None else None,
                len(pkt.payload),
            )
        )

    # ── per-tick processing ──────────────────────────────────────────

    def _deliver(self, event: NetEvent) -> None:
        device = self._devices.get(event.dest.gid)
        if device is None:
            self.counters["unroutable"] += 1
            logger.warning(f"tick {self.now}: {event.dest} detached, datagram dropped")
            return

        if event.channel == Channel.BULK:
            self.trace.append(TraceRecord(self.now, "RX", device.name, None, XFER, event.tag or 0, None, len(event.data)))
            handler = self._bulk_handlers.get(event.tag)
            if handler is not None:
                handler(event.data, self.now)
            return

        try:
            pkt = Packet.decode(event.data)
        except PacketError as e:
            logger.warning(f"tick {self.now}: malformed datagram from {event.src}: {e}")
            return
        self.counters["delivered"] += 1
        self.trace.append(
            TraceRecord(
                self.now, "RX", device.name, pkt.dest_qpn, pkt.opcode.name, pkt.psn,
                pkt.syndrome.name if pkt.syndrome is not None else None,
                len(pkt.payload),
            )
        )
        record_packet("rx", pkt.opcode.name)

        qp = device.qps.get(pkt.dest_qpn)
        if qp is None:
            logger.warning(f"tick {self.now}: {device.name} has no QP {pkt.dest_qpn:#x}, dropped")
            return
        if pkt.opcode == Opcode.ACK:
            replies = completer_handle(qp, pkt, self.now, self.transport, src_gid=event.src.gid)
        else:
            replies = responder_handle(qp, pkt, self.now, self.transport)
        # responses go back to wherever the request came from
        for reply in replies:
            self._emit(device, qp, event.src, reply)

    def _run_requesters(self) -> None:
        for device, qp in self.iter_qps():
            if qp.partner is None:
                continue
            for pkt in requester_step(qp, self.now, self.transport):
                self._emit(device, qp, qp.partner.address, pkt)

    def _fire_timer(self, event: NetEvent) -> None:
        device = self._devices.get(event.dest.gid)
        if device is None:
            return
        key = (event.dest.gid, event.qpn)
        if self._armed.get(key) == event.at:
            del self._armed[key]
        qp = device.qps.get(event.qpn)
        if qp is None or qp.partner is None:
            return
        for pkt in on_timer(qp, self.now, self.transport):
            self._emit(device, qp, qp.partner.address, pkt)

    def _sync_timers(self) -> None:
        for device, qp in self.iter_qps():
            deadline = next_deadline(qp)
            if deadline is None:
                continue
            at = max(deadline, self.now + 1)
            key = (device.address.gid, qp.qpn)
            armed = self._armed.get(key)
            if armed is not None and armed <= at:
                continue
            self._armed[key] = at
            self._new_event(at, EventKind.TIMER, dest=device.address, qpn=qp.qpn)

    def _any_requester_work(self) -> bool:
        return any(has_work(qp, self.transport) for _, qp in self.iter_qps())

    def _next_tick(self) -> Optional[int]:
        base = self._last_tick + 1
        candidates = []
        if self._events:
            candidates.append(max(self._events[0][0], base))
        if candidates and candidates[0] == base:
            return base
        if self._any_requester_work():
            return base
        return candidates[0] if candidates else None

    def step(self, tick: int) -> None:
        """Process everything due at `tick`."""
        self.now = tick
        due: List[NetEvent] = []
        while self._events and self._events[0][0] <= tick:
            due.append(heapq.heappop(self._events)[2])
        due.sort(key=_processing_order)

        timers = []
        for event in due:
            match event.kind:
                case EventKind.MIGRATION_TRIGGER | EventKind.WAKEUP:
                    event.action(tick)
                case EventKind.DELIVER:
                    self._deliver(event)
                case EventKind.TIMER:
                    timers.append(event)

        self._run_requesters()
        for event in timers:
            self._fire_timer(event)
        for hook in self.tick_hooks:
            hook(tick)
        self._sync_timers()
        self._last_tick = tick

    def run_until(
        self,
        predicate: Optional[Callable[["Network"], bool]] = None,
        max_ticks: Optional[int] = None,
    ) -> SimReport:
        """Run until `predicate` holds, nothing is left to do, or the tick
        budget is spent (reported as timed_out, not raised)."""
        limit = self.config.max_ticks if max_ticks is None else max_ticks
        timed_out = False
        while True:
            if predicate is not None and predicate(self):
                break
            tick = self._next_tick()
            if tick is None:
                break
            if tick > limit:
                timed_out = True
                break
            self.step(tick)
        report = self.report(timed_out)
        logger.info(
            f"run stopped at tick {report.final_tick}: sent={report.sent} delivered={report.delivered} "
            f"dropped={report.dropped}{' (timed out)' if timed_out else ''}"
        )
        return report

    def report(self, timed_out: bool = False) -> SimReport:
        states = Counter(qp.state.name for _, qp in self.iter_qps())
        completions = Counter(rec.wc.status.name for rec in self.completion_log)
        return SimReport(
            final_tick=self.now,
            timed_out=timed_out,
            trace=self.trace,
            sent=self.counters["sent"],
            delivered=self.counters["delivered"],
            dropped=self.counters["dropped"],
            duplicated=self.counters["duplicated"],
            unroutable=self.counters["unroutable"],
            opcodes=dict(self.opcode_counts),
            completions=dict(completions),
            qp_states=dict(states),
        )

    def _on_completion(self, device: Device, qp: QueuePair, wc: WorkCompletion) -> None:
        self.completion_log.append(CompletionRecord(self.now, device.name, device.address.gid, wc))
        record_completion(wc.status.name)


def _peek_opcode(data: bytes) -> Optional[str]:
    if len(data) < 2:
        return None
    try:
        return Opcode(data[1]).name
    except ValueError:
        return None


def _processing_order(event: NetEvent) -> Tuple[int, bytes, int]:
    dest = event.dest.gid if event.kind == EventKind.DELIVER else b""
    return event.kind.value, dest, event.seq
