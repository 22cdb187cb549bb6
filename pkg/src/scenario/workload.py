"""The simulated application: posts the scenario's traffic, keeps receive
queues stocked, polls completion queues and checks every delivered byte.

It addresses its QPs by (context id, QPN), so it keeps working after the
context migrates; while the context is checkpointed the application is
frozen with it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from common.errors import MigrsimError
from common.prng import XorShift64Star
from netsim import Network
from verbs import (
    QPState,
    ReceiveRequest,
    SendRequest,
    VerbsContext,
    WCOpcode,
    WCStatus,
    WorkCompletion,
    WROpcode,
)
from .schema import QPSpec, TrafficSpec

logger = logging.getLogger(__name__)

PATTERN_PERIOD = 251
_BASE = bytes(range(256))
POLL_BATCH = 64


def payload(index: int, size: int) -> bytes:
    """Deterministic content of message `index`."""
    off = index % PATTERN_PERIOD
    return (_BASE * ((off + size) // 256 + 1))[off:off + size]


@dataclass
class Endpoint:
    """One QP as the application sees it."""

    index: int
    name: str
    spec: QPSpec
    ctx_id: int
    qpn: int
    cq: int
    srq: Optional[int]
    slot_size: int
    send_mrn: int
    send_base: int
    send_lkey: int
    recv_mrn: int
    recv_base: int
    recv_lkey: int
    recv_rkey: int


@dataclass
class Stream:
    spec: TrafficSpec
    src: Endpoint
    dst: Endpoint
    sizes: List[int]
    posted: int = 0
    next_post_at: int = 0
    send_ok: int = 0
    send_failed: int = 0
    received: int = 0
    recv_failed: int = 0
    mismatches: int = 0
    extra: int = 0
    waking: bool = False

    @property
    def done(self) -> bool:
        if self.send_ok + self.send_failed < self.spec.count:
            return False
        return self.spec.opcode != "SEND" or self.received + self.recv_failed >= self.send_ok

    def summary(self) -> Dict[str, int]:
        return {
            "qp": self.src.name,
            "opcode": self.spec.opcode,
            "count": self.spec.count,
            "send_ok": self.send_ok,
            "send_failed": self.send_failed,
            "received": self.received,
            "mismatches": self.mismatches,
            "duplicates": self.extra,
        }


@dataclass(frozen=True)
class AppCompletion:
    tick: int
    qp: str
    wr_id: int
    status: str
    opcode: str


class Application:
    def __init__(self, network: Network, endpoints: List[Endpoint], seed: int):
        self.network = network
        self.endpoints = endpoints
        self._by_qpn: Dict[Tuple[int, int], Endpoint] = {(e.ctx_id, e.qpn): e for e in endpoints}
        self.streams: List[Stream] = []
        self._outbound: Dict[str, Stream] = {}
        self._inbound: Dict[str, Stream] = {}
        self.completions: List[AppCompletion] = []
        self._rng = XorShift64Star(seed ^ 0xA5A5_5A5A)

    def add_stream(self, spec: TrafficSpec) -> Stream:
        src = next(e for e in self.endpoints if e.name == spec.qp)
        dst = next(e for e in self.endpoints if e.name == src.spec.partner)
        span = spec.msg_max - spec.msg_min + 1
        sizes = [spec.msg_min + self._rng.next_u32() % span for _ in range(spec.count)]
        stream = Stream(spec, src, dst, sizes, next_post_at=spec.start_tick)
        self.streams.append(stream)
        self._outbound[src.name] = stream
        self._inbound[dst.name] = stream
        self._wake(stream, spec.start_tick)
        return stream

    # ── lifecycle ────────────────────────────────────────────────────

    def prime(self) -> None:
        """Fill every receive queue (or SRQ) before traffic starts."""
        for ep in self.endpoints:
            ctx = self.network.find_context(ep.ctx_id)
            for slot in range(ep.spec.max_recv_wr):
                if not self._post_recv(ctx, ep, slot):
                    break

    def on_tick(self, now: int) -> None:
        contexts = {}
        for ep in self.endpoints:
            if ep.ctx_id not in contexts:
                contexts[ep.ctx_id] = self.network.find_context(ep.ctx_id)
        for ctx_id, ctx in contexts.items():
            if ctx is not None:
                self._poll(ctx, now)
        for stream in self.streams:
            self._post_due(stream, now)

    def finished(self) -> bool:
        return all(s.done for s in self.streams)

    def undelivered(self) -> List[str]:
        problems = []
        for s in self.streams:
            if s.send_ok != s.spec.count:
                problems.append(f"{s.src.name}: {s.send_ok}/{s.spec.count} sends completed successfully")
            if s.spec.opcode == "SEND" and s.received != s.spec.count:
                problems.append(f"{s.dst.name}: received {s.received}/{s.spec.count} messages")
            if s.mismatches:
                problems.append(f"{s.dst.name}: {s.mismatches} message(s) with wrong length or content")
            if s.extra:
                problems.append(f"{s.dst.name}: {s.extra} unexpected extra message(s)")
        return problems

    # ── receive side ─────────────────────────────────────────────────

    def _recv_addr(self, ep: Endpoint, slot: int) -> int:
        return ep.recv_base + slot * ep.slot_size

    def _write_addr(self, ep: Endpoint, index: int) -> int:
        # RDMA WRITE targets sit above the receive slots
        return self._recv_addr(ep, ep.spec.max_recv_wr + index % ep.spec.max_recv_wr)

    def _post_recv(self, ctx: Optional[VerbsContext], ep: Endpoint, slot: int) -> bool:
        if ctx is None:
            return False
        rr = ReceiveRequest(
            wr_id=(ep.index << 32) | slot,
            lkey=ep.recv_lkey,
            addr=self._recv_addr(ep, slot),
            max_len=ep.slot_size,
        )
        target = ctx.srqs[ep.srq] if ep.srq is not None else ctx.qp(ep.qpn)
        try:
            ctx.post_recv(target, rr)
        except MigrsimError as e:
            logger.debug(f"{ep.name}: receive slot {slot} not reposted: {e}")
            return False
        return True

    def _poll(self, ctx: VerbsContext, now: int) -> None:
        for handle in sorted(ctx.cqs):
            while True:
                batch = ctx.poll_cq(handle, POLL_BATCH)
                for wc in batch:
                    self._on_wc(ctx, wc, now)
                if len(batch) < POLL_BATCH:
                    break

    def _on_wc(self, ctx: VerbsContext, wc: WorkCompletion, now: int) -> None:
        ep = self._by_qpn.get((ctx.ctx_id, wc.qpn))
        if ep is None:
            return
        self.completions.append(AppCompletion(now, ep.name, wc.wr_id, wc.status.name, wc.opcode.name))
        if wc.opcode != WCOpcode.RECV:
            stream = self._outbound.get(ep.name)
            if stream is None:
                return
            if wc.status == WCStatus.SUCCESS:
                stream.send_ok += 1
            else:
                stream.send_failed += 1
            self._post_due(stream, now)
            return

        owner = self.endpoints[wc.wr_id >> 32]
        slot = wc.wr_id & 0xFFFFFFFF
        stream = self._inbound.get(ep.name)
        if wc.status != WCStatus.SUCCESS:
            if stream is not None and wc.status != WCStatus.WR_FLUSH_ERR:
                stream.recv_failed += 1
            if wc.status != WCStatus.WR_FLUSH_ERR:
                self._post_recv(ctx, owner, slot)
            return
        if stream is None or stream.received >= stream.spec.count:
            if stream is not None:
                stream.extra += 1
            self._post_recv(ctx, owner, slot)
            return

        k = stream.received
        stream.received += 1
        expected = payload(k, stream.sizes[k])
        mr = ctx.mrs.get(owner.recv_mrn)
        actual = mr.read(self._recv_addr(owner, slot), wc.byte_len) if mr is not None else b""
        if wc.byte_len != len(expected) or actual != expected:
            stream.mismatches += 1
            logger.warning(f"{ep.name}: message {k} arrived with wrong content ({wc.byte_len} bytes)")
        self._post_recv(ctx, owner, slot)

    # ── send side ────────────────────────────────────────────────────

    def _wake(self, stream: Stream, at: int) -> None:
        if stream.waking:
            return
        stream.waking = True

        def _fire(now: int) -> None:
            stream.waking = False
            self._post_due(stream, now)

        self.network.schedule_wakeup(at, _fire)

    def _post_due(self, stream: Stream, now: int) -> None:
        ep = stream.src
        ctx = self.network.find_context(ep.ctx_id)
        if ctx is None:
            return
        qp = ctx.qps.get(ep.qpn)
        if qp is None or qp.state in (QPState.RESET, QPState.ERROR, QPState.SQE, QPState.STOPPED):
            return
        interval = stream.spec.interval_ticks
        while stream.posted < stream.spec.count and qp.outstanding_sends < ep.spec.max_send_wr:
            if now < stream.next_post_at:
                self._wake(stream, stream.next_post_at)
                return
            k = stream.posted
            size = stream.sizes[k]
            slot = k % ep.spec.max_send_wr
            addr = ep.send_base + slot * ep.slot_size
            ctx.mrs[ep.send_mrn].write(addr, payload(k, size))
            dst = stream.dst
            sr = SendRequest(
                wr_id=k,
                opcode=WROpcode.SEND if stream.spec.opcode == "SEND" else WROpcode.RDMA_WRITE,
                lkey=ep.send_lkey,
                addr=addr,
                length=size,
                rkey=dst.recv_rkey,
                raddr=self._write_addr(dst, k),
            )
            try:
                ctx.post_send(qp, sr)
            except MigrsimError as e:
                logger.debug(f"{ep.name}: post_send deferred: {e}")
                return
            stream.posted += 1
            stream.next_post_at = now + interval
            if interval and stream.posted < stream.spec.count:
                self._wake(stream, stream.next_post_at)
                return
