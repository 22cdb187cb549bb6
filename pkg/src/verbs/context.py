from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional, Union

from common.errors import ArgumentError, ResourceError, StateError
from .objects import (
    Access,
    CompletionQueue,
    MemoryRegion,
    Partner,
    ProtectionDomain,
    QPCaps,
    QPState,
    QueuePair,
    ReceiveRequest,
    RetryConfig,
    SendRequest,
    SharedReceiveQueue,
    WCOpcode,
    WCStatus,
    WorkCompletion,
    WROpcode,
    PSN_MODULUS,
)
from .state_machine import CLOSED_STATES, set_state

logger = logging.getLogger(__name__)

Handle = Union[int, ProtectionDomain, CompletionQueue, SharedReceiveQueue]


def _handle(obj: Optional[Handle]) -> Optional[int]:
    if obj is None or isinstance(obj, int):
        return obj
    return obj.handle


class VerbsContext:
    """All verbs objects one process opened on a device, and the API over them."""

    def __init__(self, device, ctx_id: int):
        self.device = device
        self.ctx_id = ctx_id
        self.pds: Dict[int, ProtectionDomain] = {}
        self.mrs: Dict[int, MemoryRegion] = {}
        self.cqs: Dict[int, CompletionQueue] = {}
        self.srqs: Dict[int, SharedReceiveQueue] = {}
        self.qps: Dict[int, QueuePair] = {}
        self._next_handle = 1
        # set while the owning process is checkpointed
        self.frozen = False

    @property
    def node(self):
        return self.device.address

    def _alloc_handle(self, wanted: Optional[int], table: Dict[int, Any], kind: str) -> int:
        if wanted is None:
            wanted = self._next_handle
            while wanted in self.pds or wanted in self.cqs or wanted in self.srqs:
                wanted += 1
        elif wanted in table:
            raise ArgumentError(f"{kind} handle {wanted} already in use")
        self._next_handle = max(self._next_handle, wanted + 1)
        return wanted

    # ── lookups ──────────────────────────────────────────────────────

    def pd(self, handle: Handle) -> ProtectionDomain:
        try:
            return self.pds[_handle(handle)]
        except KeyError:
            raise ArgumentError(f"unknown PD handle {_handle(handle)}") from None

    def cq(self, handle: Handle) -> CompletionQueue:
        try:
            return self.cqs[_handle(handle)]
        except KeyError:
            raise ArgumentError(f"unknown CQ handle {_handle(handle)}") from None

    def srq(self, handle: Handle) -> SharedReceiveQueue:
        try:
            return self.srqs[_handle(handle)]
        except KeyError:
            raise ArgumentError(f"unknown SRQ handle {_handle(handle)}") from None

    def qp(self, qpn: int) -> QueuePair:
        try:
            return self.qps[qpn]
        except KeyError:
            raise ArgumentError(f"unknown QPN {qpn:#x}") from None

    def mr_by_lkey(self, lkey: int) -> Optional[MemoryRegion]:
        for mr in self.mrs.values():
            if mr.lkey == lkey:
                return mr
        return None

    def mr_by_rkey(self, rkey: int) -> Optional[MemoryRegion]:
        for mr in self.mrs.values():
            if mr.rkey == rkey:
                return mr
        return None

    # ── object creation ──────────────────────────────────────────────

    def alloc_pd(self, handle: Optional[int] = None) -> ProtectionDomain:
        h = self._alloc_handle(handle, self.pds, "PD")
        pd = ProtectionDomain(h)
        self.pds[h] = pd
        return pd

    def reg_mr(self, pd: Handle, base: int, length: int, access: Access = Access.LOCAL_WRITE) -> MemoryRegion:
        pd_obj = self.pd(pd)
        if length <= 0:
            raise ArgumentError(f"MR length must be positive, got {length}")
        if base < 0 or base + length > 1 << 64:
            raise ArgumentError("MR range outside the 64-bit address space")
        mrn = self.device.assign_mrn()
        lkey = self._fresh_key(lambda mr: mr.lkey)
        rkey = self._fresh_key(lambda mr: mr.rkey)
        mr = MemoryRegion(
            mrn=mrn,
            lkey=lkey,
            rkey=rkey,
            base=base,
            length=length,
            access=Access(access),
            pd_handle=pd_obj.handle,
            buffer=bytearray(length),
        )
        self.mrs[mrn] = mr
        self.device.mrs[mrn] = mr
        logger.debug(f"ctx {self.ctx_id}: reg_mr mrn={mrn} len={length}")
        return mr

    def _fresh_key(self, attr) -> int:
        used = {attr(mr) for mr in self.mrs.values()}
        while True:
            key = self.device.new_key()
            if key not in used:
                return key

    def set_mr_keys(self, mr: MemoryRegion, lkey: int, rkey: int) -> None:
        if lkey == 0 or rkey == 0:
            raise ArgumentError("protection keys must be nonzero")
        mr.lkey = lkey
        mr.rkey = rkey

    def create_cq(self, depth: int, handle: Optional[int] = None) -> CompletionQueue:
        if depth <= 0:
            raise ArgumentError(f"CQ depth must be positive, got {depth}")
        h = self._alloc_handle(handle, self.cqs, "CQ")
        cq = CompletionQueue(h, depth)
        self.cqs[h] = cq
        return cq

    def create_srq(self, pd: Handle, depth: int, handle: Optional[int] = None) -> SharedReceiveQueue:
        pd_obj = self.pd(pd)
        if depth <= 0:
            raise ArgumentError(f"SRQ depth must be positive, got {depth}")
        h = self._alloc_handle(handle, self.srqs, "SRQ")
        srq = SharedReceiveQueue(h, pd_obj.handle, depth)
        self.srqs[h] = srq
        return srq

    def create_qp(
        self,
        pd: Handle,
        send_cq: Handle,
        recv_cq: Handle,
        srq: Optional[Handle] = None,
        caps: Optional[QPCaps] = None,
    ) -> QueuePair:
        pd_obj = self.pd(pd)
        scq = self.cq(send_cq)
        rcq = self.cq(recv_cq)
        srq_handle = None
        if srq is not None:
            srq_obj = self.srq(srq)
            if srq_obj.pd_handle != pd_obj.handle:
                raise ArgumentError("SRQ belongs to another PD")
            srq_handle = srq_obj.handle
        caps = caps or QPCaps()
        if caps.max_send_wr <= 0 or caps.max_recv_wr <= 0:
            raise ArgumentError("queue depths must be positive")
        qpn = self.device.assign_qpn()
        qp = QueuePair(self, qpn, pd_obj.handle, scq.handle, rcq.handle, srq_handle, caps)
        self.qps[qpn] = qp
        self.device.qps[qpn] = qp
        logger.debug(f"ctx {self.ctx_id}: create_qp qpn={qpn:#x}")
        return qp

    # ── state changes ────────────────────────────────────────────────

    def modify_qp(
        self,
        qp: QueuePair,
        target: QPState,
        partner: Optional[Partner] = None,
        mtu: Optional[int] = None,
        expected_psn: Optional[int] = None,
        next_psn: Optional[int] = None,
        retry: Optional[RetryConfig] = None,
    ) -> None:
        if target in (QPState.STOPPED, QPState.PAUSED):
            raise StateError(f"{target.name} is not reachable through modify_qp")
        if target == QPState.RTR and qp.state == QPState.INIT:
            if partner is None or expected_psn is None:
                raise ArgumentError("RTR requires partner and expected_psn")
        if target == QPState.RTS and qp.state == QPState.RTR and next_psn is None:
            raise ArgumentError("RTS requires next_psn")
        if mtu is not None and mtu not in (256, 512, 1024, 2048, 4096):
            raise ArgumentError(f"unsupported MTU {mtu}")

        source = qp.state
        set_state(qp, target, now=self.device.clock())

        if partner is not None:
            qp.partner = partner
        if mtu is not None:
            qp.mtu = mtu
        if expected_psn is not None:
            qp.rsp.expected_psn = expected_psn % PSN_MODULUS
        if next_psn is not None and source == QPState.RTR:
            qp.req.next_psn = next_psn % PSN_MODULUS
            qp.req.first_unacked_psn = qp.req.next_psn
        if retry is not None:
            qp.retry = retry

    # ── work requests ────────────────────────────────────────────────

    def post_send(self, qp: QueuePair, sr: SendRequest) -> None:
        if qp.state in CLOSED_STATES:
            raise StateError(f"post_send on QP {qp.qpn:#x} in {qp.state.name}")
        if qp.outstanding_sends >= qp.caps.max_send_wr:
            raise ResourceError(f"send queue of QP {qp.qpn:#x} is full")
        sr.posted_at = self.device.clock()
        sr.last_psn = None
        if qp.state == QPState.SQE:
            self.complete_send(qp, sr, WCStatus.WR_FLUSH_ERR)
            return
        status = self._check_local(qp.pd_handle, sr.lkey, sr.addr, sr.length, None)
        if status is not None:
            self.complete_send(qp, sr, status)
            if qp.state in (QPState.RTS, QPState.SQD):
                set_state(qp, QPState.SQE, internal=True, now=self.device.clock())
            return
        qp.sq.append(sr)

    def post_recv(self, target: Union[QueuePair, SharedReceiveQueue], rr: ReceiveRequest) -> None:
        if isinstance(target, QueuePair):
            if target.state in CLOSED_STATES:
                raise StateError(f"post_recv on QP {target.qpn:#x} in {target.state.name}")
            if target.srq_handle is not None:
                raise ArgumentError(f"QP {target.qpn:#x} receives through SRQ {target.srq_handle}")
            pd_handle, queue, depth = target.pd_handle, target.rq, target.caps.max_recv_wr
        elif isinstance(target, SharedReceiveQueue):
            if target.handle not in self.srqs:
                raise ArgumentError(f"unknown SRQ handle {target.handle}")
            pd_handle, queue, depth = target.pd_handle, target.ring, target.depth
        else:
            raise ArgumentError(f"cannot post receives to {target!r}")
        if len(queue) >= depth:
            raise ResourceError("receive queue is full")
        status = self._check_local(pd_handle, rr.lkey, rr.addr, rr.max_len, Access.LOCAL_WRITE)
        if status is not None:
            raise ArgumentError(f"receive buffer rejected: {status.name}")
        queue.append(rr)

    def poll_cq(self, cq: Handle, max_entries: int) -> List[WorkCompletion]:
        return self.cq(cq).poll(max_entries)

    def _check_local(self, pd_handle: int, lkey: int, addr: int, length: int, need: Optional[Access]) -> Optional[WCStatus]:
        mr = self.mr_by_lkey(lkey)
        if mr is None:
            return WCStatus.LOC_LEN_ERR
        if mr.pd_handle != pd_handle:
            return WCStatus.LOC_PROT_ERR
        if length and not mr.contains(addr, length):
            return WCStatus.LOC_LEN_ERR
        if need is not None and not mr.access & need:
            return WCStatus.LOC_PROT_ERR
        return None

    # ── completions (called by the transport) ─────────────────────────

    def complete_send(self, qp: QueuePair, sr: SendRequest, status: WCStatus, now: Optional[int] = None) -> None:
        opcode = WCOpcode.SEND if sr.opcode == WROpcode.SEND else WCOpcode.RDMA_WRITE
        wc = WorkCompletion(
            wr_id=sr.wr_id,
            status=status,
            opcode=opcode,
            byte_len=sr.length if status == WCStatus.SUCCESS else 0,
            qpn=qp.qpn,
            posted_at=sr.posted_at,
            completed_at=self.device.clock() if now is None else now,
        )
        self._push(qp, qp.send_cq, wc)

    def complete_recv(
        self, qp: QueuePair, rr: ReceiveRequest, status: WCStatus, byte_len: int, now: Optional[int] = None
    ) -> None:
        wc = WorkCompletion(
            wr_id=rr.wr_id,
            status=status,
            opcode=WCOpcode.RECV,
            byte_len=byte_len,
            qpn=qp.qpn,
            completed_at=self.device.clock() if now is None else now,
        )
        self._push(qp, qp.recv_cq, wc)

    def _push(self, qp: QueuePair, cq_handle: int, wc: WorkCompletion) -> None:
        cq = self.cqs.get(cq_handle)
        if cq is None or not cq.push(wc):
            logger.warning(f"ctx {self.ctx_id}: CQ {cq_handle} overrun, dropped completion wr_id={wc.wr_id}")
            return
        self.device.notify_completion(qp, wc)

    # ── teardown ─────────────────────────────────────────────────────

    def destroy_qp(self, qp: QueuePair) -> None:
        self.qps.pop(qp.qpn, None)
        if self.device.qps.get(qp.qpn) is qp:
            del self.device.qps[qp.qpn]

    def dereg_mr(self, mr: MemoryRegion) -> None:
        if any(qp.pd_handle == mr.pd_handle and qp.rsp.write_active and qp.rsp.write_rkey == mr.rkey
               for qp in self.qps.values()):
            raise StateError(f"MR {mr.mrn} is the target of an RDMA WRITE in progress")
        self.mrs.pop(mr.mrn, None)
        if self.device.mrs.get(mr.mrn) is mr:
            del self.device.mrs[mr.mrn]

    def destroy_cq(self, cq: Handle) -> None:
        h = _handle(cq)
        if any(qp.send_cq == h or qp.recv_cq == h for qp in self.qps.values()):
            raise StateError(f"CQ {h} still in use")
        self.cqs.pop(h, None)

    def destroy_srq(self, srq: Handle) -> None:
        h = _handle(srq)
        if any(qp.srq_handle == h for qp in self.qps.values()):
            raise StateError(f"SRQ {h} still in use")
        self.srqs.pop(h, None)

    def dealloc_pd(self, pd: Handle) -> None:
        h = _handle(pd)
        if any(o.pd_handle == h for o in list(self.mrs.values()) + list(self.qps.values()) + list(self.srqs.values())):
            raise StateError(f"PD {h} still has objects")
        self.pds.pop(h, None)

    def close(self) -> None:
        """Destroy every object, in reverse dependency order."""
        for qp in list(self.qps.values()):
            self.destroy_qp(qp)
        for mr in list(self.mrs.values()):
            self.mrs.pop(mr.mrn, None)
            if self.device.mrs.get(mr.mrn) is mr:
                del self.device.mrs[mr.mrn]
        self.srqs.clear()
        self.cqs.clear()
        self.pds.clear()
        if self.device.contexts.get(self.ctx_id) is self:
            del self.device.contexts[self.ctx_id]
        logger.info(f"{self.device.name}: closed context {self.ctx_id}")

    def snapshot(self) -> Dict[str, Any]:
        return {
            "pds": sorted(self.pds),
            "mrs": {mrn: mr.snapshot() for mrn, mr in sorted(self.mrs.items())},
            "cqs": {h: cq.snapshot() for h, cq in sorted(self.cqs.items())},
            "srqs": {h: srq.snapshot() for h, srq in sorted(self.srqs.items())},
            "qps": {qpn: qp.snapshot() for qpn, qp in sorted(self.qps.items())},
        }
