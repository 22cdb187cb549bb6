"""Responder task: in-order delivery into receive buffers and RDMA WRITE
targets, cumulative ACKs, and the migration handshake (NAK_STOPPED, RESUME)."""

from __future__ import annotations

import logging
from typing import List, Optional

from verbs import NodeAddress, Partner, QPState, QueuePair, ReceiveRequest, SENDING_STATES, Access, WCStatus, set_state
from .config import DEFAULT_TRANSPORT, TransportConfig
from .packet import ENDS_MESSAGE, SEND_OPCODES, STARTS_MESSAGE, Opcode, Packet, Syndrome, make_ack
from .psn import psn_add, psn_diff
from .requester import arm_timer, resume_packet

logger = logging.getLogger(__name__)

# states whose responder accepts inbound data
_RECEIVING = frozenset({QPState.RTR, QPState.RTS, QPState.SQD, QPState.SQE, QPState.PAUSED})


def responder_handle(
    qp: QueuePair, pkt: Packet, now: int, config: TransportConfig = DEFAULT_TRANSPORT
) -> List[Packet]:
    """Process one inbound data or RESUME packet; returns the replies."""
    if pkt.opcode == Opcode.RESUME:
        return handle_resume(qp, pkt, now, config)

    rsp = qp.rsp
    if qp.state == QPState.STOPPED:
        if not config.migration_enabled or qp.partner is None:
            return []
        return [make_ack(qp.partner.qpn, pkt.psn, Syndrome.NAK_STOPPED, rsp.msn)]
    if qp.state not in _RECEIVING or qp.partner is None:
        logger.debug(f"QP {qp.qpn:#x}: dropping psn={pkt.psn} in state {qp.state.name}")
        return []

    d = psn_diff(pkt.psn, rsp.expected_psn)
    if d < 0:
        return [_ack(qp, psn_add(rsp.expected_psn, -1), Syndrome.ACK_OK)]
    if d > 0:
        if rsp.nak_latched:
            return []
        rsp.nak_latched = True
        logger.debug(f"QP {qp.qpn:#x}: psn={pkt.psn} ahead of expected={rsp.expected_psn}, NAK")
        return [_ack(qp, rsp.expected_psn, Syndrome.NAK_PSN_SEQ)]

    if rsp.sink:
        # remainder of a message that already failed
        rsp.nak_latched = False
        rsp.expected_psn = psn_add(rsp.expected_psn, 1)
        if pkt.opcode in ENDS_MESSAGE:
            rsp.sink = False
        return []

    if pkt.opcode in SEND_OPCODES:
        return _receive_send(qp, pkt, now)
    return _receive_write(qp, pkt, now)


def _ack(qp: QueuePair, psn: int, syndrome: Syndrome) -> Packet:
    return make_ack(qp.partner.qpn, psn, syndrome, qp.rsp.msn)


def _take_receive(qp: QueuePair) -> Optional[ReceiveRequest]:
    if qp.srq_handle is not None:
        srq = qp.ctx.srqs.get(qp.srq_handle)
        return srq.ring.popleft() if srq is not None and srq.ring else None
    return qp.rq.popleft() if qp.rq else None


def _advance(qp: QueuePair, pkt: Packet) -> List[Packet]:
    rsp = qp.rsp
    rsp.nak_latched = False
    rsp.expected_psn = psn_add(rsp.expected_psn, 1)
    if pkt.opcode in ENDS_MESSAGE:
        rsp.msn = (rsp.msn + 1) & 0xFFFFFF
    if pkt.opcode in ENDS_MESSAGE or pkt.ack_requested:
        return [_ack(qp, pkt.psn, Syndrome.ACK_OK)]
    return []


def _fail_message(qp: QueuePair, pkt: Packet, syndrome: Syndrome) -> List[Packet]:
    """Consume `pkt`, discard the rest of its message and NAK it."""
    rsp = qp.rsp
    rsp.nak_latched = False
    rsp.expected_psn = psn_add(rsp.expected_psn, 1)
    rsp.sink = pkt.opcode not in ENDS_MESSAGE
    return [_ack(qp, pkt.psn, syndrome)]


def _receive_send(qp: QueuePair, pkt: Packet, now: int) -> List[Packet]:
    rsp = qp.rsp
    if pkt.opcode in STARTS_MESSAGE:
        if rsp.cur_rr is None:
            rr = _take_receive(qp)
            if rr is None:
                # RNR: nothing consumed, the requester's timer resends later
                logger.debug(f"QP {qp.qpn:#x}: no receive posted for psn={pkt.psn}, dropped")
                return []
            rsp.cur_rr = rr
            rsp.cur_rr_offset = 0
        else:
            return _fail_message(qp, pkt, Syndrome.NAK_REM_OP)
    elif rsp.cur_rr is None:
        return _fail_message(qp, pkt, Syndrome.NAK_REM_OP)

    rr = rsp.cur_rr
    if rsp.cur_rr_offset + len(pkt.payload) > rr.max_len:
        logger.info(f"QP {qp.qpn:#x}: message exceeds receive buffer wr_id={rr.wr_id} ({rr.max_len} bytes)")
        qp.ctx.complete_recv(qp, rr, WCStatus.LOC_LEN_ERR, 0, now=now)
        rsp.cur_rr = None
        rsp.cur_rr_offset = 0
        return _fail_message(qp, pkt, Syndrome.NAK_REM_OP)

    mr = qp.ctx.mr_by_lkey(rr.lkey)
    if mr is None:
        qp.ctx.complete_recv(qp, rr, WCStatus.LOC_PROT_ERR, 0, now=now)
        rsp.cur_rr = None
        rsp.cur_rr_offset = 0
        return _fail_message(qp, pkt, Syndrome.NAK_REM_OP)
    mr.write(rr.addr + rsp.cur_rr_offset, pkt.payload)
    rsp.cur_rr_offset += len(pkt.payload)

    if pkt.opcode in ENDS_MESSAGE:
        qp.ctx.complete_recv(qp, rr, WCStatus.SUCCESS, rsp.cur_rr_offset, now=now)
        rsp.cur_rr = None
        rsp.cur_rr_offset = 0
    return _advance(qp, pkt)


def _remote_access_error(qp: QueuePair, pkt: Packet, now: int) -> List[Packet]:
    logger.warning(f"QP {qp.qpn:#x}: remote access violation at psn={pkt.psn}")
    reply = _ack(qp, pkt.psn, Syndrome.NAK_REM_ACCESS)
    qp.rsp.write_active = False
    set_state(qp, QPState.ERROR, internal=True, now=now)
    return [reply]


def _receive_write(qp: QueuePair, pkt: Packet, now: int) -> List[Packet]:
    rsp = qp.rsp
    ctx = qp.ctx
    if pkt.opcode in STARTS_MESSAGE:
        reth = pkt.reth
        mr = ctx.mr_by_rkey(reth.rkey)
        if (
            mr is None
            or mr.pd_handle != qp.pd_handle
            or not mr.access & Access.REMOTE_WRITE
            or not mr.contains(reth.raddr, reth.dma_len)
        ):
            return _remote_access_error(qp, pkt, now)
        rsp.write_active = True
        rsp.write_va = reth.raddr
        rsp.write_rkey = reth.rkey
        rsp.write_remaining = reth.dma_len
    elif not rsp.write_active:
        return _fail_message(qp, pkt, Syndrome.NAK_REM_OP)

    mr = ctx.mr_by_rkey(rsp.write_rkey)
    if mr is None or len(pkt.payload) > rsp.write_remaining:
        return _remote_access_error(qp, pkt, now)
    mr.write(rsp.write_va, pkt.payload)
    rsp.write_va += len(pkt.payload)
    rsp.write_remaining -= len(pkt.payload)
    if pkt.opcode in ENDS_MESSAGE:
        rsp.write_active = False
    return _advance(qp, pkt)


def handle_resume(qp: QueuePair, pkt: Packet, now: int, config: TransportConfig = DEFAULT_TRANSPORT) -> List[Packet]:
    """A migrated partner announces its new location.

    Replies go to the RESUME's source. A Stopped QP answers NAK_STOPPED; any
    other live QP adopts the new partner, leaves Paused and acknowledges with
    its cumulative expected PSN. A QP that is itself waiting for a RESUME
    reply re-announces itself to the new location.
    """
    if not config.migration_enabled or pkt.resume is None:
        return []
    info = pkt.resume
    rsp = qp.rsp
    if qp.state == QPState.STOPPED:
        return [make_ack(info.src_qpn, pkt.psn, Syndrome.NAK_STOPPED, rsp.msn)]
    if qp.state in (QPState.RESET, QPState.INIT, QPState.ERROR):
        return []

    qp.partner = Partner(NodeAddress.from_gid(info.src_gid), info.src_qpn)
    logger.info(f"QP {qp.qpn:#x}: partner moved to {qp.partner.address} qpn={info.src_qpn:#x}")

    req = qp.req
    if qp.state == QPState.PAUSED:
        set_state(qp, QPState.RTS, internal=True, now=now)
        if req.inflight:
            req.resend_psn = req.first_unacked_psn
            arm_timer(qp, now)

    out = [make_ack(info.src_qpn, psn_add(rsp.expected_psn, -1), Syndrome.ACK_OK, rsp.msn)]
    if req.resume_pending and qp.state in SENDING_STATES:
        req.resume_deadline = now + qp.retry.timeout_ticks
        out.append(resume_packet(qp))
    return out
