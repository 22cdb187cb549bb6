"""Requester task: segmentation, go-back-N retransmission and RESUME emission."""

from __future__ import annotations

import logging
from typing import List, Optional, Tuple

from verbs import (
    InflightPacket,
    QPState,
    QueuePair,
    SENDING_STATES,
    SendRequest,
    WCStatus,
    WROpcode,
    set_state,
)
from .config import DEFAULT_TRANSPORT, TransportConfig
from .packet import ENDS_MESSAGE, FLAG_ACK_REQ, Opcode, Packet, RETH, ResumeInfo
from .psn import psn_add

logger = logging.getLogger(__name__)

_OPCODES = {
    WROpcode.SEND: (Opcode.SEND_FIRST, Opcode.SEND_MIDDLE, Opcode.SEND_LAST, Opcode.SEND_ONLY),
    WROpcode.RDMA_WRITE: (Opcode.WRITE_FIRST, Opcode.WRITE_MIDDLE, Opcode.WRITE_LAST, Opcode.WRITE_ONLY),
}


def segment_count(length: int, mtu: int) -> int:
    return max(1, -(-length // mtu))


def arm_timer(qp: QueuePair, now: int) -> None:
    qp.req.timer_deadline = now + qp.retry.timeout_ticks * qp.req.backoff


def requester_step(qp: QueuePair, now: int, config: TransportConfig = DEFAULT_TRANSPORT) -> List[Packet]:
    """Emit at most one packet: a rewound retransmission first, else the next
    segment of the SR at the head of the send queue."""
    req = qp.req
    if qp.state not in SENDING_STATES or req.resume_pending or qp.partner is None:
        return []

    if req.resend_psn is not None:
        pkt = _resend_next(qp, now)
        if pkt is not None:
            return [pkt]

    if not qp.sq or len(req.inflight) >= config.max_inflight:
        return []
    if qp.state == QPState.SQD and req.sqd_drain <= 0:
        return []

    pkt = _next_segment(qp, qp.sq[0], config)
    if pkt is None:
        return []
    req.inflight.append(InflightPacket(pkt.psn, pkt.encode(), now))
    req.next_psn = psn_add(req.next_psn, 1)
    if req.timer_deadline is None:
        arm_timer(qp, now)
    return [pkt]


def plan_segment(
    sr: SendRequest, offset: int, mtu: int, config: TransportConfig = DEFAULT_TRANSPORT
) -> Tuple[Opcode, int, int, Optional[RETH]]:
    """Opcode, flags, payload length and RETH of the segment of `sr` that
    starts at byte `offset`."""
    chunk = min(mtu, sr.length - offset)
    first = offset == 0
    last = offset + chunk >= sr.length
    first_op, middle_op, last_op, only_op = _OPCODES[sr.opcode]
    if first and last:
        opcode = only_op
    elif first:
        opcode = first_op
    elif last:
        opcode = last_op
    else:
        opcode = middle_op

    flags = 0
    if last or (opcode == middle_op and (offset // mtu) % config.ack_every == 0):
        flags |= FLAG_ACK_REQ

    reth = None
    if opcode in (Opcode.WRITE_FIRST, Opcode.WRITE_ONLY):
        reth = RETH(raddr=sr.raddr, rkey=sr.rkey, dma_len=sr.length)
    return opcode, flags, chunk, reth


def _next_segment(qp: QueuePair, sr: SendRequest, config: TransportConfig) -> Optional[Packet]:
    req = qp.req
    mr = qp.ctx.mr_by_lkey(sr.lkey)
    if mr is None or not mr.contains(sr.addr, sr.length):
        # MR went away after the SR was posted
        qp.sq.popleft()
        qp.ctx.complete_send(qp, sr, WCStatus.LOC_LEN_ERR)
        set_state(qp, QPState.SQE, internal=True)
        return None

    offset = req.cur_sr_offset
    opcode, flags, chunk, reth = plan_segment(sr, offset, qp.mtu, config)
    psn = req.next_psn
    pkt = Packet(
        opcode=opcode,
        dest_qpn=qp.partner.qpn,
        psn=psn,
        flags=flags,
        payload=mr.read(sr.addr + offset, chunk),
        reth=reth,
    )

    if opcode in ENDS_MESSAGE:
        qp.sq.popleft()
        sr.last_psn = psn
        req.awaiting.append(sr)
        req.cur_sr_offset = 0
        if qp.state == QPState.SQD:
            req.sqd_drain -= 1
    else:
        req.cur_sr_offset = offset + chunk
    return pkt


def _resend_next(qp: QueuePair, now: int) -> Optional[Packet]:
    req = qp.req
    for entry in req.inflight:
        if entry.psn == req.resend_psn:
            entry.sent_at = now
            nxt = psn_add(entry.psn, 1)
            req.resend_psn = None if nxt == req.next_psn else nxt
            logger.debug(f"QP {qp.qpn:#x}: go-back-N resend psn={entry.psn}")
            return Packet.decode(entry.wire)
    req.resend_psn = None
    return None


def retransmit_on_timeout(qp: QueuePair, now: int, config: TransportConfig = DEFAULT_TRANSPORT) -> List[Packet]:
    """Resend the whole window when the retransmission timer has expired."""
    req = qp.req
    if qp.state not in SENDING_STATES or req.resume_pending:
        return []
    if req.timer_deadline is None or now < req.timer_deadline:
        return []
    if not req.inflight:
        req.timer_deadline = None
        return []

    req.retries_used += 1
    if qp.retry.max_retries is not None and req.retries_used > qp.retry.max_retries:
        retry_exceeded(qp, now)
        return []

    req.backoff = min(req.backoff * 2, config.backoff_cap)
    req.resend_psn = None
    packets = []
    for entry in req.inflight:
        entry.sent_at = now
        packets.append(Packet.decode(entry.wire))
    arm_timer(qp, now)
    logger.debug(
        f"QP {qp.qpn:#x}: timeout, resending {len(packets)} packet(s) from psn={req.first_unacked_psn} "
        f"(retry {req.retries_used})"
    )
    return packets


def retry_exceeded(qp: QueuePair, now: int) -> None:
    req = qp.req
    head = req.awaiting[0] if req.awaiting else (qp.sq[0] if qp.sq else None)
    logger.warning(f"QP {qp.qpn:#x}: retry budget of {qp.retry.max_retries} exhausted")
    if head is not None:
        if req.awaiting:
            req.awaiting.popleft()
        else:
            qp.sq.popleft()
        qp.ctx.complete_send(qp, head, WCStatus.RETRY_EXC_ERR, now=now)
    set_state(qp, QPState.ERROR, internal=True, now=now)


def resume_packet(qp: QueuePair) -> Packet:
    req = qp.req
    return Packet(
        opcode=Opcode.RESUME,
        dest_qpn=qp.partner.qpn,
        psn=req.first_unacked_psn,
        resume=ResumeInfo(
            src_gid=qp.ctx.device.address.gid,
            src_qpn=qp.qpn,
            first_unacked_psn=req.first_unacked_psn,
        ),
    )


def send_resume(qp: QueuePair, now: int, config: TransportConfig = DEFAULT_TRANSPORT) -> Packet:
    """Announce this QP's (new) location to its partner. The RESUME is resent
    every timeout_ticks until the partner acknowledges it."""
    req = qp.req
    req.resume_pending = True
    req.resume_deadline = now + qp.retry.timeout_ticks
    logger.info(f"QP {qp.qpn:#x}: RESUME to {qp.partner.address} qpn={qp.partner.qpn:#x} psn={req.first_unacked_psn}")
    return resume_packet(qp)


def on_timer(qp: QueuePair, now: int, config: TransportConfig = DEFAULT_TRANSPORT) -> List[Packet]:
    req = qp.req
    out: List[Packet] = []
    if (
        qp.state in SENDING_STATES
        and req.resume_pending
        and req.resume_deadline is not None
        and now >= req.resume_deadline
    ):
        req.resume_deadline = now + qp.retry.timeout_ticks
        logger.debug(f"QP {qp.qpn:#x}: RESUME not acknowledged, resending")
        out.append(resume_packet(qp))
    out.extend(retransmit_on_timeout(qp, now, config))
    return out


def next_deadline(qp: QueuePair) -> Optional[int]:
    """Earliest tick at which on_timer has work for this QP; None while frozen."""
    if qp.state not in SENDING_STATES:
        return None
    req = qp.req
    if req.resume_pending:
        return req.resume_deadline
    if req.inflight:
        return req.timer_deadline
    return None


def has_work(qp: QueuePair, config: TransportConfig = DEFAULT_TRANSPORT) -> bool:
    """True when requester_step would emit a packet this tick."""
    req = qp.req
    if qp.state not in SENDING_STATES or req.resume_pending or qp.partner is None:
        return False
    if req.resend_psn is not None:
        return True
    if not qp.sq or len(req.inflight) >= config.max_inflight:
        return False
    return not (qp.state == QPState.SQD and req.sqd_drain <= 0)
