"""Completer task: retires acknowledged packets, generates send completions
and reacts to NAKs."""

from __future__ import annotations

import logging
from typing import List, Optional

from verbs import QPState, QueuePair, WCStatus, set_state
from .config import DEFAULT_TRANSPORT, TransportConfig
from .packet import Opcode, Packet, Syndrome
from .psn import psn_add, psn_diff, psn_le, psn_lt
from .requester import arm_timer, retry_exceeded

logger = logging.getLogger(__name__)

_IGNORING = frozenset({QPState.RESET, QPState.INIT, QPState.RTR, QPState.ERROR, QPState.STOPPED})


def completer_handle(
    qp: QueuePair,
    ack: Packet,
    now: int,
    config: TransportConfig = DEFAULT_TRANSPORT,
    src_gid: Optional[bytes] = None,
) -> List[Packet]:
    """Process one inbound ACK/NAK. Never emits packets itself; retransmission
    is left to the requester through the resend cursor."""
    if ack.opcode != Opcode.ACK or ack.aeth is None:
        return []
    if qp.state in _IGNORING:
        return []
    if src_gid is not None and qp.partner is not None and src_gid != qp.partner.address.gid:
        logger.debug(f"QP {qp.qpn:#x}: ignoring {ack.syndrome.name} from stale location {src_gid.hex()}")
        return []

    req = qp.req
    syndrome = ack.aeth.syndrome
    if syndrome == Syndrome.NAK_STOPPED:
        if not config.migration_enabled:
            return []
        if qp.state in (QPState.RTS, QPState.SQD):
            logger.info(f"QP {qp.qpn:#x}: partner stopped, pausing")
            set_state(qp, QPState.PAUSED, internal=True, now=now)
        return []

    resume_reply = req.resume_pending
    if resume_reply:
        req.resume_pending = False
        req.resume_deadline = None

    match syndrome:
        case Syndrome.ACK_OK:
            _retire(qp, ack.psn, now)
            if resume_reply:
                logger.info(f"QP {qp.qpn:#x}: RESUME acknowledged at psn={ack.psn}")
                if req.inflight:
                    req.resend_psn = req.first_unacked_psn
                    arm_timer(qp, now)
        case Syndrome.NAK_PSN_SEQ:
            _retire(qp, psn_add(ack.psn, -1), now)
            if req.inflight and ack.psn == req.first_unacked_psn:
                req.retries_used += 1
                if qp.retry.max_retries is not None and req.retries_used > qp.retry.max_retries:
                    retry_exceeded(qp, now)
                    return []
                req.resend_psn = req.first_unacked_psn
                arm_timer(qp, now)
        case Syndrome.NAK_REM_ACCESS | Syndrome.NAK_REM_OP:
            _retire(qp, psn_add(ack.psn, -1), now)
            _fail_head(qp, now)
    return []


def _retire(qp: QueuePair, psn: int, now: int) -> None:
    """Cumulatively acknowledge everything up to and including `psn`."""
    req = qp.req
    if psn_lt(psn, req.first_unacked_psn) or psn_diff(psn, req.next_psn) >= 0:
        return
    req.inflight = [p for p in req.inflight if not psn_le(p.psn, psn)]
    req.first_unacked_psn = psn_add(psn, 1)
    req.retries_used = 0
    req.backoff = 1
    if req.resend_psn is not None and psn_le(req.resend_psn, psn):
        req.resend_psn = req.first_unacked_psn if req.inflight else None

    while req.awaiting and psn_le(req.awaiting[0].last_psn, psn):
        sr = req.awaiting.popleft()
        qp.ctx.complete_send(qp, sr, WCStatus.SUCCESS, now=now)

    if req.inflight:
        arm_timer(qp, now)
    else:
        req.timer_deadline = None


def _fail_head(qp: QueuePair, now: int) -> None:
    req = qp.req
    if req.awaiting:
        sr = req.awaiting.popleft()
    elif qp.sq:
        sr = qp.sq.popleft()
    else:
        return
    logger.warning(f"QP {qp.qpn:#x}: remote error on wr_id={sr.wr_id}")
    qp.ctx.complete_send(qp, sr, WCStatus.REM_ACCESS_ERR, now=now)
    set_state(qp, QPState.SQE, internal=True, now=now)
