"""Staged restore: CREATE every object with its original identifiers, walk
QPs through Init/RTR/RTS, SET_MR_KEYS, then REFILL the transport state of
each sending QP, which announces the new location with a RESUME."""

from __future__ import annotations

import logging
from collections import deque
from enum import Enum
from typing import List, Optional, Tuple

from common.errors import CollisionError, ImageError, MigrsimError, StateError, ArgumentError
from transport import send_resume
from verbs import (
    Device,
    InflightPacket,
    NodeAddress,
    Partner,
    QPCaps,
    QPState,
    QueuePair,
    RequesterState,
    ResponderState,
    RetryConfig,
    VerbsContext,
    set_state,
)
from .image import (
    CQRecord,
    DumpImage,
    MRRecord,
    PDRecord,
    QPRecord,
    RecordType,
    RequesterRecord,
    ResponderRecord,
    SRQRecord,
)

logger = logging.getLogger(__name__)


class RestoreCommand(Enum):
    CREATE = "create"
    SET_MR_KEYS = "set_mr_keys"
    REFILL = "refill"


# dumped states whose QP is brought back to RTS and refilled
REFILL_STATES = frozenset({QPState.RTS, QPState.SQD, QPState.SQE, QPState.PAUSED})


def _copy(obj):
    return type(obj)(**vars(obj))


def install_task_state(qp: QueuePair, req: RequesterRecord, rsp: ResponderRecord) -> None:
    """Overwrite the requester/responder task state of `qp` with dumped values."""
    qp.req = RequesterState(
        next_psn=req.next_psn,
        first_unacked_psn=req.first_unacked_psn,
        inflight=[InflightPacket(psn, bytes(wire), sent_at) for psn, sent_at, wire in req.inflight],
        cur_sr_offset=req.cur_sr_offset,
        awaiting=deque(_copy(sr) for sr in req.awaiting),
        resend_psn=req.resend_psn,
        retries_used=req.retries_used,
        backoff=req.backoff,
        sqd_drain=req.sqd_drain,
    )
    qp.rsp = ResponderState(
        expected_psn=rsp.expected_psn,
        cur_rr_offset=rsp.cur_rr_offset,
        msn=rsp.msn,
        cur_rr=_copy(rsp.cur_rr) if rsp.cur_rr else None,
        nak_latched=rsp.nak_latched,
        sink=rsp.sink,
        write_active=rsp.write_active,
        write_va=rsp.write_va,
        write_rkey=rsp.write_rkey,
        write_remaining=rsp.write_remaining,
    )


def _create_mr(ctx: VerbsContext, rec: MRRecord):
    ctx.device.steer_mrn(rec.mrn)
    mr = ctx.reg_mr(rec.pd, rec.base, rec.length, rec.access)
    if mr.mrn != rec.mrn:
        ctx.dereg_mr(mr)
        raise CollisionError("MRN", rec.mrn, mr.mrn)
    mr.buffer[:] = rec.buffer
    return mr


def _create_cq(ctx: VerbsContext, rec: CQRecord):
    cq = ctx.create_cq(rec.depth, handle=rec.handle)
    cq.ring.extend(_copy(wc) for wc in rec.ring)
    cq.head, cq.tail, cq.overrun = rec.head, rec.tail, rec.overrun
    return cq


def _create_srq(ctx: VerbsContext, rec: SRQRecord):
    srq = ctx.create_srq(rec.pd, rec.depth, handle=rec.handle)
    srq.ring.extend(_copy(rr) for rr in rec.ring)
    return srq


def _create_qp(ctx: VerbsContext, rec: QPRecord) -> QueuePair:
    ctx.device.steer_qpn(rec.qpn)
    qp = ctx.create_qp(rec.pd, rec.send_cq, rec.recv_cq, rec.srq, QPCaps(rec.max_send_wr, rec.max_recv_wr))
    if qp.qpn != rec.qpn:
        ctx.destroy_qp(qp)
        raise CollisionError("QPN", rec.qpn, qp.qpn)
    return qp


def walk_qp(ctx: VerbsContext, qp: QueuePair, rec: QPRecord) -> None:
    """Progress a freshly created QP through the states its dump requires,
    then put its queue contents back."""
    partner = None
    if rec.partner_gid is not None:
        partner = Partner(NodeAddress.from_gid(rec.partner_gid), rec.partner_qpn)
    retry = RetryConfig(rec.timeout_ticks, rec.max_retries)

    match rec.state:
        case QPState.RESET:
            pass
        case QPState.ERROR:
            set_state(qp, QPState.ERROR)
        case QPState.INIT:
            ctx.modify_qp(qp, QPState.INIT)
        case QPState.RTR | QPState.RTS | QPState.SQD | QPState.SQE | QPState.PAUSED:
            if partner is None:
                raise ImageError(f"QP {rec.qpn:#x} in {rec.state.name} has no partner")
            ctx.modify_qp(qp, QPState.INIT)
            ctx.modify_qp(qp, QPState.RTR, partner=partner, mtu=rec.mtu, expected_psn=rec.rsp.expected_psn)
            if rec.state != QPState.RTR:
                ctx.modify_qp(qp, QPState.RTS, next_psn=rec.req.next_psn, retry=retry)
        case _:
            raise ImageError(f"QP {rec.qpn:#x} was dumped in state {rec.state.name}")

    qp.partner = partner
    qp.mtu = rec.mtu
    qp.retry = retry
    qp.sq.extend(_copy(sr) for sr in rec.sq)
    qp.rq.extend(_copy(rr) for rr in rec.rq)


def refill(qp: QueuePair, rec: QPRecord, now: Optional[int] = None) -> None:
    if qp.state != QPState.RTS:
        raise StateError(f"REFILL on QP {qp.qpn:#x} in {qp.state.name}, expected RTS")
    now = qp.ctx.device.clock() if now is None else now
    install_task_state(qp, rec.req, rec.rsp)
    qp.ctx.device.transmit(qp, qp.partner.address, send_resume(qp, now))

    match rec.state:
        case QPState.SQD:
            set_state(qp, QPState.SQD, now=now)
            qp.req.sqd_drain = rec.req.sqd_drain
        case QPState.SQE:
            set_state(qp, QPState.SQE, internal=True, now=now)


def restore_object(ctx: VerbsContext, kind: RecordType, cmd: RestoreCommand, args, now: Optional[int] = None):
    """Execute one restore command against `ctx`; `args` is the decoded record."""
    match (kind, cmd):
        case (RecordType.PD, RestoreCommand.CREATE):
            return ctx.alloc_pd(args.handle)
        case (RecordType.MR, RestoreCommand.CREATE):
            return _create_mr(ctx, args)
        case (RecordType.MR, RestoreCommand.SET_MR_KEYS):
            mr = ctx.mrs.get(args.mrn)
            if mr is None:
                raise StateError(f"SET_MR_KEYS before MR {args.mrn:#x} was created")
            ctx.set_mr_keys(mr, args.lkey, args.rkey)
            return mr
        case (RecordType.CQ, RestoreCommand.CREATE):
            return _create_cq(ctx, args)
        case (RecordType.SRQ, RestoreCommand.CREATE):
            return _create_srq(ctx, args)
        case (RecordType.QP, RestoreCommand.CREATE):
            return _create_qp(ctx, args)
        case (RecordType.QP, RestoreCommand.REFILL):
            qp = ctx.qp(args.qpn)
            refill(qp, args, now)
            return qp
    raise ArgumentError(f"{cmd.name} does not apply to {kind.name}")


def restore_context(
    device: Device, ctx_id: int, image: DumpImage
) -> Tuple[VerbsContext, List[Tuple[QueuePair, QPRecord]]]:
    """Recreate a dumped context on `device` up to, but not including, REFILL.

    Returns the context and the (QP, record) pairs still waiting for REFILL.
    On any failure the partially restored context is destroyed and the error
    re-raised.
    """
    ctx = device.open_context(ctx_id)
    try:
        for rec in image.records:
            kind = _kind(rec)
            obj = restore_object(ctx, kind, RestoreCommand.CREATE, rec)
            if kind == RecordType.QP:
                walk_qp(ctx, obj, rec)
        for rec in image.of_type(RecordType.MR):
            restore_object(ctx, RecordType.MR, RestoreCommand.SET_MR_KEYS, rec)

        pending: List[Tuple[QueuePair, QPRecord]] = []
        for rec in image.of_type(RecordType.QP):
            qp = ctx.qp(rec.qpn)
            if rec.state in REFILL_STATES:
                pending.append((qp, rec))
            elif rec.state != QPState.ERROR:
                install_task_state(qp, rec.req, rec.rsp)
    except MigrsimError:
        ctx.close()
        raise
    logger.info(f"{device.name}: restored context {ctx_id} ({image.object_count} objects)")
    return ctx, pending


def _kind(rec) -> RecordType:
    match rec:
        case PDRecord():
            return RecordType.PD
        case MRRecord():
            return RecordType.MR
        case CQRecord():
            return RecordType.CQ
        case SRQRecord():
            return RecordType.SRQ
        case QPRecord():
            return RecordType.QP
    raise ImageError(f"unknown record {type(rec).__name__}")
