from __future__ import annotations

import logging
from typing import Optional

from common.errors import ImageError, StateError
from verbs import QPState, QueuePair, VerbsContext, set_state
from .image import (
    CQRecord,
    DumpImage,
    MRRecord,
    PDRecord,
    QPRecord,
    RequesterRecord,
    ResponderRecord,
    SRQRecord,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIX = ".mgrd"


def _copy(obj):
    return type(obj)(**vars(obj))


def qp_record(qp: QueuePair, state: Optional[QPState] = None) -> QPRecord:
    req, rsp = qp.req, qp.rsp
    return QPRecord(
        qpn=qp.qpn,
        pd=qp.pd_handle,
        send_cq=qp.send_cq,
        recv_cq=qp.recv_cq,
        srq=qp.srq_handle,
        max_send_wr=qp.caps.max_send_wr,
        max_recv_wr=qp.caps.max_recv_wr,
        state=qp.state if state is None else state,
        partner_gid=qp.partner.address.gid if qp.partner else None,
        partner_qpn=qp.partner.qpn if qp.partner else 0,
        mtu=qp.mtu,
        timeout_ticks=qp.retry.timeout_ticks,
        max_retries=qp.retry.max_retries,
        sq=[_copy(sr) for sr in qp.sq],
        rq=[_copy(rr) for rr in qp.rq],
        req=RequesterRecord(
            next_psn=req.next_psn,
            first_unacked_psn=req.first_unacked_psn,
            cur_sr_offset=req.cur_sr_offset,
            inflight=[(p.psn, p.sent_at, p.wire) for p in req.inflight],
            awaiting=[_copy(sr) for sr in req.awaiting],
            resend_psn=req.resend_psn,
            retries_used=req.retries_used,
            backoff=req.backoff,
            sqd_drain=req.sqd_drain,
        ),
        rsp=ResponderRecord(
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
        ),
    )


def dump_context(ctx: VerbsContext) -> DumpImage:
    """Stop every QP of `ctx`, then serialize all of its objects.

    Runs inside a single scheduler tick, so no packet reaches the context
    between the first and the last record. The stopped QPs stay behind
    (answering NAK_STOPPED) until the context is destroyed.
    """
    if ctx.frozen:
        raise StateError(f"context {ctx.ctx_id} on {ctx.device.name} is already checkpointed")

    states = {}
    for qpn in sorted(ctx.qps):
        qp = ctx.qps[qpn]
        states[qpn] = qp.state
        set_state(qp, QPState.STOPPED, internal=True)
    ctx.frozen = True

    image = DumpImage(node_gid=ctx.device.address.gid)
    image.records.extend(PDRecord(h) for h in sorted(ctx.pds))
    for mrn in sorted(ctx.mrs):
        mr = ctx.mrs[mrn]
        image.records.append(
            MRRecord(mr.mrn, mr.pd_handle, mr.lkey, mr.rkey, mr.base, mr.length, mr.access, bytes(mr.buffer))
        )
    for h in sorted(ctx.cqs):
        cq = ctx.cqs[h]
        image.records.append(CQRecord(h, cq.depth, cq.head, cq.tail, cq.overrun, [_copy(wc) for wc in cq.ring]))
    for h in sorted(ctx.srqs):
        srq = ctx.srqs[h]
        image.records.append(SRQRecord(h, srq.pd_handle, srq.depth, [_copy(rr) for rr in srq.ring]))
    for qpn in sorted(ctx.qps):
        image.records.append(qp_record(ctx.qps[qpn], states[qpn]))

    logger.info(
        f"{ctx.device.name}: dumped context {ctx.ctx_id} ({image.object_count} objects, "
        f"{len(states)} QP(s) stopped)"
    )
    return image


def dump_context_to_file(ctx: VerbsContext, path: str) -> DumpImage:
    if not path.endswith(IMAGE_SUFFIX):
        path += IMAGE_SUFFIX
    image = dump_context(ctx)
    with open(path, "wb") as fh:
        fh.write(image.encode())
    return image


def load_image(path: str) -> DumpImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise ImageError(f"cannot read {path}: {e}") from e
    return DumpImage.decode(data)
