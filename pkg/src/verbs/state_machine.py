"""QP state diagram: user-controlled edges plus the internal edges taken by
the transport (pause/resume, send errors) and by checkpointing (stop)."""

import logging
from typing import FrozenSet, Optional, Tuple

from common.errors import StateError
from .objects import QPState, QueuePair, WCStatus

logger = logging.getLogger(__name__)

_ALL = tuple(QPState)

USER_EDGES: FrozenSet[Tuple[QPState, QPState]] = frozenset(
    {
        (QPState.RESET, QPState.INIT),
        (QPState.INIT, QPState.RTR),
        (QPState.RTR, QPState.RTS),
        (QPState.RTS, QPState.SQD),
        (QPState.SQD, QPState.RTS),
        (QPState.SQE, QPState.RTS),
    }
    | {(s, QPState.ERROR) for s in _ALL}
    | {(s, QPState.RESET) for s in _ALL}
)

INTERNAL_EDGES: FrozenSet[Tuple[QPState, QPState]] = frozenset(
    {
        (QPState.RTS, QPState.PAUSED),
        (QPState.SQD, QPState.PAUSED),
        (QPState.PAUSED, QPState.RTS),
        (QPState.RTS, QPState.SQE),
        (QPState.SQD, QPState.SQE),
        (QPState.PAUSED, QPState.SQE),
    }
    | {(s, QPState.STOPPED) for s in _ALL if s != QPState.STOPPED}
    | {(s, QPState.ERROR) for s in _ALL}
)

ALLOWED_EDGES = USER_EDGES | INTERNAL_EDGES

# states in which the requester may put packets on the wire
SENDING_STATES = frozenset({QPState.RTS, QPState.SQD})
# states in which post_send / post_recv are refused
CLOSED_STATES = frozenset({QPState.RESET, QPState.ERROR})


def set_state(qp: QueuePair, target: QPState, internal: bool = False, now: Optional[int] = None) -> None:
    """Move `qp` to `target`, applying the entry actions of the new state.

    User transitions are checked against USER_EDGES; internal ones against
    INTERNAL_EDGES. Any other edge raises StateError.
    """
    source = qp.state
    edges = INTERNAL_EDGES if internal else USER_EDGES
    if (source, target) not in edges:
        raise StateError(f"QP {qp.qpn:#x}: illegal transition {source.name} -> {target.name}")

    qp._state = target
    qp.transitions.append((source, target))
    logger.debug(f"QP {qp.qpn:#x}: {source.name} -> {target.name}")

    if target == QPState.RESET:
        qp.reset_queues()
        qp.partner = None
    elif target == QPState.ERROR:
        _flush_sends(qp, now)
        _flush_recvs(qp, now)
    elif target == QPState.SQE:
        _flush_sends(qp, now)
    elif target == QPState.SQD:
        qp.req.sqd_drain = len(qp.sq)


def _flush_sends(qp: QueuePair, now: Optional[int]) -> None:
    req = qp.req
    pending = list(req.awaiting) + list(qp.sq)
    req.awaiting.clear()
    qp.sq.clear()
    req.inflight.clear()
    req.cur_sr_offset = 0
    req.resend_psn = None
    req.first_unacked_psn = req.next_psn
    req.timer_deadline = None
    req.resume_pending = False
    req.resume_deadline = None
    for sr in pending:
        qp.ctx.complete_send(qp, sr, WCStatus.WR_FLUSH_ERR, now=now)


def _flush_recvs(qp: QueuePair, now: Optional[int]) -> None:
    rsp = qp.rsp
    pending = []
    if rsp.cur_rr is not None:
        pending.append(rsp.cur_rr)
        rsp.cur_rr = None
        rsp.cur_rr_offset = 0
    pending.extend(qp.rq)
    qp.rq.clear()
    for rr in pending:
        qp.ctx.complete_recv(qp, rr, WCStatus.WR_FLUSH_ERR, 0, now=now)
