"""Tests for the verbs layer: identifier assignment, the QP state diagram,
work request validation, flushing and teardown.

No network is attached; devices keep their transmitted packets in an outbox.
"""

from __future__ import annotations

import pytest

from common.errors import ArgumentError, ResourceError, StateError
from common.prng import XorShift64Star
from verbs import (
    ALLOWED_EDGES,
    INTERNAL_EDGES,
    USER_EDGES,
    Access,
    Device,
    DeviceConfig,
    NodeAddress,
    Partner,
    QPCaps,
    QPState,
    ReceiveRequest,
    SendRequest,
    WCOpcode,
    WCStatus,
    WROpcode,
    set_state,
)


def _device(guid: int = 1, config: DeviceConfig | None = None) -> Device:
    return Device(f"n{guid}", NodeAddress.from_guid(guid), config)


def _setup(depth: int = 16, caps: QPCaps | None = None):
    dev = _device()
    ctx = dev.open_context(1)
    pd = ctx.alloc_pd()
    cq = ctx.create_cq(depth)
    mr = ctx.reg_mr(pd, 0x1000, 8192, Access.LOCAL_WRITE)
    qp = ctx.create_qp(pd, cq, cq, caps=caps)
    return dev, ctx, pd, cq, mr, qp


def _connect(ctx, qp, peer_qpn: int = 0x99) -> None:
    ctx.modify_qp(qp, QPState.INIT)
    ctx.modify_qp(qp, QPState.RTR, partner=Partner(NodeAddress.from_guid(2), peer_qpn), expected_psn=0)
    ctx.modify_qp(qp, QPState.RTS, next_psn=0)


# ── identifiers ──────────────────────────────────────────────────────


def test_qpns_are_assigned_sequentially_from_the_low_end() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    second = ctx.create_qp(pd, cq, cq)

    assert qp.qpn == 0x10
    assert second.qpn == 0x11
    assert dev.qps[0x11] is second


def test_partitioned_devices_start_in_their_own_slice() -> None:
    dev = _device(2, DeviceConfig.partitioned(2))
    ctx = dev.open_context(1)
    pd = ctx.alloc_pd()
    cq = ctx.create_cq(4)

    qp = ctx.create_qp(pd, cq, cq)
    mr = ctx.reg_mr(pd, 0, 64)

    assert qp.qpn == 0x10 + 2 * (1 << 16)
    assert mr.mrn == 1 + 2 * (1 << 16)


def test_steer_qpn_makes_the_next_assignment_hit_the_wanted_value() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    dev.steer_qpn(0x4242)

    assert ctx.create_qp(pd, cq, cq).qpn == 0x4242


def test_steered_qpn_that_is_taken_moves_on_to_the_next_free_one() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    dev.steer_qpn(qp.qpn)

    assert ctx.create_qp(pd, cq, cq).qpn == qp.qpn + 1


def test_exhausted_qpn_range_raises_resource_error() -> None:
    dev = _device(config=DeviceConfig(qpn_range=(0x10, 0x12)))
    ctx = dev.open_context(1)
    pd = ctx.alloc_pd()
    cq = ctx.create_cq(4)
    ctx.create_qp(pd, cq, cq)
    ctx.create_qp(pd, cq, cq)

    with pytest.raises(ResourceError):
        ctx.create_qp(pd, cq, cq)


def test_mr_keys_are_nonzero_and_distinct() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    others = [ctx.reg_mr(pd, 0x10000 * i, 4096) for i in range(1, 20)]

    lkeys = [m.lkey for m in [mr] + others]
    rkeys = [m.rkey for m in [mr] + others]
    assert 0 not in lkeys + rkeys
    assert len(set(lkeys)) == len(lkeys)
    assert len(set(rkeys)) == len(rkeys)


def test_same_key_seed_and_guid_give_the_same_keys() -> None:
    a = _device(7, DeviceConfig(key_seed=3))
    b = _device(7, DeviceConfig(key_seed=3))

    assert [a.new_key() for _ in range(5)] == [b.new_key() for _ in range(5)]


def test_handles_cannot_be_reused_while_in_use() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()

    with pytest.raises(ArgumentError):
        ctx.create_cq(4, handle=cq.handle)


# ── state diagram ────────────────────────────────────────────────────


def test_connect_walks_reset_init_rtr_rts() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)

    assert qp.state == QPState.RTS
    assert [t for _, t in qp.transitions] == [QPState.INIT, QPState.RTR, QPState.RTS]


def test_skipping_states_is_rejected() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()

    with pytest.raises(StateError):
        ctx.modify_qp(qp, QPState.RTS, next_psn=0)


def test_rtr_requires_partner_and_expected_psn() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    ctx.modify_qp(qp, QPState.INIT)

    with pytest.raises(ArgumentError):
        ctx.modify_qp(qp, QPState.RTR, expected_psn=0)


@pytest.mark.parametrize("target", [QPState.STOPPED, QPState.PAUSED])
def test_migration_states_are_not_user_reachable(target: QPState) -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)

    with pytest.raises(StateError):
        ctx.modify_qp(qp, target)


def test_unsupported_mtu_is_rejected() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    ctx.modify_qp(qp, QPState.INIT)

    with pytest.raises(ArgumentError):
        ctx.modify_qp(qp, QPState.RTR, partner=Partner(NodeAddress.from_guid(2), 1), expected_psn=0, mtu=1000)


def test_sqe_returns_to_rts_on_user_request() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)
    set_state(qp, QPState.SQE, internal=True)

    ctx.modify_qp(qp, QPState.RTS)

    assert qp.state == QPState.RTS


def test_rtr_to_rts_sets_send_psns() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    ctx.modify_qp(qp, QPState.INIT)
    ctx.modify_qp(qp, QPState.RTR, partner=Partner(NodeAddress.from_guid(2), 1), expected_psn=77)
    ctx.modify_qp(qp, QPState.RTS, next_psn=(1 << 24) + 5)

    assert qp.rsp.expected_psn == 77
    assert qp.req.next_psn == 5
    assert qp.req.first_unacked_psn == 5


@pytest.mark.parametrize("seed", range(10))
def test_random_transitions_stay_on_the_state_diagram(seed: int) -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    rng = XorShift64Star(seed)
    states = list(QPState)
    partner = Partner(NodeAddress.from_guid(2), 0x99)

    for _ in range(300):
        target = states[rng.next_u32() % len(states)]
        internal = rng.chance(0.3)
        before = qp.state
        legal = (before, target) in (INTERNAL_EDGES if internal else USER_EDGES)
        try:
            if internal:
                set_state(qp, target, internal=True)
            else:
                ctx.modify_qp(qp, target, partner=partner, expected_psn=0, next_psn=0)
        except StateError:
            assert not legal
            assert qp.state == before
        else:
            assert legal
            assert qp.state == target

    assert qp.transitions[0][0] == QPState.RESET
    assert all(edge in ALLOWED_EDGES for edge in qp.transitions)
    for (_, reached), (left, _) in zip(qp.transitions, qp.transitions[1:]):
        assert reached == left


# ── work requests ────────────────────────────────────────────────────


def test_post_send_in_reset_raises() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    sr = SendRequest(1, WROpcode.SEND, mr.lkey, 0x1000, 100)

    with pytest.raises(StateError):
        ctx.post_send(qp, sr)


def test_post_send_beyond_max_send_wr_raises() -> None:
    dev, ctx, pd, cq, mr, qp = _setup(caps=QPCaps(max_send_wr=2, max_recv_wr=2))
    _connect(ctx, qp)
    for i in range(2):
        ctx.post_send(qp, SendRequest(i, WROpcode.SEND, mr.lkey, 0x1000, 10))

    with pytest.raises(ResourceError):
        ctx.post_send(qp, SendRequest(9, WROpcode.SEND, mr.lkey, 0x1000, 10))


def test_post_recv_beyond_max_recv_wr_raises() -> None:
    dev, ctx, pd, cq, mr, qp = _setup(caps=QPCaps(max_send_wr=2, max_recv_wr=1))
    ctx.modify_qp(qp, QPState.INIT)
    ctx.post_recv(qp, ReceiveRequest(1, mr.lkey, 0x1000, 100))

    with pytest.raises(ResourceError):
        ctx.post_recv(qp, ReceiveRequest(2, mr.lkey, 0x1000, 100))


def test_unknown_lkey_completes_with_loc_len_err_and_moves_to_sqe() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)

    ctx.post_send(qp, SendRequest(5, WROpcode.SEND, mr.lkey ^ 0xFFFF, 0x1000, 100))

    [wc] = ctx.poll_cq(cq, 8)
    assert (wc.wr_id, wc.status, wc.opcode) == (5, WCStatus.LOC_LEN_ERR, WCOpcode.SEND)
    assert qp.state == QPState.SQE


def test_out_of_bounds_sge_completes_with_loc_len_err() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)

    ctx.post_send(qp, SendRequest(5, WROpcode.SEND, mr.lkey, 0x1000 + 8000, 500))

    assert ctx.poll_cq(cq, 8)[0].status == WCStatus.LOC_LEN_ERR


def test_lkey_of_another_pd_completes_with_loc_prot_err() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)
    other_pd = ctx.alloc_pd()
    foreign = ctx.reg_mr(other_pd, 0x20000, 4096)

    ctx.post_send(qp, SendRequest(5, WROpcode.SEND, foreign.lkey, 0x20000, 100))

    assert ctx.poll_cq(cq, 8)[0].status == WCStatus.LOC_PROT_ERR
    assert qp.state == QPState.SQE


def test_post_send_in_sqe_is_flushed_immediately() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)
    set_state(qp, QPState.SQE, internal=True)

    ctx.post_send(qp, SendRequest(3, WROpcode.SEND, mr.lkey, 0x1000, 10))

    assert ctx.poll_cq(cq, 8)[0].status == WCStatus.WR_FLUSH_ERR


def test_receive_buffer_without_local_write_is_rejected() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    ro = ctx.reg_mr(pd, 0x40000, 4096, Access.NONE)
    ctx.modify_qp(qp, QPState.INIT)

    with pytest.raises(ArgumentError):
        ctx.post_recv(qp, ReceiveRequest(1, ro.lkey, 0x40000, 100))


def test_qp_on_srq_refuses_direct_receives() -> None:
    dev = _device()
    ctx = dev.open_context(1)
    pd = ctx.alloc_pd()
    cq = ctx.create_cq(4)
    srq = ctx.create_srq(pd, 4)
    mr = ctx.reg_mr(pd, 0, 4096)
    qp = ctx.create_qp(pd, cq, cq, srq=srq)
    ctx.modify_qp(qp, QPState.INIT)

    with pytest.raises(ArgumentError):
        ctx.post_recv(qp, ReceiveRequest(1, mr.lkey, 0, 100))
    ctx.post_recv(srq, ReceiveRequest(1, mr.lkey, 0, 100))
    assert len(srq.ring) == 1


# ── flushing and completion queues ───────────────────────────────────


def test_error_flushes_every_outstanding_request() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)
    ctx.post_send(qp, SendRequest(1, WROpcode.SEND, mr.lkey, 0x1000, 10))
    ctx.post_send(qp, SendRequest(2, WROpcode.SEND, mr.lkey, 0x1000, 10))
    ctx.post_recv(qp, ReceiveRequest(3, mr.lkey, 0x1000, 100))

    ctx.modify_qp(qp, QPState.ERROR)

    wcs = ctx.poll_cq(cq, 8)
    assert sorted(wc.wr_id for wc in wcs) == [1, 2, 3]
    assert {wc.status for wc in wcs} == {WCStatus.WR_FLUSH_ERR}
    assert not qp.sq and not qp.rq


@pytest.mark.parametrize("seed", range(5))
def test_every_posted_request_completes_exactly_once(seed: int) -> None:
    dev, ctx, pd, cq, mr, qp = _setup(depth=512)
    _connect(ctx, qp)
    rng = XorShift64Star(seed)
    posted = []

    for wr_id in range(120):
        if rng.chance(0.5):
            # a few bad keys push the QP into SQE; later sends are flushed there
            lkey = 0xDEAD if rng.chance(0.05) else mr.lkey
            ctx.post_send(qp, SendRequest(wr_id, WROpcode.SEND, lkey, 0x1000, 1 + rng.next_u32() % 4096))
        else:
            ctx.post_recv(qp, ReceiveRequest(wr_id, mr.lkey, 0x1000, 4096))
        posted.append(wr_id)

    ctx.modify_qp(qp, QPState.ERROR)

    wcs = ctx.poll_cq(cq, 512)
    assert not cq.overrun
    assert sorted(wc.wr_id for wc in wcs) == posted
    assert not qp.sq and not qp.rq and not qp.req.awaiting


def test_cq_overrun_sets_flag_and_drops_completion() -> None:
    dev, ctx, pd, cq, mr, qp = _setup(depth=1)
    _connect(ctx, qp)
    for i in range(2):
        ctx.post_send(qp, SendRequest(i, WROpcode.SEND, 0xDEAD, 0, 1))

    assert cq.overrun
    assert [wc.wr_id for wc in ctx.poll_cq(cq, 8)] == [0]


def test_completions_reach_the_device_hook() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    seen = []
    dev.on_completion = lambda q, wc: seen.append((q.qpn, wc.wr_id))
    _connect(ctx, qp)

    ctx.post_send(qp, SendRequest(11, WROpcode.SEND, 0xDEAD, 0, 1))

    assert seen == [(qp.qpn, 11)]


# ── teardown ─────────────────────────────────────────────────────────


def test_destroying_a_cq_in_use_raises() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()

    with pytest.raises(StateError):
        ctx.destroy_cq(cq)


def test_dealloc_pd_with_objects_raises() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()

    with pytest.raises(StateError):
        ctx.dealloc_pd(pd)


def test_close_releases_identifiers_on_the_device() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()

    ctx.close()

    assert qp.qpn not in dev.qps
    assert mr.mrn not in dev.mrs
    assert 1 not in dev.contexts


def test_reset_clears_queues_and_partner() -> None:
    dev, ctx, pd, cq, mr, qp = _setup()
    _connect(ctx, qp)
    ctx.post_send(qp, SendRequest(1, WROpcode.SEND, mr.lkey, 0x1000, 10))

    ctx.modify_qp(qp, QPState.RESET)

    assert qp.partner is None
    assert not qp.sq
    assert qp.req.next_psn == 0
