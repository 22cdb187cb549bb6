"""Tests for the discrete-event network: tick ordering, loss and duplication
draws, fast-forwarding, bulk transfers and the packet trace."""

from __future__ import annotations

import pytest

from common.errors import ArgumentError
from netsim import Channel, NetConfig, Network, Trace, TraceRecord, XFER
from verbs import (
    Access,
    Device,
    DeviceConfig,
    NodeAddress,
    Partner,
    QPState,
    ReceiveRequest,
    RetryConfig,
    SendRequest,
    WCOpcode,
    WCStatus,
    WROpcode,
)

BASE = 0x20000
SLOT = 512


def _node(net: Network, index: int) -> Device:
    dev = Device(f"n{index}", NodeAddress.from_guid(0x100 + index), DeviceConfig.partitioned(index))
    net.attach(dev)
    return dev


def _link(config: NetConfig | None = None, messages: int = 1, size: int = 100):
    """Two nodes with one connected QP each; n0 posts `messages` SENDs to n1."""
    net = Network(config or NetConfig())
    ends = []
    for index in (0, 1):
        dev = _node(net, index)
        ctx = dev.open_context(index + 1)
        pd = ctx.alloc_pd()
        cq = ctx.create_cq(4096)
        mr = ctx.reg_mr(pd, BASE, SLOT * 256, Access.LOCAL_WRITE)
        qp = ctx.create_qp(pd, cq, cq)
        ends.append((dev, ctx, cq, mr, qp))
    for (dev, ctx, _, _, qp), (peer, _, _, _, peer_qp) in (tuple(ends), tuple(reversed(ends))):
        ctx.modify_qp(qp, QPState.INIT)
        ctx.modify_qp(qp, QPState.RTR, partner=Partner(peer.address, peer_qp.qpn), expected_psn=0)
    for _, ctx, _, _, qp in ends:
        ctx.modify_qp(qp, QPState.RTS, next_psn=0, retry=RetryConfig(8, None))

    (_, src_ctx, _, src_mr, src_qp), (_, dst_ctx, _, _, dst_qp) = ends
    for i in range(messages):
        dst_ctx.post_recv(dst_qp, ReceiveRequest(i, ends[1][3].lkey, BASE + i * SLOT, SLOT))
        src_mr.write(BASE + i * SLOT, bytes([i % 256]) * size)
        src_ctx.post_send(src_qp, SendRequest(i, WROpcode.SEND, src_mr.lkey, BASE + i * SLOT, size))
    return net, ends


def _recvs(net: Network) -> list:
    return [r.wc for r in net.completion_log if r.wc.opcode == WCOpcode.RECV]


# ── configuration ────────────────────────────────────────────────────


@pytest.mark.parametrize(
    "kwargs",
    [
        {"latency_ticks": 0},
        {"loss_rate": 1.0},
        {"dup_rate": -0.1},
        {"seed": -1},
        {"max_ticks": -5},
        {"bulk_chunk_bytes": 0},
        {"opcode_loss": (("RESUME", 1.0),)},
    ],
)
def test_invalid_net_config_is_rejected(kwargs) -> None:
    with pytest.raises(ArgumentError):
        NetConfig(**kwargs)


def test_attaching_the_same_gid_or_name_twice_fails() -> None:
    net = Network()
    _node(net, 0)

    with pytest.raises(ArgumentError):
        net.attach(Device("other", NodeAddress.from_guid(0x100)))
    with pytest.raises(ArgumentError):
        net.attach(Device("n0", NodeAddress.from_guid(0x999)))


def test_device_lookup_by_name_gid_and_address() -> None:
    net = Network()
    dev = _node(net, 0)

    assert net.device("n0") is dev
    assert net.device(dev.address) is dev
    assert net.device(dev.address.gid) is dev
    with pytest.raises(ArgumentError):
        net.device("missing")


# ── delivery ─────────────────────────────────────────────────────────


def test_single_send_produces_the_expected_trace() -> None:
    net, ends = _link()
    src_qpn, dst_qpn = ends[0][4].qpn, ends[1][4].qpn

    report = net.run_until(lambda n: len(n.completion_log) == 2)

    assert [r.format() for r in report.trace] == [
        f"0 TX n0 0x{src_qpn:06x} SEND_ONLY 0 - 100",
        f"1 RX n1 0x{dst_qpn:06x} SEND_ONLY 0 - 100",
        f"1 TX n1 0x{dst_qpn:06x} ACK 0 ACK_OK 0",
        f"2 RX n0 0x{src_qpn:06x} ACK 0 ACK_OK 0",
    ]
    assert report.sent == 2 and report.delivered == 2
    assert report.opcodes == {"SEND_ONLY": 1, "ACK": 1}


def test_all_messages_arrive_in_order() -> None:
    net, ends = _link(messages=20)

    report = net.run_until()

    recvs = _recvs(net)
    assert [wc.wr_id for wc in recvs] == list(range(20))
    assert all(wc.status == WCStatus.SUCCESS for wc in recvs)
    assert report.completions == {"SUCCESS": 40}
    assert not report.timed_out


def test_lost_packets_are_recovered_by_retransmission() -> None:
    net, ends = _link(NetConfig(seed=7, loss_rate=0.2), messages=30)

    report = net.run_until()

    assert report.dropped > 0
    assert len([r for r in report.trace if r.dir == "DROP"]) == report.dropped
    assert [wc.wr_id for wc in _recvs(net)] == list(range(30))
    assert report.completions == {"SUCCESS": 60}


def test_duplicates_are_not_delivered_twice() -> None:
    net, ends = _link(NetConfig(seed=3, dup_rate=0.3), messages=30)

    report = net.run_until()

    assert report.duplicated > 0
    assert len([r for r in report.trace if r.dir == "DUP"]) == report.duplicated
    assert len(_recvs(net)) == 30


def test_loss_can_be_limited_to_some_opcodes() -> None:
    net, ends = _link(NetConfig(seed=11, loss_rate=0.5, lossy_opcodes=frozenset({"ACK"})), messages=10)

    report = net.run_until()

    drops = [r for r in report.trace if r.dir == "DROP"]
    assert drops
    assert {r.opcode for r in drops} == {"ACK"}


def test_per_opcode_loss_rate_replaces_the_general_one() -> None:
    config = NetConfig(seed=11, loss_rate=0.0, opcode_loss=(("ACK", 0.5),))
    net, ends = _link(config, messages=10)

    report = net.run_until()

    drops = [r for r in report.trace if r.dir == "DROP"]
    assert drops
    assert {r.opcode for r in drops} == {"ACK"}
    assert len(_recvs(net)) == 10
    assert config.loss_rate_for("ACK") == 0.5
    assert config.loss_rate_for("SEND_ONLY") == 0.0


def test_same_seed_gives_the_same_trace() -> None:
    config = NetConfig(seed=42, loss_rate=0.1, dup_rate=0.05)
    first, _ = _link(config, messages=25)
    second, _ = _link(config, messages=25)

    assert first.run_until().trace.digest() == second.run_until().trace.digest()


def test_different_seeds_give_different_traces() -> None:
    first, _ = _link(NetConfig(seed=1, loss_rate=0.3), messages=25)
    second, _ = _link(NetConfig(seed=2, loss_rate=0.3), messages=25)

    assert first.run_until().trace.digest() != second.run_until().trace.digest()


def test_datagram_to_unknown_node_is_counted_unroutable() -> None:
    net = Network()
    dev = _node(net, 0)

    net.send_datagram(dev.address, NodeAddress.from_guid(0xDEAD), b"\x01\x03")

    assert net.report().unroutable == 1
    assert net.report().sent == 0


def test_packet_for_unknown_qpn_is_dropped_quietly() -> None:
    net, ends = _link()
    ends[0][4].partner = Partner(ends[1][0].address, 0xABCDEF)

    report = net.run_until(max_ticks=3)

    assert report.delivered == 1
    assert _recvs(net) == []


# ── scheduling ───────────────────────────────────────────────────────


def test_idle_network_fast_forwards_to_the_next_event() -> None:
    net = Network()
    seen = []
    net.schedule_wakeup(1000, seen.append)

    report = net.run_until()

    assert seen == [1000]
    assert report.final_tick == 1000


def test_migration_triggers_run_before_wakeups() -> None:
    net = Network()
    order = []
    net.schedule_wakeup(5, lambda now: order.append("wakeup"))
    net.schedule_migration(5, lambda now: order.append("migration"))

    net.run_until()

    assert order == ["migration", "wakeup"]


def test_same_tick_deliveries_run_in_node_address_order() -> None:
    net = Network()
    n0, n1, n2 = (_node(net, i) for i in range(3))
    net.send_datagram(n0.address, n2.address, b"late", Channel.BULK)
    net.send_datagram(n0.address, n1.address, b"early", Channel.BULK)
    net.send_datagram(n0.address, n2.address, b"later", Channel.BULK)

    report = net.run_until()

    received = [(r.node, r.length) for r in report.trace if r.dir == "RX"]
    assert received == [("n1", 5), ("n2", 4), ("n2", 5)]


def test_events_scheduled_in_the_past_run_next_tick() -> None:
    net = Network()
    ticks = []
    net.schedule_wakeup(10, lambda now: net.schedule_wakeup(3, ticks.append))

    net.run_until()

    assert ticks == [11]


def test_tick_budget_is_reported_not_raised() -> None:
    net, ends = _link(messages=50)

    report = net.run_until(max_ticks=5)

    assert report.timed_out
    assert report.final_tick <= 5


def test_tick_hooks_run_every_processed_tick() -> None:
    net = Network()
    ticks = []
    net.tick_hooks.append(ticks.append)
    net.schedule_wakeup(2, lambda now: None)
    net.schedule_wakeup(7, lambda now: None)

    net.run_until()

    assert ticks == [2, 7]


# ── bulk channel ─────────────────────────────────────────────────────


def test_bulk_chunks_are_paced_and_traced() -> None:
    net = Network(NetConfig(latency_ticks=2))
    a, b = _node(net, 0), _node(net, 1)
    got = []
    tag = net.new_transfer_tag(lambda data, now: got.append((now, data)))

    net.schedule_wakeup(0, lambda now: net.send_bulk(a.address, b.address, [b"aa", b"bbb", b"c"], tag))
    net.run_until()

    assert got == [(3, b"aa"), (4, b"bbb"), (5, b"c")]
    xfer = [r.format() for r in net.trace if r.opcode == XFER]
    assert xfer[:2] == ["1 TX n0 - XFER 0 - 2", "2 TX n0 - XFER 1 - 3"]
    assert f"3 RX n1 - XFER {tag} - 2" in xfer
    assert net.report().sent == 0


def test_bulk_datagrams_are_never_lost() -> None:
    net = Network(NetConfig(loss_rate=0.9))
    a, b = _node(net, 0), _node(net, 1)
    got = []
    tag = net.new_transfer_tag(lambda data, now: got.append(data))

    for i in range(20):
        net.send_datagram(a.address, b.address, bytes([i]), Channel.BULK, tag)
    net.run_until()

    assert len(got) == 20


# ── trace records ────────────────────────────────────────────────────


def test_trace_record_formats_and_parses() -> None:
    line = "40 TX n1 0x010010 ACK 57 NAK_STOPPED 0"

    record = TraceRecord.parse(line)

    assert record == TraceRecord(40, "TX", "n1", 0x010010, "ACK", 57, "NAK_STOPPED", 0)
    assert record.format() == line


def test_malformed_trace_line_is_rejected() -> None:
    with pytest.raises(ValueError):
        TraceRecord.parse("1 TX n0 0x000010 ACK")


def _sample_trace() -> Trace:
    return Trace(
        [
            TraceRecord(1, "TX", "n0", 0x10, "SEND_ONLY", 0, None, 100),
            TraceRecord(2, "RX", "n1", 0x10010, "SEND_ONLY", 0, None, 100),
            TraceRecord(2, "TX", "n1", 0x10010, "ACK", 0, "NAK_STOPPED", 0),
            TraceRecord(9, "TX", "n2", 0x10010, "RESUME", 0, None, 0),
        ]
    )


@pytest.mark.parametrize(
    "where,expected_ticks",
    [
        ({"opcode": "resume"}, [9]),
        ({"qpn": "0x10010", "dir": "TX"}, [2, 9]),
        ({"syndrome": {"op": "eq", "value": "NAK_STOPPED"}}, [2]),
        ({"tick": ("gte", 2), "opcode": ("neq", "ACK")}, [2, 9]),
        ({"node": {"op": "in", "value": ["n0", "n2"]}}, [1, 9]),
        ({"opcode": ("contains", "send")}, [1, 2]),
    ],
)
def test_trace_select_filters(where, expected_ticks) -> None:
    assert [r.tick for r in _sample_trace().select(where)] == expected_ticks


def test_trace_file_round_trip(tmp_path) -> None:
    trace = _sample_trace()
    path = tmp_path / "run.trace"

    trace.write(str(path))

    assert path.read_text().splitlines()[0] == "1 TX n0 0x000010 SEND_ONLY 0 - 100"
    assert Trace.read(str(path)).digest() == trace.digest()
