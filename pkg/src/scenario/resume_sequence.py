"""Replays a migration that happens while a SEND is half acknowledged and
checks the exact packet sequence of the resume handshake.

The sending QP carries one five-packet SEND (PSNs 5 to 9). When it is
checkpointed, packets 5, 6 and 7 have been transmitted (next PSN 8), the
oldest unacknowledged one is `first_unacked`, and the receiver expects
`expected_psn`. After the restore the sender must announce itself with
RESUME(first_unacked), get ACK(expected_psn - 1) back, retransmit whatever
the receiver is missing, send 8 and 9, and see the final ACK(9).

The comparison is byte for byte: every transmitted datagram must equal the
encoding of the packet the protocol calls for at that position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

from checkpoint import (
    DumpImage,
    RequesterRecord,
    ResponderRecord,
    dump_context,
    install_task_state,
    refill,
    restore_context,
)
from common.errors import ArgumentError
from netsim import NetConfig, Network
from transport import Opcode, Packet, ResumeInfo, Syndrome, TransportConfig, make_ack, plan_segment
from verbs import (
    Access,
    Device,
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
from .workload import payload

logger = logging.getLogger(__name__)

MTU = 1024
FIRST_PSN = 5
SEGMENTS = 5
NEXT_PSN = 8
LAST_PSN = FIRST_PSN + SEGMENTS - 1
BASE_VA = 0x10_0000
SEND_WR_ID = 1
RECV_WR_ID = 2
MAX_TICKS = 10_000


@dataclass
class ResumeCheck:
    first_unacked: int
    expected_psn: int
    expected: List[str]
    actual: List[str] = field(default_factory=list)
    problems: List[str] = field(default_factory=list)
    final_tick: int = 0
    # encoded datagrams, position for position with expected/actual
    expected_wire: List[bytes] = field(default_factory=list)
    actual_wire: List[bytes] = field(default_factory=list)

    @property
    def wire_match(self) -> bool:
        return self.actual_wire == self.expected_wire

    @property
    def passed(self) -> bool:
        return self.actual == self.expected and self.wire_match and not self.problems

    def _bytes_differ(self, i: int) -> bool:
        if i >= len(self.expected_wire) or i >= len(self.actual_wire):
            return False
        return self.expected_wire[i] != self.actual_wire[i]

    def diff(self) -> List[str]:
        lines = []
        for i in range(max(len(self.expected), len(self.actual))):
            want = self.expected[i] if i < len(self.expected) else "-"
            got = self.actual[i] if i < len(self.actual) else "-"
            if want != got:
                lines.append(f"! {i:2d}  expected {want:<16} actual {got}")
            elif self._bytes_differ(i):
                lines.append(f"! {i:2d}  expected {want:<16} actual {got} (bytes differ)")
            else:
                lines.append(f"  {i:2d}  expected {want:<16} actual {got}")
        return lines + [f"! {p}" for p in self.problems]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "first_unacked": self.first_unacked,
            "expected_psn": self.expected_psn,
            "passed": self.passed,
            "wire_match": self.wire_match,
            "expected": self.expected,
            "actual": self.actual,
            "problems": self.problems,
            "final_tick": self.final_tick,
        }


def _data_name(psn: int) -> str:
    index = psn - FIRST_PSN
    if index == 0:
        return Opcode.SEND_FIRST.name
    if index == SEGMENTS - 1:
        return Opcode.SEND_LAST.name
    return Opcode.SEND_MIDDLE.name


def expected_sequence(first_unacked: int, expected_psn: int) -> List[str]:
    seq = [f"RESUME({first_unacked})", f"ACK({expected_psn - 1})"]
    seq += [f"{_data_name(psn)}({psn})" for psn in range(expected_psn, LAST_PSN + 1)]
    seq.append(f"ACK({LAST_PSN})")
    return seq


def expected_packets(
    first_unacked: int,
    expected_psn: int,
    sr: SendRequest,
    message: bytes,
    sender: Tuple[bytes, int],
    receiver_qpn: int,
    transport: TransportConfig,
) -> List[Packet]:
    """The packets of expected_sequence(), fully formed. `sender` is the
    restored sender's (GID, QPN)."""
    gid, sender_qpn = sender
    packets = [
        Packet(Opcode.RESUME, receiver_qpn, first_unacked, resume=ResumeInfo(gid, sender_qpn, first_unacked)),
        make_ack(sender_qpn, expected_psn - 1, Syndrome.ACK_OK, 0),
    ]
    for psn in range(expected_psn, LAST_PSN + 1):
        offset = (psn - FIRST_PSN) * MTU
        opcode, flags, chunk, reth = plan_segment(sr, offset, MTU, transport)
        packets.append(Packet(opcode, receiver_qpn, psn, flags, message[offset:offset + chunk], reth))
    packets.append(make_ack(sender_qpn, LAST_PSN, Syndrome.ACK_OK, 1))
    return packets


def _validate(first_unacked: int, expected_psn: int) -> None:
    if not FIRST_PSN <= first_unacked <= expected_psn <= NEXT_PSN:
        raise ArgumentError(
            f"need {FIRST_PSN} <= first_unacked ({first_unacked}) <= expected_psn ({expected_psn}) <= {NEXT_PSN}"
        )


def verify_resume_sequence(first_unacked: int = 5, expected_psn: int = 7) -> ResumeCheck:
    _validate(first_unacked, expected_psn)
    check = ResumeCheck(first_unacked, expected_psn, expected_sequence(first_unacked, expected_psn))
    length = SEGMENTS * MTU
    message = payload(0, length)

    network = Network(NetConfig(seed=1))
    nodes = [Device(name, NodeAddress.from_guid(i + 1)) for i, name in enumerate(("n0", "n1", "n2"))]
    for dev in nodes:
        network.attach(dev)
    src, peer, dst = nodes

    ctx_a = src.open_context(1)
    pd_a = ctx_a.alloc_pd()
    cq_a = ctx_a.create_cq(16)
    mr_a = ctx_a.reg_mr(pd_a, BASE_VA, length, Access.LOCAL_WRITE)
    mr_a.write(BASE_VA, message)
    qp_a = ctx_a.create_qp(pd_a, cq_a, cq_a)

    ctx_b = peer.open_context(2)
    pd_b = ctx_b.alloc_pd()
    cq_b = ctx_b.create_cq(16)
    mr_b = ctx_b.reg_mr(pd_b, BASE_VA, length, Access.LOCAL_WRITE | Access.REMOTE_WRITE)
    qp_b = ctx_b.create_qp(pd_b, cq_b, cq_b)

    retry = RetryConfig(timeout_ticks=32, max_retries=None)
    for ctx, qp in ((ctx_a, qp_a), (ctx_b, qp_b)):
        ctx.modify_qp(qp, QPState.INIT)
    ctx_a.modify_qp(qp_a, QPState.RTR, partner=Partner(peer.address, qp_b.qpn), mtu=MTU, expected_psn=0)
    ctx_b.modify_qp(qp_b, QPState.RTR, partner=Partner(src.address, qp_a.qpn), mtu=MTU, expected_psn=FIRST_PSN)
    ctx_a.modify_qp(qp_a, QPState.RTS, next_psn=FIRST_PSN, retry=retry)
    ctx_b.modify_qp(qp_b, QPState.RTS, next_psn=0, retry=retry)

    sr = SendRequest(wr_id=SEND_WR_ID, opcode=WROpcode.SEND, lkey=mr_a.lkey, addr=BASE_VA, length=length)
    ctx_a.post_send(qp_a, sr)
    ctx_b.post_recv(qp_b, ReceiveRequest(wr_id=RECV_WR_ID, lkey=mr_b.lkey, addr=BASE_VA, max_len=length))

    # sender: 5..7 transmitted, everything before first_unacked acknowledged
    inflight = []
    for psn in range(first_unacked, NEXT_PSN):
        offset = (psn - FIRST_PSN) * MTU
        opcode, flags, chunk, reth = plan_segment(sr, offset, MTU, network.transport)
        pkt = Packet(opcode, qp_b.qpn, psn, flags, message[offset:offset + chunk], reth)
        inflight.append((psn, 0, pkt.encode()))
    install_task_state(
        qp_a,
        RequesterRecord(
            next_psn=NEXT_PSN,
            first_unacked_psn=first_unacked,
            cur_sr_offset=(NEXT_PSN - FIRST_PSN) * MTU,
            inflight=inflight,
        ),
        ResponderRecord(),
    )

    # receiver: everything before expected_psn landed in the receive buffer
    received = (expected_psn - FIRST_PSN) * MTU
    rsp = ResponderRecord(expected_psn=expected_psn)
    if received:
        rsp.cur_rr = qp_b.rq.popleft()
        rsp.cur_rr_offset = received
        mr_b.write(BASE_VA, message[:received])
    install_task_state(qp_b, RequesterRecord(next_psn=0, first_unacked_psn=0), rsp)

    image = DumpImage.decode(dump_context(ctx_a).encode())
    ctx_new, pending = restore_context(dst, 1, image)
    check.expected_wire = [
        pkt.encode()
        for pkt in expected_packets(
            first_unacked, expected_psn, sr, message, (dst.address.gid, qp_a.qpn), qp_b.qpn, network.transport
        )
    ]
    network.wire_taps.append(lambda tick, node, data: check.actual_wire.append(data))
    for qp, rec in pending:
        refill(qp, rec, network.now)
    ctx_a.close()

    def _done(net: Network) -> bool:
        kinds = {(rec.wc.opcode, rec.wc.status) for rec in net.completion_log}
        return {(WCOpcode.SEND, WCStatus.SUCCESS), (WCOpcode.RECV, WCStatus.SUCCESS)} <= kinds

    report = network.run_until(_done, max_ticks=MAX_TICKS)
    check.final_tick = report.final_tick
    check.actual = [f"{r.opcode}({r.psn})" for r in report.trace if r.dir == "TX"]
    _check_outcome(check, network, ctx_new.qp(qp_a.qpn), qp_b, mr_b, message, report.timed_out)
    return check


def _check_outcome(check: ResumeCheck, network: Network, qp_a, qp_b, mr_b, message: bytes, timed_out: bool) -> None:
    if timed_out:
        check.problems.append("the transfer did not finish")
    wcs = {rec.wc.opcode: rec.wc for rec in network.completion_log}
    send = wcs.get(WCOpcode.SEND)
    recv = wcs.get(WCOpcode.RECV)
    if send is None or send.status != WCStatus.SUCCESS or send.wr_id != SEND_WR_ID:
        check.problems.append(f"send completion: {send}")
    if recv is None or recv.status != WCStatus.SUCCESS or recv.byte_len != len(message):
        check.problems.append(f"receive completion: {recv}")
    if mr_b.read(BASE_VA, len(message)) != message:
        check.problems.append("receive buffer differs from the sent message")
    if qp_a.state != QPState.RTS or qp_b.state != QPState.RTS:
        check.problems.append(f"final states {qp_a.state.name}/{qp_b.state.name}, expected RTS/RTS")
    if qp_b.partner is None or qp_b.partner.address.gid != qp_a.ctx.node.gid:
        check.problems.append("receiver does not point at the restored sender")
    logger.info(f"resume sequence ({check.first_unacked}, {check.expected_psn}): {'ok' if check.passed else 'mismatch'}")
