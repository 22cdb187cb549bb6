"""Dump image codec.

An image is a fixed header followed by TLV records in restore order
(PD, MR, CQ, SRQ, QP). All integers are big-endian. docs/wire.md has the
record layouts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Tuple, Union

from common.errors import ImageError
from verbs import (
    Access,
    QPState,
    ReceiveRequest,
    SendRequest,
    WCOpcode,
    WCStatus,
    WorkCompletion,
    WROpcode,
)

MAGIC = b"MGRD"
IMAGE_VERSION = 1
IMAGE_HEADER = struct.Struct(">4sH16sI")
TLV_HEADER = struct.Struct(">BI")


class RecordType(IntEnum):
    PD = 1
    MR = 2
    CQ = 3
    SRQ = 4
    QP = 5


# ── records ──────────────────────────────────────────────────────────


@dataclass
class PDRecord:
    handle: int


@dataclass
class MRRecord:
    mrn: int
    pd: int
    lkey: int
    rkey: int
    base: int
    length: int
    access: Access
    buffer: bytes


@dataclass
class CQRecord:
    handle: int
    depth: int
    head: int
    tail: int
    overrun: bool
    ring: List[WorkCompletion] = field(default_factory=list)


@dataclass
class SRQRecord:
    handle: int
    pd: int
    depth: int
    ring: List[ReceiveRequest] = field(default_factory=list)


@dataclass
class RequesterRecord:
    next_psn: int = 0
    first_unacked_psn: int = 0
    cur_sr_offset: int = 0
    # (psn, sent_at, wire bytes)
    inflight: List[Tuple[int, int, bytes]] = field(default_factory=list)
    awaiting: List[SendRequest] = field(default_factory=list)
    resend_psn: Optional[int] = None
    retries_used: int = 0
    backoff: int = 1
    sqd_drain: int = 0


@dataclass
class ResponderRecord:
    expected_psn: int = 0
    cur_rr_offset: int = 0
    msn: int = 0
    cur_rr: Optional[ReceiveRequest] = None
    nak_latched: bool = False
    sink: bool = False
    write_active: bool = False
    write_va: int = 0
    write_rkey: int = 0
    write_remaining: int = 0


@dataclass
class QPRecord:
    qpn: int
    pd: int
    send_cq: int
    recv_cq: int
    srq: Optional[int]
    max_send_wr: int
    max_recv_wr: int
    # state before the dump stopped the QP
    state: QPState
    partner_gid: Optional[bytes]
    partner_qpn: int
    mtu: int
    timeout_ticks: int
    max_retries: Optional[int]
    sq: List[SendRequest] = field(default_factory=list)
    rq: List[ReceiveRequest] = field(default_factory=list)
    req: RequesterRecord = field(default_factory=RequesterRecord)
    rsp: ResponderRecord = field(default_factory=ResponderRecord)


Record = Union[PDRecord, MRRecord, CQRecord, SRQRecord, QPRecord]

RECORD_TYPES = {
    PDRecord: RecordType.PD,
    MRRecord: RecordType.MR,
    CQRecord: RecordType.CQ,
    SRQRecord: RecordType.SRQ,
    QPRecord: RecordType.QP,
}


# ── primitive codec ──────────────────────────────────────────────────


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def put(self, fmt: str, *values) -> None:
        try:
            self.parts.append(struct.pack(">" + fmt, *values))
        except struct.error as e:
            raise ImageError(f"field out of range: {e}") from None

    def opt(self, value: Optional[int]) -> None:
        self.put("BI", value is not None, value or 0)

    def blob(self, data: bytes) -> None:
        self.put("I", len(data))
        self.parts.append(bytes(data))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def get(self, fmt: str) -> tuple:
        s = struct.Struct(">" + fmt)
        if self.pos + s.size > len(self.data):
            raise ImageError(f"truncated {self.what} record")
        values = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return values

    def one(self, fmt: str):
        return self.get(fmt)[0]

    def opt(self) -> Optional[int]:
        present, value = self.get("BI")
        return value if present else None

    def blob(self) -> bytes:
        n = self.one("I")
        if self.pos + n > len(self.data):
            raise ImageError(f"truncated {self.what} record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ImageError(f"{len(self.data) - self.pos} trailing bytes in {self.what} record")


def _put_sr(w: _Writer, sr: SendRequest) -> None:
    w.put("QBIQQIQQ", sr.wr_id, int(sr.opcode), sr.lkey, sr.addr, sr.length, sr.rkey, sr.raddr, sr.posted_at)
    w.opt(sr.last_psn)


def _get_sr(r: _Reader) -> SendRequest:
    wr_id, opcode, lkey, addr, length, rkey, raddr, posted_at = r.get("QBIQQIQQ")
    return SendRequest(wr_id, WROpcode(opcode), lkey, addr, length, rkey, raddr, posted_at, r.opt())


def _put_rr(w: _Writer, rr: ReceiveRequest) -> None:
    w.put("QIQQ", rr.wr_id, rr.lkey, rr.addr, rr.max_len)


def _get_rr(r: _Reader) -> ReceiveRequest:
    return ReceiveRequest(*r.get("QIQQ"))


def _put_list(w: _Writer, items, put) -> None:
    w.put("I", len(items))
    for item in items:
        put(w, item)


def _get_list(r: _Reader, get) -> list:
    return [get(r) for _ in range(r.one("I"))]


# ── record bodies ────────────────────────────────────────────────────


def encode_record(rec: Record) -> bytes:
    w = _Writer()
    match rec:
        case PDRecord():
            w.put("I", rec.handle)
        case MRRecord():
            w.put("IIIIQQB", rec.mrn, rec.pd, rec.lkey, rec.rkey, rec.base, rec.length, int(rec.access))
            w.blob(rec.buffer)
        case CQRecord():
            w.put("IIQQB", rec.handle, rec.depth, rec.head, rec.tail, rec.overrun)
            _put_list(w, rec.ring, lambda w, wc: w.put(
                "QBBIIQQ", wc.wr_id, int(wc.status), int(wc.opcode), wc.byte_len, wc.qpn, wc.posted_at, wc.completed_at
            ))
        case SRQRecord():
            w.put("III", rec.handle, rec.pd, rec.depth)
            _put_list(w, rec.ring, _put_rr)
        case QPRecord():
            w.put("IIII", rec.qpn, rec.pd, rec.send_cq, rec.recv_cq)
            w.opt(rec.srq)
            w.put("IIBI", rec.max_send_wr, rec.max_recv_wr, int(rec.state), rec.mtu)
            w.put("B16sI", rec.partner_gid is not None, rec.partner_gid or bytes(16), rec.partner_qpn)
            w.put("I", rec.timeout_ticks)
            w.opt(rec.max_retries)
            _put_list(w, rec.sq, _put_sr)
            _put_list(w, rec.rq, _put_rr)
            req = rec.req
            w.put("IIQ", req.next_psn, req.first_unacked_psn, req.cur_sr_offset)
            _put_list(w, req.inflight, lambda w, p: (w.put("IQ", p[0], p[1]), w.blob(p[2])))
            _put_list(w, req.awaiting, _put_sr)
            w.opt(req.resend_psn)
            w.put("III", req.retries_used, req.backoff, req.sqd_drain)
            rsp = rec.rsp
            w.put("IQI", rsp.expected_psn, rsp.cur_rr_offset, rsp.msn)
            w.put("B", rsp.cur_rr is not None)
            if rsp.cur_rr is not None:
                _put_rr(w, rsp.cur_rr)
            w.put("BBBQIQ", rsp.nak_latched, rsp.sink, rsp.write_active, rsp.write_va, rsp.write_rkey, rsp.write_remaining)
        case _:
            raise ImageError(f"cannot encode {type(rec).__name__}")
    return w.getvalue()


def decode_record(kind: RecordType, body: bytes) -> Record:
    r = _Reader(body, kind.name)
    rec: Record
    match kind:
        case RecordType.PD:
            rec = PDRecord(r.one("I"))
        case RecordType.MR:
            mrn, pd, lkey, rkey, base, length, access = r.get("IIIIQQB")
            rec = MRRecord(mrn, pd, lkey, rkey, base, length, Access(access), r.blob())
            if len(rec.buffer) != length:
                raise ImageError(f"MR {mrn} buffer holds {len(rec.buffer)} bytes, expected {length}")
        case RecordType.CQ:
            handle, depth, head, tail, overrun = r.get("IIQQB")

            def _wc(r: _Reader) -> WorkCompletion:
                wr_id, status, opcode, byte_len, qpn, posted_at, completed_at = r.get("QBBIIQQ")
                return WorkCompletion(wr_id, WCStatus(status), WCOpcode(opcode), byte_len, qpn, posted_at, completed_at)

            rec = CQRecord(handle, depth, head, tail, bool(overrun), _get_list(r, _wc))
        case RecordType.SRQ:
            handle, pd, depth = r.get("III")
            rec = SRQRecord(handle, pd, depth, _get_list(r, _get_rr))
        case RecordType.QP:
            qpn, pd, send_cq, recv_cq = r.get("IIII")
            srq = r.opt()
            max_send_wr, max_recv_wr, state, mtu = r.get("IIBI")
            has_partner, gid, partner_qpn = r.get("B16sI")
            timeout_ticks = r.one("I")
            max_retries = r.opt()
            sq = _get_list(r, _get_sr)
            rq = _get_list(r, _get_rr)
            req = RequesterRecord(*r.get("IIQ"))
            req.inflight = _get_list(r, lambda r: (*r.get("IQ"), r.blob()))
            req.awaiting = _get_list(r, _get_sr)
            req.resend_psn = r.opt()
            req.retries_used, req.backoff, req.sqd_drain = r.get("III")
            rsp = ResponderRecord(*r.get("IQI"))
            if r.one("B"):
                rsp.cur_rr = _get_rr(r)
            nak, sink, wactive, rsp.write_va, rsp.write_rkey, rsp.write_remaining = r.get("BBBQIQ")
            rsp.nak_latched, rsp.sink, rsp.write_active = bool(nak), bool(sink), bool(wactive)
            rec = QPRecord(
                qpn=qpn,
                pd=pd,
                send_cq=send_cq,
                recv_cq=recv_cq,
                srq=srq,
                max_send_wr=max_send_wr,
                max_recv_wr=max_recv_wr,
                state=QPState(state),
                partner_gid=gid if has_partner else None,
                partner_qpn=partner_qpn,
                mtu=mtu,
                timeout_ticks=timeout_ticks,
                max_retries=max_retries,
                sq=sq,
                rq=rq,
                req=req,
                rsp=rsp,
            )
    r.done()
    return rec


# ── image ────────────────────────────────────────────────────────────


@dataclass
class DumpImage:
    node_gid: bytes
    records: List[Record] = field(default_factory=list)

    @property
    def object_count(self) -> int:
        return len(self.records)

    def of_type(self, kind: RecordType) -> List[Record]:
        return [r for r in self.records if RECORD_TYPES[type(r)] == kind]

    def encode(self) -> bytes:
        kinds = [RECORD_TYPES[type(r)] for r in self.records]
        if kinds != sorted(kinds):
            raise ImageError("records must be ordered PD, MR, CQ, SRQ, QP")
        parts = [IMAGE_HEADER.pack(MAGIC, IMAGE_VERSION, self.node_gid, len(self.records))]
        for kind, rec in zip(kinds, self.records):
            body = encode_record(rec)
            if len(body) > 0xFFFFFFFF:
                raise ImageError(f"{kind.name} record of {len(body)} bytes does not fit a record")
            parts.append(TLV_HEADER.pack(int(kind), len(body)))
            parts.append(body)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "DumpImage":
        if len(data) < IMAGE_HEADER.size:
            raise ImageError("truncated image header")
        magic, version, node_gid, count = IMAGE_HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ImageError(f"bad magic {magic!r}")
        if version != IMAGE_VERSION:
            raise ImageError(f"unsupported image version {version}")
        pos = IMAGE_HEADER.size
        records: List[Record] = []
        last_kind = 0
        for i in range(count):
            if pos + TLV_HEADER.size > len(data):
                raise ImageError(f"truncated header of record {i}")
            raw_kind, length = TLV_HEADER.unpack_from(data, pos)
            pos += TLV_HEADER.size
            try:
                kind = RecordType(raw_kind)
            except ValueError:
                raise ImageError(f"unknown record type {raw_kind} at record {i}") from None
            if kind < last_kind:
                raise ImageError(f"record {i} ({kind.name}) is out of dependency order")
            last_kind = kind
            if pos + length > len(data):
                raise ImageError(f"truncated body of record {i} ({kind.name})")
            records.append(decode_record(kind, data[pos:pos + length]))
            pos += length
        if pos != len(data):
            raise ImageError(f"{len(data) - pos} trailing bytes after {count} records")
        return cls(node_gid=node_gid, records=records)

    def summary(self) -> List[str]:
        lines = []
        for rec in self.records:
            match rec:
                case PDRecord():
                    lines.append(f"PD  handle={rec.handle}")
                case MRRecord():
                    lines.append(
                        f"MR  mrn={rec.mrn:#x} pd={rec.pd} lkey={rec.lkey:#010x} rkey={rec.rkey:#010x} "
                        f"length={rec.length}"
                    )
                case CQRecord():
                    lines.append(f"CQ  handle={rec.handle} depth={rec.depth} pending={len(rec.ring)}")
                case SRQRecord():
                    lines.append(f"SRQ handle={rec.handle} depth={rec.depth} posted={len(rec.ring)}")
                case QPRecord():
                    lines.append(
                        f"QP  qpn={rec.qpn:#x} state={rec.state.name} next_psn={rec.req.next_psn} "
                        f"first_unacked={rec.req.first_unacked_psn} expected={rec.rsp.expected_psn} "
                        f"sq={len(rec.sq)} inflight={len(rec.req.inflight)}"
                    )
        return lines
