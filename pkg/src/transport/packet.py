"""RoCE-style wire codec: a fixed big-endian base header, an optional
extension chosen by the opcode, then the payload. Layout in docs/wire.md."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from common.errors import PacketError

WIRE_VERSION = 0x01
FLAG_ACK_REQ = 0x01

HEADER = struct.Struct(">BBBBIIH")
RETH_FMT = struct.Struct(">QII")
AETH_FMT = struct.Struct(">BI")
RESUME_FMT = struct.Struct(">16sII")

MAX_24 = 0xFFFFFF


class Opcode(IntEnum):
    SEND_FIRST = 0x00
    SEND_MIDDLE = 0x01
    SEND_LAST = 0x02
    SEND_ONLY = 0x03
    WRITE_FIRST = 0x06
    WRITE_MIDDLE = 0x07
    WRITE_LAST = 0x08
    WRITE_ONLY = 0x0A
    ACK = 0x11
    RESUME = 0x14


class Syndrome(IntEnum):
    ACK_OK = 0x00
    NAK_PSN_SEQ = 0x60
    NAK_REM_ACCESS = 0x61
    NAK_REM_OP = 0x62
    NAK_STOPPED = 0x6F


SEND_OPCODES = frozenset({Opcode.SEND_FIRST, Opcode.SEND_MIDDLE, Opcode.SEND_LAST, Opcode.SEND_ONLY})
WRITE_OPCODES = frozenset({Opcode.WRITE_FIRST, Opcode.WRITE_MIDDLE, Opcode.WRITE_LAST, Opcode.WRITE_ONLY})
DATA_OPCODES = SEND_OPCODES | WRITE_OPCODES
STARTS_MESSAGE = frozenset({Opcode.SEND_FIRST, Opcode.SEND_ONLY, Opcode.WRITE_FIRST, Opcode.WRITE_ONLY})
ENDS_MESSAGE = frozenset({Opcode.SEND_LAST, Opcode.SEND_ONLY, Opcode.WRITE_LAST, Opcode.WRITE_ONLY})
CARRIES_RETH = frozenset({Opcode.WRITE_FIRST, Opcode.WRITE_ONLY})


@dataclass(frozen=True)
class RETH:
    raddr: int
    rkey: int
    dma_len: int


@dataclass(frozen=True)
class AETH:
    syndrome: Syndrome
    msn: int


@dataclass(frozen=True)
class ResumeInfo:
    src_gid: bytes
    src_qpn: int
    first_unacked_psn: int


@dataclass(frozen=True)
class Packet:
    opcode: Opcode
    dest_qpn: int
    psn: int
    flags: int = 0
    payload: bytes = b""
    reth: Optional[RETH] = None
    aeth: Optional[AETH] = None
    resume: Optional[ResumeInfo] = None

    @property
    def ack_requested(self) -> bool:
        return bool(self.flags & FLAG_ACK_REQ)

    @property
    def syndrome(self) -> Optional[Syndrome]:
        return self.aeth.syndrome if self.aeth else None

    def encode(self) -> bytes:
        if not 0 <= self.psn <= MAX_24:
            raise PacketError(f"psn {self.psn} exceeds 24 bits")
        if not 0 <= self.dest_qpn <= MAX_24:
            raise PacketError(f"dest_qpn {self.dest_qpn} exceeds 24 bits")
        if len(self.payload) > 0xFFFF:
            raise PacketError("payload longer than 65535 bytes")
        parts = [HEADER.pack(WIRE_VERSION, int(self.opcode), self.flags, 0, self.dest_qpn, self.psn, len(self.payload))]
        if self.opcode in CARRIES_RETH:
            if self.reth is None:
                raise PacketError(f"{self.opcode.name} requires a RETH")
            parts.append(RETH_FMT.pack(self.reth.raddr, self.reth.rkey, self.reth.dma_len))
        elif self.opcode == Opcode.ACK:
            if self.aeth is None:
                raise PacketError("ACK requires an AETH")
            parts.append(AETH_FMT.pack(int(self.aeth.syndrome), self.aeth.msn & MAX_24))
        elif self.opcode == Opcode.RESUME:
            if self.resume is None:
                raise PacketError("RESUME requires resume info")
            parts.append(
                RESUME_FMT.pack(self.resume.src_gid, self.resume.src_qpn, self.resume.first_unacked_psn)
            )
        parts.append(self.payload)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Packet":
        if len(data) < HEADER.size:
            raise PacketError(f"truncated header ({len(data)} bytes)")
        version, raw_op, flags, _reserved, dest_qpn, psn, payload_len = HEADER.unpack_from(data, 0)
        if version != WIRE_VERSION:
            raise PacketError(f"unsupported wire version {version}")
        try:
            opcode = Opcode(raw_op)
        except ValueError:
            raise PacketError(f"unknown opcode {raw_op:#04x}") from None
        if dest_qpn > MAX_24 or psn > MAX_24:
            raise PacketError("dest_qpn/psn exceed 24 bits")

        offset = HEADER.size
        reth = aeth = resume = None
        try:
            if opcode in CARRIES_RETH:
                reth = RETH(*RETH_FMT.unpack_from(data, offset))
                offset += RETH_FMT.size
            elif opcode == Opcode.ACK:
                raw_syn, msn = AETH_FMT.unpack_from(data, offset)
                aeth = AETH(Syndrome(raw_syn), msn & MAX_24)
                offset += AETH_FMT.size
            elif opcode == Opcode.RESUME:
                gid, src_qpn, fu = RESUME_FMT.unpack_from(data, offset)
                resume = ResumeInfo(gid, src_qpn, fu)
                offset += RESUME_FMT.size
        except struct.error:
            raise PacketError(f"truncated {opcode.name} extension") from None
        except ValueError:
            raise PacketError("unknown AETH syndrome") from None

        if len(data) - offset != payload_len:
            raise PacketError(f"payload_len {payload_len} does not match {len(data) - offset} trailing bytes")
        return cls(
            opcode=opcode,
            dest_qpn=dest_qpn,
            psn=psn,
            flags=flags,
            payload=bytes(data[offset:]),
            reth=reth,
            aeth=aeth,
            resume=resume,
        )


def make_ack(dest_qpn: int, psn: int, syndrome: Syndrome, msn: int) -> Packet:
    return Packet(opcode=Opcode.ACK, dest_qpn=dest_qpn, psn=psn & MAX_24, aeth=AETH(syndrome, msn & MAX_24))
