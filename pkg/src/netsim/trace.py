"""Packet trace: one whitespace-separated record per line,

    tick dir node qpn opcode psn syndrome len

See docs/trace.md for the field definitions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Iterator, List, Optional

from common.filtering import matches_filter

DIRECTIONS = ("TX", "RX", "DROP", "DUP")
NONE = "-"


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    dir: str
    node: str
    qpn: Optional[int]
    opcode: str
    psn: int
    syndrome: Optional[str]
    length: int

    def format(self) -> str:
        qpn = NONE if self.qpn is None else f"0x{self.qpn:06x}"
        return (
            f"{self.tick} {self.dir} {self.node} {qpn} {self.opcode} {self.psn} "
            f"{self.syndrome or NONE} {self.length}"
        )

    @classmethod
    def parse(cls, line: str) -> "TraceRecord":
        fields = line.split()
        if len(fields) != 8:
            raise ValueError(f"trace record needs 8 fields, got {len(fields)}: {line!r}")
        tick, direction, node, qpn, opcode, psn, syndrome, length = fields
        return cls(
            tick=int(tick),
            dir=direction,
            node=node,
            qpn=None if qpn == NONE else int(qpn, 16),
            opcode=opcode,
            psn=int(psn),
            syndrome=None if syndrome == NONE else syndrome,
            length=int(length),
        )

    def as_dict(self) -> Dict[str, Any]:
        return {
            "tick": self.tick,
            "dir": self.dir,
            "node": self.node,
            "qpn": self.qpn,
            "opcode": self.opcode,
            "psn": self.psn,
            "syndrome": self.syndrome,
            "len": self.length,
        }


class Trace:
    def __init__(self, records: Optional[Iterable[TraceRecord]] = None):
        self.records: List[TraceRecord] = list(records or [])

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        return "".join(r.format() + "\n" for r in self.records)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path: str) -> "Trace":
        with open(path, encoding="utf-8") as fh:
            return cls(TraceRecord.parse(line) for line in fh if line.strip())

    def select(self, where: Optional[Dict[str, Any]] = None, limit: Optional[int] = None) -> List[TraceRecord]:
        """Records whose fields satisfy every condition in `where`."""
        out: List[TraceRecord] = []
        for record in self.records:
            fields = record.as_dict()
            if where and not all(matches_filter(fields, k, c) for k, c in where.items() if c is not None):
                continue
            out.append(record)
            if limit is not None and len(out) >= limit:
                break
        return out
