"""Scenario files: TOML documents with the schema described in
docs/scenario.md. Every validation error names the offending key and the
line it was found on."""

from __future__ import annotations

import re
import tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from common.errors import ScenarioError
from transport import Opcode

PathItem = Union[str, int]

_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-]+)\s*\]\]?")
_TOML_POS = re.compile(r"at line (\d+)")

ASSERTION_KINDS = ("all_delivered", "no_errors", "trace_contains", "trace_absent", "migrations_completed")
TRANSFERS = ("in_band", "out_of_band")
TRAFFIC_OPCODES = ("SEND", "RDMA_WRITE")
TRACE_FIELDS = ("tick", "dir", "node", "qpn", "opcode", "psn", "syndrome", "len")


@dataclass
class NodeSpec:
    name: str
    guid: int


@dataclass
class QPSpec:
    name: str
    partner: str
    mtu: int = 1024
    max_send_wr: int = 64
    max_recv_wr: int = 64
    timeout_ticks: int = 32
    # None retries forever
    max_retries: Optional[int] = None
    start_psn: int = 0


@dataclass
class ContextSpec:
    id: int
    node: str
    cq_depth: int = 1024
    srq_depth: int = 0
    mrs: List[int] = field(default_factory=list)
    qps: List[QPSpec] = field(default_factory=list)


@dataclass
class TrafficSpec:
    qp: str
    count: int
    msg_min: int
    msg_max: int
    interval_ticks: int = 0
    opcode: str = "SEND"
    start_tick: int = 0


@dataclass
class MigrationEntry:
    context: int
    to: str
    at: int
    transfer: str = "in_band"


@dataclass
class AssertionSpec:
    kind: str
    where: Dict[str, Any] = field(default_factory=dict)
    line: Optional[int] = None


@dataclass
class Scenario:
    seed: int = 1
    max_ticks: int = 1_000_000
    migration_enabled: bool = True
    net: Dict[str, Any] = field(default_factory=dict)
    transport: Dict[str, Any] = field(default_factory=dict)
    nodes: List[NodeSpec] = field(default_factory=list)
    contexts: List[ContextSpec] = field(default_factory=list)
    traffic: List[TrafficSpec] = field(default_factory=list)
    migrations: List[MigrationEntry] = field(default_factory=list)
    assertions: List[AssertionSpec] = field(default_factory=list)
    path: Optional[str] = None

    def qp_specs(self) -> Dict[str, Tuple[ContextSpec, QPSpec]]:
        return {qp.name: (ctx, qp) for ctx in self.contexts for qp in ctx.qps}


# ── line lookup ──────────────────────────────────────────────────────


def _header(line: str) -> Optional[Tuple[bool, str]]:
    m = _HEADER.match(line)
    if not m:
        return None
    return m.group(1) == "[[", m.group(2)


def locate(lines: Sequence[str], path: Sequence[PathItem]) -> Optional[int]:
    """1-based line of the key at `path`, e.g. ("contexts", 0, "qps", 1, "partner")."""
    start, end = 0, len(lines)
    prefix: List[str] = []
    best: Optional[int] = None
    i = 0
    while i < len(path):
        key = str(path[i])
        indexed = i + 1 < len(path) and isinstance(path[i + 1], int)
        name = ".".join(prefix + [key])
        headers = [n for n in range(start, end) if _header(lines[n]) == (indexed, name)]
        if headers:
            pick = path[i + 1] if indexed else 0
            if pick >= len(headers):
                return best
            s = headers[pick]
            e = next(
                (
                    n for n in range(s + 1, end)
                    if _header(lines[n]) and not _header(lines[n])[1].startswith(name + ".")
                ),
                end,
            )
            start, end, best = s + 1, e, s + 1
            prefix.append(key)
            i += 2 if indexed else 1
            continue
        # plain key inside the current table
        pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
        for n in range(start, end):
            if _header(lines[n]):
                break
            if pattern.match(lines[n]):
                return n + 1
        return best
    return best


# ── typed access ─────────────────────────────────────────────────────


class _Table:
    def __init__(self, data: Dict[str, Any], path: Tuple[PathItem, ...], lines: Sequence[str]):
        self.data = data
        self.path = path
        self.lines = lines

    def keypath(self, key: Optional[PathItem] = None) -> str:
        parts = list(self.path) + ([key] if key is not None else [])
        out = ""
        for p in parts:
            out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
        return out

    def error(self, key: Optional[PathItem], message: str) -> ScenarioError:
        path = self.path + ((key,) if key is not None else ())
        return ScenarioError(message, key=self.keypath(key), line=locate(self.lines, path))

    def get(self, key: str, kind: type, default: Any = ..., *, minimum: Optional[float] = None) -> Any:
        if key not in self.data:
            if default is ...:
                raise self.error(key, "required key is missing")
            return default
        value = self.data[key]
        ok = isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value, ok = float(value), True
        if not ok:
            raise self.error(key, f"expected {kind.__name__}, got {type(value).__name__}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be at least {minimum}, got {value}")
        return value

    def choice(self, key: str, options: Sequence[str], default: str) -> str:
        value = self.get(key, str, default)
        if value not in options:
            raise self.error(key, f"must be one of {', '.join(options)}, got {value!r}")
        return value

    def tables(self, key: str) -> List["_Table"]:
        raw = self.data.get(key, [])
        if not isinstance(raw, list) or not all(isinstance(t, dict) for t in raw):
            raise self.error(key, "expected an array of tables")
        return [_Table(t, self.path + (key, i), self.lines) for i, t in enumerate(raw)]

    def table(self, key: str) -> "_Table":
        raw = self.data.get(key, {})
        if not isinstance(raw, dict):
            raise self.error(key, "expected a table")
        return _Table(raw, self.path + (key,), self.lines)

    def reject_unknown(self, known: Sequence[str]) -> None:
        for key in self.data:
            if key not in known:
                raise self.error(key, "unknown key")


# ── parsing ──────────────────────────────────────────────────────────


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e.strerror or e}") from e
    scenario = parse_scenario(text)
    scenario.path = path
    return scenario


def parse_scenario(text: str) -> Scenario:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = _TOML_POS.search(str(e))
        raise ScenarioError(f"invalid TOML: {e}", line=int(m.group(1)) if m else None) from e

    lines = text.splitlines()
    root = _Table(data, (), lines)
    root.reject_unknown(
        ("seed", "max_ticks", "migration_enabled", "net", "transport", "nodes", "contexts", "traffic",
         "migrations", "assertions")
    )
    sc = Scenario(
        seed=root.get("seed", int, 1, minimum=0),
        max_ticks=root.get("max_ticks", int, 1_000_000, minimum=0),
        migration_enabled=root.get("migration_enabled", bool, True),
    )

    net = root.table("net")
    net.reject_unknown(("latency_ticks", "loss_rate", "dup_rate", "lossy_opcodes", "opcode_loss", "bulk_chunk_bytes"))
    sc.net = {
        "latency_ticks": net.get("latency_ticks", int, 1, minimum=1),
        "loss_rate": net.get("loss_rate", float, 0.0, minimum=0.0),
        "dup_rate": net.get("dup_rate", float, 0.0, minimum=0.0),
        "bulk_chunk_bytes": net.get("bulk_chunk_bytes", int, 4096, minimum=1),
    }
    for key in ("loss_rate", "dup_rate"):
        if sc.net[key] >= 1.0:
            raise net.error(key, "must be below 1.0")
    if "lossy_opcodes" in net.data:
        names = net.get("lossy_opcodes", list)
        for name in names:
            if name not in Opcode.__members__:
                raise net.error("lossy_opcodes", f"unknown opcode {name!r}")
        sc.net["lossy_opcodes"] = frozenset(names)
    if "opcode_loss" in net.data:
        rates = net.table("opcode_loss")
        overrides = []
        for name in rates.data:
            if name not in Opcode.__members__:
                raise rates.error(name, f"unknown opcode {name!r}")
            rate = rates.get(name, float, minimum=0.0)
            if rate >= 1.0:
                raise rates.error(name, "must be below 1.0")
            overrides.append((name, rate))
        sc.net["opcode_loss"] = tuple(overrides)

    tr = root.table("transport")
    tr.reject_unknown(("max_inflight", "ack_every", "backoff_cap"))
    sc.transport = {
        "max_inflight": tr.get("max_inflight", int, 64, minimum=1),
        "ack_every": tr.get("ack_every", int, 16, minimum=1),
        "backoff_cap": tr.get("backoff_cap", int, 64, minimum=1),
    }

    for t in root.tables("nodes"):
        t.reject_unknown(("name", "guid"))
        sc.nodes.append(NodeSpec(t.get("name", str), t.get("guid", int, minimum=0)))
    if not sc.nodes:
        raise root.error("nodes", "at least one node is required")

    for t in root.tables("contexts"):
        t.reject_unknown(("id", "node", "cq_depth", "srq_depth", "mrs", "qps"))
        ctx = ContextSpec(
            id=t.get("id", int, minimum=0),
            node=t.get("node", str),
            cq_depth=t.get("cq_depth", int, 1024, minimum=1),
            srq_depth=t.get("srq_depth", int, 0, minimum=0),
        )
        for size in t.get("mrs", list, []):
            if not isinstance(size, int) or isinstance(size, bool) or size <= 0:
                raise t.error("mrs", "MR sizes must be positive integers")
            ctx.mrs.append(size)
        for q in t.tables("qps"):
            q.reject_unknown(
                ("name", "partner", "mtu", "max_send_wr", "max_recv_wr", "timeout_ticks", "max_retries",
                 "start_psn")
            )
            mtu = q.get("mtu", int, 1024)
            if mtu not in (256, 512, 1024, 2048, 4096):
                raise q.error("mtu", f"unsupported MTU {mtu}")
            retries = q.get("max_retries", int, -1, minimum=-1)
            ctx.qps.append(
                QPSpec(
                    name=q.get("name", str),
                    partner=q.get("partner", str),
                    mtu=mtu,
                    max_send_wr=q.get("max_send_wr", int, 64, minimum=1),
                    max_recv_wr=q.get("max_recv_wr", int, 64, minimum=1),
                    timeout_ticks=q.get("timeout_ticks", int, 32, minimum=1),
                    max_retries=None if retries < 0 else retries,
                    start_psn=q.get("start_psn", int, 0, minimum=0) % (1 << 24),
                )
            )
        sc.contexts.append(ctx)

    for t in root.tables("traffic"):
        t.reject_unknown(("qp", "count", "msg_size", "interval_ticks", "opcode", "start_tick"))
        size = t.data.get("msg_size", 1024)
        if isinstance(size, int) and not isinstance(size, bool):
            lo = hi = size
        elif (isinstance(size, list) and len(size) == 2
              and all(isinstance(v, int) and not isinstance(v, bool) for v in size)):
            lo, hi = size
        else:
            raise t.error("msg_size", "expected an integer or a [min, max] pair")
        if not 0 <= lo <= hi:
            raise t.error("msg_size", f"invalid size range [{lo}, {hi}]")
        sc.traffic.append(
            TrafficSpec(
                qp=t.get("qp", str),
                count=t.get("count", int, minimum=0),
                msg_min=lo,
                msg_max=hi,
                interval_ticks=t.get("interval_ticks", int, 0, minimum=0),
                opcode=t.choice("opcode", TRAFFIC_OPCODES, "SEND"),
                start_tick=t.get("start_tick", int, 0, minimum=0),
            )
        )

    for t in root.tables("migrations"):
        t.reject_unknown(("context", "to", "at", "transfer"))
        sc.migrations.append(
            MigrationEntry(
                context=t.get("context", int),
                to=t.get("to", str),
                at=t.get("at", int, minimum=0),
                transfer=t.choice("transfer", TRANSFERS, "in_band"),
            )
        )

    for t in root.tables("assertions"):
        t.reject_unknown(("kind", "where"))
        where = t.get("where", dict, {})
        for key in where:
            if key not in TRACE_FIELDS:
                raise t.error("where", f"unknown trace field {key!r}")
        sc.assertions.append(
            AssertionSpec(t.choice("kind", ASSERTION_KINDS, "all_delivered"), where, locate(lines, t.path))
        )

    _validate_references(sc, root)
    return sc


def _validate_references(sc: Scenario, root: _Table) -> None:
    nodes = {}
    for i, node in enumerate(sc.nodes):
        if node.name in nodes:
            raise _err(root, ("nodes", i, "name"), f"duplicate node name {node.name!r}")
        nodes[node.name] = node
    guids = [n.guid for n in sc.nodes]
    if len(set(guids)) != len(guids):
        raise root.error("nodes", "node guids must be unique")

    ctx_ids = set()
    qps: Dict[str, Tuple[int, int]] = {}
    for ci, ctx in enumerate(sc.contexts):
        if ctx.node not in nodes:
            raise _err(root, ("contexts", ci, "node"), f"unknown node {ctx.node!r}")
        if ctx.id in ctx_ids:
            raise _err(root, ("contexts", ci, "id"), f"duplicate context id {ctx.id}")
        ctx_ids.add(ctx.id)
        for qi, qp in enumerate(ctx.qps):
            if qp.name in qps:
                raise _err(root, ("contexts", ci, "qps", qi, "name"), f"duplicate QP name {qp.name!r}")
            qps[qp.name] = (ci, qi)

    by_name = sc.qp_specs()
    for name, (ci, qi) in qps.items():
        qp = sc.contexts[ci].qps[qi]
        other = by_name.get(qp.partner)
        if other is None:
            raise _err(root, ("contexts", ci, "qps", qi, "partner"), f"unknown QP {qp.partner!r}")
        if other[1].partner != name:
            raise _err(
                root, ("contexts", ci, "qps", qi, "partner"),
                f"{qp.partner!r} is paired with {other[1].partner!r}, not {name!r}",
            )
        if other[1].mtu != qp.mtu:
            raise _err(root, ("contexts", ci, "qps", qi, "mtu"), f"MTU differs from partner {qp.partner!r}")

    for ti, t in enumerate(sc.traffic):
        if t.qp not in by_name:
            raise _err(root, ("traffic", ti, "qp"), f"unknown QP {t.qp!r}")
    for mi, m in enumerate(sc.migrations):
        if m.context not in ctx_ids:
            raise _err(root, ("migrations", mi, "context"), f"unknown context {m.context}")
        if m.to not in nodes:
            raise _err(root, ("migrations", mi, "to"), f"unknown node {m.to!r}")


def _err(root: _Table, path: Tuple[PathItem, ...], message: str) -> ScenarioError:
    t = _Table({}, path[:-1], root.lines)
    return t.error(path[-1], message)
