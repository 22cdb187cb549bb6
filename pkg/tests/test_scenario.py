"""Tests for scenario files, the scenario runner and the migrsim command line.

Scenarios are built from one small two-node text so every expected line
number can be computed from the text itself.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

import migrsim
import telemetry.telemetry_config as telemetry_config
from checkpoint import dump_context_to_file
from common.errors import ScenarioError
from scenario import Simulation, load_scenario, parse_scenario, run_scenario
from telemetry import NullTelemetry
from verbs import Access, Device, NodeAddress

SCENARIOS = Path(__file__).parent.parent / "scenarios"

BASE = """\
seed = 3
max_ticks = 100000

[net]
latency_ticks = 1

[[nodes]]
name = "n0"
guid = 0x101

[[nodes]]
name = "n1"
guid = 0x102

[[nodes]]
name = "n2"
guid = 0x103

[[contexts]]
id = 1
node = "n0"

[[contexts.qps]]
name = "a"
partner = "b"
timeout_ticks = 8

[[contexts]]
id = 2
node = "n1"

[[contexts.qps]]
name = "b"
partner = "a"
timeout_ticks = 8

[[traffic]]
qp = "a"
count = 30
msg_size = [1, 3000]
"""

DELIVERED = """
[[assertions]]
kind = "all_delivered"

[[assertions]]
kind = "no_errors"
"""

MIGRATE = """
[[migrations]]
context = 1
to = "n2"
at = 5

[[assertions]]
kind = "migrations_completed"

[[assertions]]
kind = "trace_contains"
where = { opcode = "RESUME", dir = "TX" }
"""


def _line_of(text: str, line: str, occurrence: int = 0) -> int:
    lines = text.splitlines()
    hits = [i for i, candidate in enumerate(lines) if candidate == line]
    return hits[occurrence] + 1


def _parse_error(text: str) -> ScenarioError:
    with pytest.raises(ScenarioError) as exc_info:
        parse_scenario(text)
    return exc_info.value


def _write(tmp_path: Path, text: str, name: str = "scenario.toml") -> str:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


# ── schema ─────────────────────────────────────────────────────────────


def test_parse_base_scenario() -> None:
    sc = parse_scenario(BASE + DELIVERED)

    assert sc.seed == 3
    assert [n.name for n in sc.nodes] == ["n0", "n1", "n2"]
    assert sc.nodes[0].guid == 0x101
    assert sc.net["latency_ticks"] == 1
    assert sc.net["loss_rate"] == 0.0
    assert sc.transport == {"max_inflight": 64, "ack_every": 16, "backoff_cap": 64}
    [ctx_a, ctx_b] = sc.contexts
    assert ctx_a.qps[0].partner == "b"
    assert ctx_a.qps[0].max_retries is None
    assert (sc.traffic[0].msg_min, sc.traffic[0].msg_max) == (1, 3000)
    assert [a.kind for a in sc.assertions] == ["all_delivered", "no_errors"]


def test_assertion_remembers_its_line() -> None:
    text = BASE + DELIVERED
    sc = parse_scenario(text)

    assert sc.assertions[0].line == _line_of(text, "[[assertions]]", 0)
    assert sc.assertions[1].line == _line_of(text, "[[assertions]]", 1)


def test_fixed_message_size_and_retry_count() -> None:
    text = BASE.replace("msg_size = [1, 3000]", "msg_size = 512").replace(
        'partner = "b"\ntimeout_ticks = 8', 'partner = "b"\ntimeout_ticks = 8\nmax_retries = 3'
    )
    sc = parse_scenario(text)

    assert (sc.traffic[0].msg_min, sc.traffic[0].msg_max) == (512, 512)
    assert sc.contexts[0].qps[0].max_retries == 3


def test_unknown_top_level_key() -> None:
    text = "bogus = 1\n" + BASE
    err = _parse_error(text)

    assert err.key == "bogus"
    assert err.line == 1
    assert err.message == "unknown key"


def test_unsupported_mtu_points_at_the_qp_key() -> None:
    text = BASE.replace('partner = "a"\n', 'partner = "a"\nmtu = 1000\n')
    err = _parse_error(text)

    assert err.key == "contexts[1].qps[0].mtu"
    assert err.line == _line_of(text, "mtu = 1000")
    assert "unsupported MTU 1000" in err.message


def test_loss_rate_must_stay_below_one() -> None:
    text = BASE.replace("latency_ticks = 1", "latency_ticks = 1\nloss_rate = 1.5")
    err = _parse_error(text)

    assert err.key == "net.loss_rate"
    assert err.line == _line_of(text, "loss_rate = 1.5")
    assert "must be below 1.0" in err.message


def test_per_opcode_loss_rates() -> None:
    text = BASE.replace("latency_ticks = 1", "latency_ticks = 1\nopcode_loss = { RESUME = 0.5, ACK = 0.1 }")
    sc = parse_scenario(text)

    assert sc.net["opcode_loss"] == (("RESUME", 0.5), ("ACK", 0.1))
    assert Simulation(sc).network.config.loss_rate_for("RESUME") == 0.5


def test_per_opcode_loss_rejects_unknown_opcodes() -> None:
    err = _parse_error(BASE.replace("latency_ticks = 1", "latency_ticks = 1\nopcode_loss = { BOGUS = 0.5 }"))

    assert err.key == "net.opcode_loss.BOGUS"
    assert "unknown opcode" in err.message


def test_unknown_partner() -> None:
    text = BASE.replace('partner = "b"', 'partner = "zz"')
    err = _parse_error(text)

    assert err.key == "contexts[0].qps[0].partner"
    assert err.line == _line_of(text, 'partner = "zz"')
    assert "unknown QP 'zz'" in err.message


def test_unknown_migration_target() -> None:
    text = BASE + MIGRATE.replace('to = "n2"', 'to = "n9"')
    err = _parse_error(text)

    assert err.key == "migrations[0].to"
    assert err.line == _line_of(text, 'to = "n9"')


def test_unknown_trace_field_in_where() -> None:
    text = BASE + '\n[[assertions]]\nkind = "trace_absent"\nwhere = { colour = "red" }\n'
    err = _parse_error(text)

    assert err.key == "assertions[0].where"
    assert err.line == _line_of(text, 'where = { colour = "red" }')


def test_invalid_toml_reports_the_line() -> None:
    text = BASE.replace("guid = 0x102", "guid = = 0x102")
    err = _parse_error(text)

    assert err.line == _line_of(text, "guid = = 0x102")
    assert err.message.startswith("invalid TOML")


def test_nodes_are_required() -> None:
    err = _parse_error("seed = 1\n")

    assert err.key == "nodes"
    assert err.diagnostic("x.toml") == "x.toml: nodes: at least one node is required"


def test_diagnostic_format() -> None:
    err = ScenarioError("unknown key", key="net.jitter", line=4)

    assert err.diagnostic("a.toml") == "a.toml:4: net.jitter: unknown key"
    assert str(err) == "<scenario>:4: net.jitter: unknown key"


def test_load_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ScenarioError, match="cannot read scenario"):
        load_scenario(str(tmp_path / "absent.toml"))


def test_second_traffic_entry_for_one_qp_is_rejected() -> None:
    text = BASE + '\n[[traffic]]\nqp = "a"\ncount = 1\n'

    with pytest.raises(ScenarioError, match="at most one traffic entry per QP"):
        Simulation(parse_scenario(text))


# ── runner ─────────────────────────────────────────────────────────────


def test_clean_run_passes() -> None:
    text = BASE + DELIVERED + '\n[[assertions]]\nkind = "trace_absent"\nwhere = { syndrome = "NAK_STOPPED" }\n'
    result = run_scenario(parse_scenario(text))

    assert result.passed
    assert result.exit_code == 0
    assert not result.report.timed_out
    assert result.report.completions == {"SUCCESS": 60}
    assert result.streams[0]["send_ok"] == 30
    assert result.streams[0]["received"] == 30
    assert result.streams[0]["mismatches"] == 0


def test_failed_assertion_sets_exit_code() -> None:
    text = BASE + '\n[[assertions]]\nkind = "trace_contains"\nwhere = { opcode = "RESUME" }\n'
    result = run_scenario(parse_scenario(text))

    [check] = result.assertions
    assert not check.passed
    assert result.exit_code == 1
    assert "no trace record matches" in check.detail
    assert check.describe().startswith(f"trace_contains (line {check.line}): FAILED")


def test_migration_scenario_passes() -> None:
    result = run_scenario(parse_scenario(BASE + DELIVERED + MIGRATE))

    assert result.passed, [a.describe() for a in result.assertions]
    [migration] = result.migrations
    assert migration.status.value == "completed"


def test_migrations_fail_when_disabled() -> None:
    result = run_scenario(parse_scenario(BASE + DELIVERED + MIGRATE), migration_enabled=False)

    checks = {a.kind: a for a in result.assertions}
    assert checks["all_delivered"].passed
    assert checks["no_errors"].passed
    assert not checks["migrations_completed"].passed
    assert "context 1: failed" in checks["migrations_completed"].detail
    assert result.exit_code == 1


def test_timeout_fails_all_delivered() -> None:
    result = run_scenario(parse_scenario(BASE + DELIVERED), max_ticks=5)

    checks = {a.kind: a for a in result.assertions}
    assert result.report.timed_out
    assert not checks["all_delivered"].passed
    assert checks["all_delivered"].detail.startswith("timed out at tick")


def test_same_seed_same_trace() -> None:
    text = BASE.replace("latency_ticks = 1", "latency_ticks = 1\nloss_rate = 0.1")
    first = run_scenario(parse_scenario(text), seed=9)
    second = run_scenario(parse_scenario(text), seed=9)
    other = run_scenario(parse_scenario(text), seed=10)

    assert first.report.trace.digest() == second.report.trace.digest()
    assert first.report.trace.digest() != other.report.trace.digest()
    assert first.report.dropped > 0


@pytest.mark.parametrize("seed", range(10))
def test_migration_support_costs_nothing_when_unused(seed: int) -> None:
    enabled = run_scenario(parse_scenario(BASE), seed=seed, migration_enabled=True)
    disabled = run_scenario(parse_scenario(BASE), seed=seed, migration_enabled=False)

    assert enabled.report.trace.digest() == disabled.report.trace.digest()


def test_stats_records_append_as_json_lines(tmp_path: Path) -> None:
    result = run_scenario(parse_scenario(BASE + DELIVERED))
    path = str(tmp_path / "stats.jsonl")

    result.write_stats(path)
    result.write_stats(path)

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert record["seed"] == 3
    assert record["packets"]["sent"] == result.report.sent
    assert record["completions"] == {"SUCCESS": 60}
    assert record["migrations"] == []
    assert record["assertions"]["passed"] == 2


def test_timeline_shows_stop_and_restore() -> None:
    sim = Simulation(parse_scenario(BASE + MIGRATE))
    sim.record_timeline()
    sim.run()

    entries = [line.split() for line in sim.timeline]
    assert ["n0", "0x000010", "STOPPED"] in [e[1:] for e in entries]
    assert ["n2", "0x000010", "RTS"] in [e[1:] for e in entries]
    ticks = [int(e[0]) for e in entries]
    assert ticks == sorted(ticks)


def test_bundled_migration_scenario_passes() -> None:
    result = run_scenario(load_scenario(str(SCENARIOS / "midstream.toml")))

    assert result.passed, [a.describe() for a in result.assertions]


# ── command line ───────────────────────────────────────────────────────


def test_cli_run_writes_outputs(tmp_path: Path, capsys) -> None:
    path = _write(tmp_path, BASE + DELIVERED + MIGRATE)
    trace_path = tmp_path / "out.trace"
    stats_path = tmp_path / "stats.jsonl"
    timeline_path = tmp_path / "timeline.txt"

    code = migrsim.main(
        ["run", path, "--trace", str(trace_path), "--stats", str(stats_path), "--timeline", str(timeline_path)]
    )

    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0].startswith("seed=3 final_tick=")
    digest = out[0].split("trace_sha256=")[1]
    assert hashlib.sha256(trace_path.read_bytes()).hexdigest() == digest
    assert out[1].startswith("migration ctx=1 ")
    assert ": completed " in out[1]
    assert all(line.endswith(": ok") for line in out[2:])
    assert len(stats_path.read_text(encoding="utf-8").splitlines()) == 1
    assert timeline_path.read_text(encoding="utf-8").strip()


def test_cli_seed_override(tmp_path: Path, capsys) -> None:
    path = _write(tmp_path, BASE)

    assert migrsim.main(["run", path, "--seed", "0x7"]) == 0
    assert capsys.readouterr().out.startswith("seed=7 ")


def test_cli_seed_from_environment(tmp_path: Path, capsys, monkeypatch) -> None:
    monkeypatch.setenv("MIGRSIM_DEFAULT_SEED", "11")
    path = _write(tmp_path, BASE)

    assert migrsim.main(["run", path]) == 0
    assert capsys.readouterr().out.startswith("seed=11 ")


def test_cli_rejects_bad_seed(tmp_path: Path) -> None:
    path = _write(tmp_path, BASE)

    with pytest.raises(SystemExit) as exc_info:
        migrsim.main(["run", path, "--seed", "abc"])
    assert exc_info.value.code == 2


def test_cli_missing_scenario(tmp_path: Path, capsys) -> None:
    code = migrsim.main(["run", str(tmp_path / "absent.toml")])

    assert code == 2
    assert "cannot read scenario" in capsys.readouterr().err


def test_cli_parse_error_names_path_and_line(tmp_path: Path, capsys) -> None:
    text = BASE.replace('partner = "a"\n', 'partner = "a"\nmtu = 1000\n')
    path = _write(tmp_path, text)

    code = migrsim.main(["run", path])

    assert code == 2
    line = _line_of(text, "mtu = 1000")
    assert f"{path}:{line}: contexts[1].qps[0].mtu:" in capsys.readouterr().err


def test_cli_assertion_failure_exits_one(tmp_path: Path, capsys) -> None:
    path = _write(tmp_path, BASE + MIGRATE)

    code = migrsim.main(["run", path, "--migration-enabled", "false"])

    out = capsys.readouterr().out
    assert code == 1
    assert ": failed " in out
    assert "migrations_completed" in out and "FAILED" in out


def test_cli_writes_metrics(tmp_path: Path, capsys, monkeypatch) -> None:
    monkeypatch.setattr(telemetry_config, "telemetry", NullTelemetry())
    path = _write(tmp_path, BASE)
    metrics_path = tmp_path / "metrics.prom"

    assert migrsim.main(["run", path, "--metrics", str(metrics_path)]) == 0

    text = metrics_path.read_text(encoding="utf-8")
    assert "migrsim_packets_total" in text
    assert "migrsim_work_completions_total" in text


def test_cli_verify_resume_default(capsys) -> None:
    assert migrsim.main(["verify-fig6"]) == 0
    assert capsys.readouterr().out.strip() == (
        "RESUME(5) -> ACK(6) -> SEND_MIDDLE(7) -> SEND_MIDDLE(8) -> SEND_LAST(9) -> ACK(9)"
    )


def test_cli_verify_resume_bad_arguments(capsys) -> None:
    assert migrsim.main(["verify-fig6", "--first-unacked", "8", "--expected-psn", "7"]) == 2
    assert "first_unacked" in capsys.readouterr().err


def test_cli_dump_info(tmp_path: Path, capsys) -> None:
    dev = Device("n0", NodeAddress.from_guid(5))
    ctx = dev.open_context(1)
    pd = ctx.alloc_pd()
    ctx.create_cq(4)
    ctx.reg_mr(pd, 0x1000, 4096, Access.LOCAL_WRITE)
    image_path = str(tmp_path / "ctx1.mgrd")
    dump_context_to_file(ctx, image_path)

    assert migrsim.main(["dump-info", image_path]) == 0

    out = capsys.readouterr().out.splitlines()
    assert out[0] == "node fe800000000000000000000000000005: 3 objects"
    assert [line.split()[0] for line in out[1:]] == ["PD", "MR", "CQ"]


def test_cli_dump_info_unreadable(tmp_path: Path, capsys) -> None:
    bad = tmp_path / "bad.mgrd"
    bad.write_bytes(b"not an image")

    assert migrsim.main(["dump-info", str(bad)]) == 2
    assert capsys.readouterr().err.startswith("migrsim dump-info: ")
