from __future__ import annotations

import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from agentharness.audit import AuditLog, payload_path_for
from agentharness.cli import CONFIG_ENV, main
from agentharness.context import PINNED, ContextSegment
from agentharness.environment import DriftingEnvironment
from agentharness.evaluation import shipped_scenarios
from agentharness.governance import PermissionPolicy, ScriptedOperator
from agentharness.memory import MemoryEntry, MemoryStore
from agentharness.orchestration import Harness, HarnessConfig, Task, run_session
from agentharness.scripted import FactSeeker, answer_extractor, bind_executors, builtin_predicates
from agentharness.skills import SkillRegistry


def cli(*argv, workdir: Path | None = None, stdin: str | None = None):
    out = io.StringIO()
    args = list(argv)
    if workdir is not None:
        args = ["--config", str(workdir / "config.json"), *args]
    if stdin is not None:
        old = sys.stdin
        sys.stdin = io.StringIO(stdin)
        try:
            code = main(args, out=out)
        finally:
            sys.stdin = old
    else:
        code = main(args, out=out)
    return code, out.getvalue()


def rewrite_config(workdir: Path, **changes) -> None:
    path = workdir / "config.json"
    cfg = json.loads(path.read_text())
    cfg.update(changes)
    path.write_text(json.dumps(cfg))


def turn_lines(text: str) -> list[str]:
    return [line for line in text.splitlines() if line.startswith("turn ")]


# -- run --------------------------------------------------------------------------

def test_scripted_solve_one_line(cli_workdir):
    (cli_workdir / "answer.json").write_text(json.dumps([{"action": "respond", "text": "8080"}]))
    rewrite_config(cli_workdir, substrate={"type": "scripted", "path": "answer.json"})
    code, out = cli("run", "--task", "report svc.port", "--session-id", "s1", workdir=cli_workdir)
    assert code == 0
    # by hand: pinned "answer with the bare value" is 5 words, the task "report svc.port" is 2
    assert turn_lines(out) == ["turn 1 respond '8080' verified=- tokens=7 status=solved"]
    assert (cli_workdir / "trajectories" / "s1.jsonl").exists()


def test_ask_answered_no_is_visible(cli_workdir):
    rewrite_config(cli_workdir, substrate={"type": "scripted", "path": "script.json"})
    code, out = cli("run", "--task", "clean svc.owner", "--answers", "n", workdir=cli_workdir)
    assert code == 0
    lines = turn_lines(out)
    assert "env.delete denied" in lines[0]
    log = AuditLog(cli_workdir / "audit.jsonl")
    denials = [p for r, p in log.select("tool-invocation") if p.get("asked")]
    assert denials == [{"phase": "permission", "agent": "main", "action": "env.delete",
                        "rule": "env.delete", "asked": True, "decision": "deny"}]
    assert json.loads((cli_workdir / "environment.json").read_text())["facts"]["svc.owner"] == "team-a"


def test_interactive_prompt(cli_workdir):
    rewrite_config(cli_workdir, substrate={"type": "scripted", "path": "script.json"})
    code, out = cli("run", "--task", "clean svc.owner", workdir=cli_workdir, stdin="y\n")
    assert code == 0
    assert "allow env.delete? [y/n]" in out
    first = next(line for line in out.splitlines() if "turn 1 " in line)
    assert "env.delete verified=true" in first


def test_missing_store_path_named(cli_workdir, capsys):
    (cli_workdir / "memory.jsonl").unlink()
    code, _ = cli("run", "--task", "report svc.port", workdir=cli_workdir)
    assert code != 0
    assert "memory.jsonl" in capsys.readouterr().err


def test_config_from_environment_variable(cli_workdir, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV, str(cli_workdir / "config.json"))
    code, out = cli("audit", "verify")
    assert (code, out.strip()) == (0, "ok")


def test_no_config_is_an_error(monkeypatch, capsys):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    assert cli("audit", "verify")[0] == 2
    assert CONFIG_ENV in capsys.readouterr().err


def test_remote_substrate_rejected(cli_workdir, capsys):
    rewrite_config(cli_workdir, substrate={"type": "remote", "endpoint": "https://example.invalid"})
    assert cli("run", "--task", "x", workdir=cli_workdir)[0] == 2
    assert "remote" in capsys.readouterr().err


def test_unsolved_run_exits_nonzero(cli_workdir):
    code, out = cli("run", "--task", "report nothing.here", "--horizon", "2", workdir=cli_workdir)
    assert code == 1 and "status exhausted" in out


def test_cli_and_library_audits_are_digest_identical(cli_workdir, tmp_path):
    code, _ = cli("run", "--task", "report svc.port", "--session-id", "s1", workdir=cli_workdir)
    assert code == 0
    cli_digests = AuditLog(cli_workdir / "audit.jsonl").digests()

    fixture = Path(__file__).parent / "fixtures" / "cli"
    env = DriftingEnvironment.from_dict(json.loads((fixture / "environment.json").read_text()))
    records = json.loads((fixture / "skills.json").read_text())["skills"]
    predicates = builtin_predicates()
    audit = AuditLog()
    harness = Harness(
        substrate=FactSeeker(["lookup"]),
        registry=SkillRegistry.from_records(records, bind_executors(records, env), predicates),
        predicates=predicates,
        policy=PermissionPolicy.load(fixture / "policy.json"),
        audit=audit,
        store=MemoryStore(audit),
        verifier=env.verify,
        environment=env,
        operator=ScriptedOperator(),
        config=HarnessConfig(budget=64),
        pinned=[ContextSegment("conventions", PINNED, "answer with the bare value", 1.0, 1.0, "config:conventions")],
        extractor=answer_extractor,
    )
    run_session(harness, [Task("task", "report svc.port")], 4, "s1")
    assert audit.digests() == cli_digests
    assert len(cli_digests) > 0


# -- memory -----------------------------------------------------------------------

def test_memory_list_empty_is_header_only(cli_workdir):
    code, out = cli("memory", "list", workdir=cli_workdir)
    assert code == 0 and len(out.splitlines()) == 1 and out.split()[0] == "id"


def seed(workdir: Path, *entries: MemoryEntry) -> None:
    MemoryStore(AuditLog(), entries=entries).save(workdir / "memory.jsonl")


def test_memory_verify_failing_entry_halves_confidence(cli_workdir):
    seed(cli_workdir, MemoryEntry("m0001", "svc.port", "svc.port = 9999", 0.6, 0, 0, 0, "operator"))
    code, out = cli("memory", "verify", "m0001", workdir=cli_workdir)
    assert code == 0
    assert out.strip() == "m0001 fail: confidence 0.6000 -> 0.3000 status active"
    assert MemoryStore.load(cli_workdir / "memory.jsonl", AuditLog()).get("m0001").confidence == pytest.approx(0.3)


def test_memory_verify_unknown_id(cli_workdir):
    assert cli("memory", "verify", "m0042", workdir=cli_workdir)[0] == 1


def test_memory_sweep_prints_demoted(cli_workdir):
    seed(cli_workdir,
         MemoryEntry("m0001", "a", "a = 1", 0.3, 0, 0, 0, "operator"),
         MemoryEntry("m0002", "b", "b = 1", 0.9, 0, 0, 0, "operator"))
    code, out = cli("memory", "sweep", "--now", "40", workdir=cli_workdir)
    assert (code, out.strip()) == (0, "demoted: m0001")
    code, out = cli("memory", "list", workdir=cli_workdir)
    assert "deprecated" in out.splitlines()[1]


def test_corrupt_store_rejected(cli_workdir, capsys):
    (cli_workdir / "memory.jsonl").write_text('{"id": "m1"}\n')
    assert cli("memory", "list", workdir=cli_workdir)[0] == 2
    assert "memory.jsonl" in capsys.readouterr().err


# -- audit --------------------------------------------------------------------------

def test_audit_show_filters_kind(cli_workdir):
    cli("run", "--task", "report svc.port", workdir=cli_workdir)
    code, out = cli("audit", "show", "--kind", "memory-write", workdir=cli_workdir)
    assert code == 0 and out.strip()
    assert all(" memory-write " in line for line in out.splitlines())
    _, everything = cli("audit", "show", workdir=cli_workdir)
    assert len(everything.splitlines()) > len(out.splitlines())


def test_audit_verify_tampered(cli_workdir):
    cli("run", "--task", "report svc.port", workdir=cli_workdir)
    ppath = payload_path_for(cli_workdir / "audit.jsonl")
    log = AuditLog(cli_workdir / "audit.jsonl")
    target = log.records[2].payload_digest
    rows = [json.loads(line) for line in ppath.read_text().splitlines()]
    for row in rows:
        if row["digest"] == target:
            row["payload"]["agent"] = "intruder"
    ppath.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out = cli("audit", "verify", workdir=cli_workdir)
    assert (code, out.strip()) == (1, "first-bad-seq 2")


# -- bench ----------------------------------------------------------------------------

def test_bench_table_and_determinism(tmp_path):
    scenario = str(shipped_scenarios()[0])
    code, out = cli("bench", scenario, "--out", str(tmp_path / "one"))
    assert code == 0
    rows = out.splitlines()[2:10]
    assert len(rows) == 8
    for row in rows:
        value = float(row[32:])
        assert value == int(value) or 0.0 <= value <= 1.0
    cli("bench", scenario, "--out", str(tmp_path / "two"))
    for name in ("report.json", "report.txt", "trajectory.jsonl", "audit.jsonl"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_bench_by_shipped_name(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    code, out = cli("bench", "stale_without_refresh", "--out", str(tmp_path))
    assert code == 0 and out.startswith("scenario: stale_without_refresh")
    assert (tmp_path / "report.json").exists()


def test_bench_unresolvable(tmp_path, capsys):
    assert cli("bench", str(tmp_path / "nope.json"))[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "bad", "environment": {"facts": {}}, "skills": [],
                               "episodes": [{"task": "report ghost"}]}))
    assert cli("bench", str(bad), "--out", str(tmp_path / "o"))[0] == 2
    assert "ghost" in capsys.readouterr().err


def test_console_script_entry_point(cli_workdir):
    proc = subprocess.run([sys.executable, "-m", "agentharness.cli", "--config", str(cli_workdir / "config.json"),
                           "audit", "verify"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"
