"""Terminal interface: run sessions, inspect memory, audit the log, run benchmarks.

Every command goes through the same module operations as library use; the
CLI only adds config loading, printing, and an interactive operator for
"ask" permissions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .audit import AuditLog, KINDS
from .context import PINNED, ContextSegment
from .environment import DriftingEnvironment
from .evaluation import ScenarioError, ScenarioSpec, corpus_dir, run_scenario
from .governance import OperatorChannelClosed, PermissionPolicy, ScriptedOperator
from .memory import MemoryFormatError, MemoryStore, ScoringWeights
from .orchestration import Harness, HarnessConfig, Task, run_session
from .scripted import answer_extractor, bind_executors, builtin_predicates, substrate_from_config
from .skills import RegistryError, SkillRegistry

CONFIG_ENV = "AGENTHARNESS_CONFIG"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


class TerminalOperator:
    def __init__(self, stdin=None, stdout=None) -> None:
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout

    def confirm(self, action: str) -> bool:
        self.stdout.write(f"allow {action}? [y/n] ")
        self.stdout.flush()
        line = self.stdin.readline()
        if not line:
            raise OperatorChannelClosed(action)
        return line.strip().lower() in ("y", "yes")


@dataclass
class CliConfig:
    workdir: Path
    store: Path
    audit: Path
    policy: Path
    registry: Path
    environment: Path | None
    scenarios: Path | None
    substrate: dict[str, Any]
    budget: int = 256
    horizon: int = 4
    max_retries: int = 2
    tau: float = 7.0
    staleness_horizon: float = 14.0
    pinned: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "CliConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        base = path.parent
        workdir = (base / raw.get("workdir", ".")).resolve()

        def resolve(key: str, required: bool = True) -> Path | None:
            value = raw.get(key)
            if value is None:
                if required:
                    raise ConfigError(f"config is missing {key!r}")
                return None
            p = (workdir / value)
            if not p.exists():
                raise ConfigError(f"{key} path does not exist: {p}")
            return p

        substrate = dict(raw.get("substrate", {"type": "fact-seeker"}))
        if substrate.get("type") == "scripted" and "path" in substrate:
            script = workdir / substrate["path"]
            if not script.exists():
                raise ConfigError(f"substrate script does not exist: {script}")
            substrate["proposals"] = json.loads(script.read_text(encoding="utf-8"))
        if substrate.get("type") == "remote":
            raise ConfigError("remote substrate bindings are not supported by this build")

        audit = workdir / raw.get("audit", "audit.jsonl")
        if not audit.parent.exists():
            raise ConfigError(f"audit directory does not exist: {audit.parent}")
        return cls(
            workdir=workdir,
            store=resolve("store"),
            audit=audit,
            policy=resolve("policy"),
            registry=resolve("registry"),
            environment=resolve("environment", required=False),
            scenarios=resolve("scenarios", required=False),
            substrate=substrate,
            budget=int(raw.get("budget", 256)),
            horizon=int(raw.get("horizon", 4)),
            max_retries=int(raw.get("max_retries", 2)),
            tau=float(raw.get("tau", 7.0)),
            staleness_horizon=float(raw.get("staleness_horizon", 14.0)),
            pinned=list(raw.get("pinned", [])),
        )


def config_path(args: argparse.Namespace) -> Path:
    value = args.config or os.environ.get(CONFIG_ENV)
    if not value:
        raise ConfigError(f"no config given (use --config or ${CONFIG_ENV})")
    return Path(value)


def load_environment(cfg: CliConfig) -> DriftingEnvironment | None:
    if cfg.environment is None:
        return None
    return DriftingEnvironment.from_dict(json.loads(cfg.environment.read_text(encoding="utf-8")))


def open_state(cfg: CliConfig) -> tuple[AuditLog, MemoryStore]:
    audit = AuditLog(cfg.audit)
    store = MemoryStore.load(cfg.store, audit, weights=ScoringWeights(tau=cfg.tau))
    return audit, store


def logical_now(audit: AuditLog, store: MemoryStore) -> float:
    stamps = [r.ts for r in audit.records]
    for e in store:
        stamps += [e.created_at, e.last_verified_at, e.last_accessed_at]
    return max(stamps, default=0)


def build_harness(cfg: CliConfig, operator: Any, audit: AuditLog, store: MemoryStore) -> Harness:
    env = load_environment(cfg) or DriftingEnvironment({})
    predicates = builtin_predicates()
    raw = json.loads(cfg.registry.read_text(encoding="utf-8"))
    records = raw["skills"] if isinstance(raw, dict) else raw
    registry = SkillRegistry.from_records(records, bind_executors(records, env), predicates)
    harness = Harness(
        substrate=substrate_from_config(cfg.substrate),
        registry=registry,
        predicates=predicates,
        policy=PermissionPolicy.load(cfg.policy),
        audit=audit,
        store=store,
        verifier=env.verify if cfg.environment is not None else None,
        environment=env,
        operator=operator,
        config=HarnessConfig(budget=cfg.budget, max_retries=cfg.max_retries, tau=cfg.tau,
                             staleness_horizon=cfg.staleness_horizon),
        pinned=[ContextSegment(p["id"], PINNED, p["content"], 1.0, 1.0, p.get("source", "config:pinned"))
                for p in cfg.pinned],
        extractor=answer_extractor,
    )
    harness.clock.advance_to(logical_now(audit, store))
    return harness


def _turn_line(turn) -> str:
    last = turn.proposals[-1] if turn.proposals else {}
    action = last.get("action", "error")
    detail = ""
    if action == "invoke-skill":
        if turn.outcomes and turn.outcomes[-1].get("denied"):
            detail = f" {turn.outcomes[-1]['skill']} denied"
        elif turn.outcomes:
            detail = f" {turn.outcomes[-1]['skill']}"
        elif turn.escalation:
            detail = f" escalated:{turn.escalation['reason']}"
    elif action == "respond":
        detail = f" {last['text']!r}"
    verified = turn.outcomes[-1].get("verified", False) if turn.outcomes else "-"
    if isinstance(verified, bool):
        verified = str(verified).lower()
    return (f"turn {turn.index} {action}{detail} verified={verified} "
            f"tokens={turn.counters.tokens} status={turn.status}")


def cmd_run(args: argparse.Namespace, out) -> int:
    cfg = CliConfig.load(config_path(args))
    if args.task_file:
        task_path = Path(args.task_file)
        if not task_path.exists():
            raise ConfigError(f"task file does not exist: {task_path}")
        text = task_path.read_text(encoding="utf-8").strip()
    else:
        text = args.task
    operator = ScriptedOperator(args.answers.split(",")) if args.answers is not None else TerminalOperator(stdout=out)
    audit, store = open_state(cfg)
    harness = build_harness(cfg, operator, audit, store)
    session_id = args.session_id or f"session-{len(audit):05d}"
    horizon = args.horizon or cfg.horizon
    trajectory = run_session(harness, [Task("task", text)], horizon, session_id)
    for turn in trajectory.turns:
        print(_turn_line(turn), file=out)
    store.save(cfg.store)
    traj_dir = cfg.workdir / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    path = traj_dir / f"{session_id}.jsonl"
    path.write_text(trajectory.to_jsonl(), encoding="utf-8")
    print(f"status {trajectory.status}; trajectory {path}", file=out)
    return EXIT_OK if trajectory.status == "solved" else EXIT_FAILED


MEMORY_HEADER = f"{'id':<8} {'scope_key':<20} {'conf':>6} {'status':<10} {'verified':>8}  content"


def cmd_memory(args: argparse.Namespace, out) -> int:
    cfg = CliConfig.load(config_path(args))
    audit, store = open_state(cfg)
    now = args.now if args.now is not None else logical_now(audit, store) + 1
    if args.memory_cmd == "list":
        print(MEMORY_HEADER, file=out)
        for e in store:
            print(f"{e.id:<8} {e.scope_key:<20} {e.confidence:>6.4f} {e.status:<10} {e.last_verified_at:>8}  {e.content}", file=out)
        return EXIT_OK
    if args.memory_cmd == "verify":
        if args.id not in store:
            print(f"no entry {args.id}", file=out)
            return EXIT_FAILED
        env = load_environment(cfg)
        outcome = store.verify_entry(args.id, env.verify if env else None, now)
        store.save(cfg.store)
        print(f"{outcome.id} {outcome.result}: confidence {outcome.confidence_before:.4f} -> "
              f"{outcome.confidence_after:.4f} status {outcome.status}", file=out)
        return EXIT_OK if outcome.result != "indeterminate" else EXIT_FAILED
    demoted = store.sweep(now, args.horizon if args.horizon is not None else cfg.staleness_horizon)
    store.save(cfg.store)
    print("demoted: " + (" ".join(demoted) if demoted else "(none)"), file=out)
    return EXIT_OK


def cmd_audit(args: argparse.Namespace, out) -> int:
    cfg = CliConfig.load(config_path(args))
    log = AuditLog(cfg.audit)
    if args.audit_cmd == "verify":
        bad = log.verify()
        if bad is None:
            print("ok", file=out)
            return EXIT_OK
        print(f"first-bad-seq {bad}", file=out)
        return EXIT_FAILED
    for record in log.records:
        if args.kind and record.kind != args.kind:
            continue
        print(f"{record.seq:>5} ts={record.ts} {record.kind:<22} {record.outcome:<28} {record.payload_digest[:12]}", file=out)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, out) -> int:
    path = Path(args.scenario)
    config = args.config or os.environ.get(CONFIG_ENV)
    if not path.exists() and config:
        cfg = CliConfig.load(config)
        if cfg.scenarios is not None:
            path = cfg.scenarios / args.scenario
    if not path.exists():
        path = corpus_dir() / f"{args.scenario}.json"
    if not path.exists():
        raise ScenarioError(f"scenario not found: {args.scenario}")
    scenario = ScenarioSpec.load(path)
    run = run_scenario(scenario)
    target = Path(args.out) if args.out else Path.cwd() / "bench" / scenario.name
    paths = run.write(target)
    out.write(run.report.table())
    print(f"report {paths['report']}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentharness", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"config file (default ${CONFIG_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a session on one task")
    group = run.add_mutually_exclusive_group(required=True)
    group.add_argument("--task")
    group.add_argument("--task-file")
    run.add_argument("--answers", help="scripted replies to ask prompts, e.g. y,n")
    run.add_argument("--session-id")
    run.add_argument("--horizon", type=int)

    mem = sub.add_parser("memory", help="inspect and maintain memory")
    mem_sub = mem.add_subparsers(dest="memory_cmd", required=True)
    mem_sub.add_parser("list")
    verify = mem_sub.add_parser("verify")
    verify.add_argument("id")
    sweep = mem_sub.add_parser("sweep")
    sweep.add_argument("--horizon", type=float)
    for p in (verify, sweep):
        p.add_argument("--now", type=float)
    mem.set_defaults(now=None)

    audit = sub.add_parser("audit", help="show or verify the audit log")
    audit_sub = audit.add_subparsers(dest="audit_cmd", required=True)
    show = audit_sub.add_parser("show")
    show.add_argument("--kind", choices=KINDS)
    audit_sub.add_parser("verify")

    bench = sub.add_parser("bench", help="run a benchmark scenario")
    bench.add_argument("scenario")
    bench.add_argument("--out", help="directory for report and artifacts")
    return parser


COMMANDS = {"run": cmd_run, "memory": cmd_memory, "audit": cmd_audit, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, ScenarioError, RegistryError, MemoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
