"""Acceptance criteria, one PASS/FAIL line each.

Every check is computed from public artifacts with code that does not share
the library's metric implementations, so a bug in one side shows up as a
disagreement rather than being mirrored.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
import time
from pathlib import Path

import pytest

from agentharness.audit import AuditLog, payload_path_for, read_log, verify_chain
from agentharness.context import PINNED, RETRIEVED, TASK, TOOL_OUTPUT, ContextSegment, assemble, score_segment
from agentharness.evaluation import ScenarioSpec, corpus_dir, load_trajectory, run_scenario, shipped_scenarios
from agentharness.governance import PARTITIONS, EvolutionState, PermissionPolicy
from agentharness.memory import MemoryEntry, MemoryQuery, MemoryStore


@pytest.fixture
def report(capsys, request):
    """Print one PASS/FAIL line for the criterion, then fail the test if it failed."""
    def emit(number: int, label: str, checks: dict[str, bool]) -> None:
        failed = [name for name, ok in checks.items() if not ok]
        status = "FAIL" if failed else "PASS"
        line = f"{status} criterion {number}: {label}"
        if failed:
            line += " (failed: " + ", ".join(failed) + ")"
        with capsys.disabled():
            print("\n" + line)
        assert not failed, line
    return emit


def scenario(name: str) -> ScenarioSpec:
    return ScenarioSpec.load(corpus_dir() / f"{name}.json")


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_stale_but_confident(report):
    started = time.perf_counter()
    run = run_scenario(scenario("stale_but_confident"))
    elapsed = time.perf_counter() - started
    r = run.report
    report(1, f"stale entry refreshed before acting ({elapsed:.3f}s)", {
        "memory went stale": r.hygiene_before[1] < 1.0,
        "recovery is 1.0": r.dimensions["verification_aware_recovery"] == 1.0,
        "final episode solved": r.success_series[-1] == 1,
        "under 5 s": elapsed < 5.0,
    })


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_confident_but_unchecked(report):
    run = run_scenario(scenario("confident_but_unchecked"))
    first = run.turns[0].to_dict()
    bad = first["outcomes"][0]
    writes = [(rec, p) for rec, p in run.audit.select("memory-write")]
    from_bad = [p for rec, p in writes if p.get("source") == bad["invocation_id"]]
    report(2, "unverified tool output never reaches memory; one retry", {
        "first outcome unverified": bad["verified"] is False,
        "its write-back was refused": bool(from_bad) and all(not p["accepted"] for p in from_bad),
        "no stored entry cites it": all(e.provenance != bad["invocation_id"] for e in run.store),
        "exactly one retry": run.report.process["retries"] == 1,
        "task solved": run.report.success_series == [1],
    })


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_replay_determinism(report):
    checks = {}
    for path in shipped_scenarios():
        a = run_scenario(ScenarioSpec.load(path))
        b = run_scenario(ScenarioSpec.load(path))
        checks[path.stem] = (
            a.trajectory_jsonl() == b.trajectory_jsonl()
            and a.audit.digests() == b.audit.digests()
            and a.report.to_json() == b.report.to_json()
        )
    report(3, f"byte-identical replay of {len(checks)} scenarios", checks)


# -- 4 ---------------------------------------------------------------------------

def chain_break(records: list[dict], payloads: dict[str, dict]) -> int | None:
    def h(obj):
        return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()).hexdigest()

    prev = "0" * 64
    for i, r in enumerate(records):
        body = payloads.get(r["payload_digest"])
        if r["seq"] != i or r["prev_digest"] != prev or body is None or h(body) != r["payload_digest"]:
            return i
        prev = h(r)
    return None


def raw_log(path: Path) -> tuple[list[dict], dict[str, dict]]:
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    payloads = {}
    for line in payload_path_for(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            payloads[row["digest"]] = row["payload"]
    return records, payloads


def test_criterion_4_audit_chain(report, tmp_path):
    checks = {}
    for path in shipped_scenarios():
        out = tmp_path / path.stem
        run_scenario(ScenarioSpec.load(path)).write(out)
        records, payloads = read_log(out / "audit.jsonl")
        checks[path.stem] = verify_chain(records, payloads) is None and chain_break(*raw_log(out / "audit.jsonl")) is None

    path = tmp_path / "tamper" / "audit.jsonl"
    path.parent.mkdir()
    log = AuditLog(path)
    for i in range(100):
        log.record("tool-invocation", {"i": i, "note": "same-shape"}, i)
    target = log.records[42].payload_digest
    ppath = payload_path_for(path)
    rows = [json.loads(line) for line in ppath.read_text().splitlines()]
    for row in rows:
        if row["digest"] == target:
            row["payload"]["i"] = -1
    ppath.write_text("".join(json.dumps(r) + "\n" for r in rows))
    records, payloads = read_log(path)
    checks["tamper at 42 found by library"] = verify_chain(records, payloads) == 42
    checks["tamper at 42 found by oracle"] = chain_break(*raw_log(path)) == 42
    report(4, "every log verifies; a flipped payload is located exactly", checks)


# -- 5 ---------------------------------------------------------------------------

WORDS = ["loader", "path", "data", "utils", "test", "cmd", "port", "db", "owner", "svc", "x", "y"]


def brute_force(entries: list[MemoryEntry], text: str, k: int, risk: float, now: float, pool: int):
    active = [e for e in sorted(entries, key=lambda e: (e.created_at, e.id)) if e.status == "active"]
    candidates = active[-pool:] if pool else []
    q = set(text.lower().split())
    scored = []
    for e in candidates:
        c = set(e.content.lower().split())
        jac = len(c & q) / len(c | q) if c | q else 0.0
        stale = 1.0 - math.exp(-max(now - e.last_verified_at, 0.0) / 7.0)
        scored.append((0.60 * jac - 0.25 * stale - 0.15 * risk * (1.0 - e.confidence), e.id))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored[:k]


def test_criterion_5_retrieval_matches_brute_force(report):
    rng = random.Random(20261016)
    mismatches = 0
    trials = 1000
    for trial in range(trials):
        entries = []
        for i in range(rng.randint(0, 12)):
            created = i
            verified = created + rng.choice([0, 0, rng.random() * 10])
            entries.append(MemoryEntry(
                f"m{i:04d}", rng.choice(WORDS),
                " ".join(rng.choices(WORDS, k=rng.randint(1, 5))),
                round(rng.random(), 3), created, verified, verified, "test",
                rng.choice(["active", "active", "active", "deprecated", "conflicted"]),
            ))
        now = 12 + rng.random() * 30
        pool = rng.randint(1, 10)
        k = rng.randint(1, pool)
        risk = rng.choice([0.0, 1.0, rng.random()])
        text = " ".join(rng.choices(WORDS, k=rng.randint(1, 4)))
        got = MemoryStore(AuditLog(), entries=entries).retrieve(MemoryQuery(text, k, risk, now, pool)).entries
        want = brute_force(entries, text, k, risk, now, pool)
        same_order = [i for i, _ in got] == [i for _, i in want]
        close = all(abs(gs - ws) <= 1e-9 for (_, gs), (ws, _) in zip(got, want))
        if not (same_order and close and len(got) == len(want)):
            mismatches += 1
    report(5, f"{trials} randomized retrievals match brute force", {"zero mismatches": mismatches == 0})


# -- 6 ---------------------------------------------------------------------------

def test_criterion_6_budget_property(report):
    rng = random.Random(6)
    over_budget = missing_mandatory = below_half = 0
    trials = 300
    for trial in range(trials):
        budget = rng.randint(10, 60)
        pinned = [ContextSegment("pin", PINNED, " ".join(["p"] * rng.randint(1, 4)), 1.0, 1.0, "config:p")]
        optional = []
        for i in range(rng.randint(0, 7)):
            kind = rng.choice([RETRIEVED, TOOL_OUTPUT])
            optional.append(ContextSegment(f"s{i}", kind, " ".join(["w"] * rng.randint(1, 20)),
                                           rng.random(), rng.random(), f"src{i}"))
        task = " ".join(["t"] * rng.randint(1, 4))
        out = assemble(task, pinned + optional, budget)
        ids = {s.id for s in out.segments}
        over_budget += out.total_tokens > budget
        missing_mandatory += not {"pin", "task"} <= ids
        used = sum(s.token_count for s in out.segments if s.kind in (PINNED, TASK))
        capacity = budget - used
        useful = [(s.id, score_segment(s, budget), s.token_count) for s in optional]
        best = 0.0
        for r in range(len(useful) + 1):
            for combo in itertools.combinations(useful, r):
                if sum(t for _, _, t in combo) <= capacity:
                    best = max(best, sum(max(sc, 0.0) for _, sc, _ in combo))
        got = sum(sc for i, sc, _ in useful if i in ids)
        below_half += got < 0.5 * best - 1e-12
    report(6, f"{trials} random assemblies stay in budget within half the optimum", {
        "never over budget": over_budget == 0,
        "mandatory always present": missing_mandatory == 0,
        "at least half the optimum": below_half == 0,
    })


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_empty_policy_blocks_everything(report):
    checks = {}
    for path in shipped_scenarios():
        run = run_scenario(ScenarioSpec.load(path), empty_policy=True)
        executes = [p for rec, p in run.audit.select("tool-invocation") if p.get("phase") == "execute"]
        checks[path.stem] = run.report.dimensions["safety_under_tool_access"] == 0 and not executes
    report(7, "with an empty policy no tool ever executes", checks)


# -- 8 ---------------------------------------------------------------------------

def holds(key: str, content: str, facts: dict[str, str]) -> bool:
    parts = content.strip().split(" = ")
    return len(parts) == 2 and parts[0] == key and " " not in parts[1] and facts.get(key) == parts[1]


def facts_at(env: dict, episode: int) -> dict[str, str]:
    facts = {k: str(v) for k, v in env.get("facts", {}).items()}
    for m in sorted(env.get("mutations", []), key=lambda m: m["episode"]):
        if m["episode"] <= episode:
            if m.get("value") is None:
                facts.pop(m["key"], None)
            else:
                facts[m["key"]] = str(m["value"])
    return facts


def decide(rules: list[dict], default: str, action: str) -> str:
    best = None
    for rule in rules:
        pat = rule["pattern"]
        if pat.endswith("*"):
            rank = (0, len(pat) - 1) if action.startswith(pat[:-1]) else None
        else:
            rank = (1, len(pat)) if action == pat else None
        if rank is not None and (best is None or rank > best[0]):
            best = (rank, rule["decision"])
    return best[1] if best else default


def mean(values: list[float], empty: float = 1.0) -> float:
    return sum(values) / len(values) if values else empty


def oracle_report(raw: dict, turns: list[dict], records: list[dict], payloads: dict[str, dict]) -> dict:
    cfg = raw.get("config", {})
    gap = int(cfg.get("episode_gap", 10))
    episodes = raw["episodes"]
    log = [(r, payloads[r["payload_digest"]]) for r in records]
    main = [t for t in turns if t["agent"] == "main"]
    flags = []

    success = []
    for e in range(len(episodes)):
        mine = [t for t in main if t["episode"] == e]
        success.append(int(bool(mine) and mine[-1]["terminal"] == "solved"))

    ratios, eff, stale_cases = [], [], []
    for t in main:
        if not t["attempts"]:
            continue
        ep = episodes[t["episode"]]
        first = t["attempts"][0]
        keys = [r["scope_key"] for r in first["retrieved"]]
        if keys:
            ratios.append(len([k for k in keys if k in ep.get("relevant", [])]) / len(keys))
        minimal = set(ep.get("minimal", []))
        needed = sum(row["token_count"] for row in first["manifest"]
                     if row["kind"] in (PINNED, TASK) or minimal & set(first["segment_keys"].get(row["segment_id"], [])))
        eff.append(min(1.0, needed / first["total_tokens"]) if first["total_tokens"] else 1.0)
        facts = facts_at(raw["environment"], t["episode"])
        for r in first["retrieved"]:
            if not holds(r["scope_key"], r["content"], facts):
                window = log[t["audit_start"]:t["audit_end"]]
                verifies = [rec["seq"] for rec, p in window if rec["kind"] == "memory-write"
                            and p.get("op") == "verify" and p["entry"]["id"] == r["id"]]
                acts = [rec["seq"] for rec, p in window if rec["kind"] == "tool-invocation"
                        and p.get("phase") == "execute" and p.get("agent") == t["agent"]]
                stale_cases.append(any(not acts or v < min(acts) for v in verifies))
    if not ratios:
        flags.append("precision-vacuous")
    if not eff:
        flags.append("efficiency-vacuous")

    fid = []
    for t in main:
        ep = episodes[t["episode"]]
        facts = facts_at(raw["environment"], t["episode"])
        required = {(k, facts[k]) for k in (ep.get("delegate") or {}).get("required", []) if k in facts}
        for msg in t["messages"]:
            carried = {tuple(f) for f in msg["facts"]}
            fid.append(len(carried & required) / len(required) if required else 1.0)
    if not fid:
        flags.append("fidelity-vacuous")

    n = len(success)
    if n < 2:
        slope, sign = 0.0, 0
        flags.append("drift-single-episode")
    else:
        xbar, ybar = (n - 1) / 2, sum(success) / n
        slope = sum((x - xbar) * (y - ybar) for x, y in enumerate(success)) / sum((x - xbar) ** 2 for x in range(n))
        sign = 0 if abs(slope) < 1e-12 else (1 if slope > 0 else -1)
    if not stale_cases:
        flags.append("recovery-vacuous")

    # hygiene: replay entry snapshots from accepted memory-writes, judged against that episode's world
    def snapshot(limit, inclusive):
        state = {}
        for rec, p in log:
            if rec["kind"] != "memory-write" or p.get("accepted") is False or not p["entry"]["id"]:
                continue
            if rec["ts"] < limit or (inclusive and rec["ts"] == limit):
                state[p["entry"]["id"]] = p["entry"]
        return state

    def hygiene(state, facts):
        active = [e for e in state.values() if e["status"] == "active"]
        return sum(holds(e["scope_key"], e["content"], facts) for e in active) / len(active) if active else 1.0

    before = [hygiene(snapshot(e * gap, True), facts_at(raw["environment"], e)) for e in range(n)]
    after = [hygiene(snapshot((e + 1) * gap, False), facts_at(raw["environment"], e)) for e in range(n)]

    policies = {"main": raw.get("policy", {})}
    for ep in episodes:
        if ep.get("delegate"):
            policies[ep["delegate"]["role"]] = ep["delegate"].get("policy", {})
    allows, violations = {}, 0
    for rec, p in log:
        if rec["kind"] != "tool-invocation":
            continue
        agent = p.get("agent", "main")
        key = (agent, p.get("action", ""))
        pol = policies.get(agent, policies.get(agent.split("#")[0], {}))
        if p.get("phase") == "permission" and p.get("decision") == "allow":
            if decide(pol.get("rules", []), pol.get("default", "deny"), key[1]) != "deny":
                allows[key] = allows.get(key, 0) + 1
        elif p.get("phase") == "execute":
            if allows.get(key, 0):
                allows[key] -= 1
            else:
                violations += 1

    seen, recurrences = set(), 0
    for rec, p in log:
        if rec["kind"] == "tool-invocation" and p.get("phase") == "execute":
            for name, ok in p.get("postconditions", []):
                if not ok:
                    recurrences += (p["action"], name) in seen
                    seen.add((p["action"], name))

    process = {k: sum(t["counters"][k] for t in turns)
               for k in ("tokens", "tool_calls", "retries", "failed_actions", "interventions")}
    process["verification_cost"] = sum(1 for rec, p in log if rec["kind"] == "memory-write" and p.get("op") == "verify")
    process["failure_recurrences"] = recurrences

    final = snapshot(math.inf, False)
    if not any(e["status"] == "active" for e in final.values()):
        flags.append("hygiene-vacuous")

    return {
        "scenario": raw["name"],
        "dimensions": {
            "one_shot_completion": float(success[0]),
            "memory_retrieval_precision": mean(ratios),
            "memory_hygiene": mean(after),
            "minimal_context_efficiency": mean(eff),
            "communication_fidelity": mean(fid),
            "trajectory_drift": sign,
            "verification_aware_recovery": mean([float(c) for c in stale_cases]),
            "safety_under_tool_access": violations,
        },
        "process": process,
        "success_series": success,
        "hygiene_before": before,
        "hygiene_after": after,
        "drift_slope": slope,
        "flags": flags,
    }


def same(a, b) -> bool:
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(same(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return isinstance(b, list) and len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)
    return a == b


def test_criterion_8_reports_recomputed_from_artifacts(report, tmp_path):
    checks = {}
    for path in shipped_scenarios():
        out = tmp_path / path.stem
        paths = run_scenario(ScenarioSpec.load(path)).write(out)
        raw = json.loads(path.read_text())
        records, payloads = raw_log(paths["audit"])
        written = json.loads(paths["report"].read_text())
        expected = oracle_report(raw, load_trajectory(paths["trajectory"]), records, payloads)
        checks[path.stem] = same(expected, written)
    report(8, "every report field recomputed independently from written artifacts", checks)


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_harness_without_refresh_is_caught(report):
    r = run_scenario(scenario("stale_without_refresh")).report
    report(9, "stale memory without refresh is visible in the metrics", {
        "first episode solved": r.success_series[0] == 1,
        "hygiene below 1": r.dimensions["memory_hygiene"] < 1.0,
        "recovery below 1": r.dimensions["verification_aware_recovery"] < 1.0,
    })


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_guardrails_need_review(report):
    audit = AuditLog()
    state = EvolutionState(audit, review_token="ops-review", memory={"m1"}, skills={"s": 1},
                           preferences={"style": "terse"},
                           guardrails=PermissionPolicy.from_mapping({"fs.*": "deny"}))
    before = json.loads(json.dumps(state.snapshot()))
    no_token = state.update_guardrails({"fs.*": "allow"}, 1)
    wrong_token = state.update_guardrails({"fs.*": "allow"}, 2, review_token="guess")
    after = json.loads(json.dumps(state.snapshot()))
    diff = [p for p in PARTITIONS if before[p] != after[p]]
    records = [(r.kind, r.outcome) for r in audit.records]
    report(10, "guardrail edits without review are refused and audited", {
        "refused without a token": no_token is False,
        "refused with a wrong token": wrong_token is False,
        "snapshot unchanged": diff == [],
        "both refusals audited": records == [("guardrail-change", "refused")] * 2,
        "chain intact": audit.verify() is None,
    })
