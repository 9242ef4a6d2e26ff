"""Deterministic stand-ins for the model and the tools.

These are what the tests, demos and the shipped scenario corpus run against:
a scripted substrate, a rule-following fact seeker, and environment-bound
executors and predicates addressable by name.
"""

from __future__ import annotations

import re
from typing import Any, Callable, Iterable, Mapping, Sequence

from .context import RETRIEVED, TASK, TOOL_OUTPUT, ContextAssembly
from .environment import DriftingEnvironment, parse_fact, parse_facts, render_fact
from .orchestration import Proposal
from .skills import Executor, PredicateTable

TASK_KEY_RE = re.compile(r"report (\S+)")

Step = Proposal | Callable[[ContextAssembly], Proposal]


class ScriptedSubstrate:
    """Plays back proposals in order, repeating the last one once exhausted."""

    def __init__(self, steps: Sequence[Step]) -> None:
        if not steps:
            raise ValueError("a script needs at least one step")
        self.steps = list(steps)
        self.calls = 0
        self.seen: list[ContextAssembly] = []

    def propose(self, assembly: ContextAssembly) -> Proposal:
        self.seen.append(assembly)
        step = self.steps[min(self.calls, len(self.steps) - 1)]
        self.calls += 1
        return step(assembly) if callable(step) else step


def task_key(assembly: ContextAssembly) -> str | None:
    for seg in assembly.of_kind(TASK):
        match = TASK_KEY_RE.search(seg.content)
        if match:
            return match.group(1)
    return None


class FactSeeker:
    """Answers "report <key>" tasks.

    Prefers a value seen in a tool output, then a retrieved memory, and
    otherwise invokes a lookup skill. It trusts whatever memory survives into
    the assembly, which is exactly what makes stale memory dangerous.
    """

    def __init__(self, tags: Iterable[str] = ("lookup",)) -> None:
        self.tags = frozenset(tags)

    def propose(self, assembly: ContextAssembly) -> Proposal:
        key = task_key(assembly)
        if key is None:
            return Proposal.clarify("which key?")
        for seg in assembly.of_kind(TOOL_OUTPUT):
            for k, v in parse_facts(seg.content):
                if k == key:
                    return Proposal.respond(v)
        memories = sorted(
            (row for row in assembly.manifest if row.kind == RETRIEVED),
            key=lambda row: (-row.score, row.segment_id),
        )
        contents = {s.id: s.content for s in assembly.of_kind(RETRIEVED)}
        for row in memories:
            parsed = parse_fact(contents[row.segment_id])
            if parsed and parsed[0] == key:
                return Proposal.respond(parsed[1], confidence=0.8)
        return Proposal.invoke(self.tags, {"key": key})


class EchoSubstrate:
    """Responds with the concatenated tool outputs it was shown."""

    def propose(self, assembly: ContextAssembly) -> Proposal:
        return Proposal.respond("\n".join(s.content for s in assembly.of_kind(TOOL_OUTPUT)))


def answer_extractor(transcript: Sequence[Mapping[str, Any]]) -> list[dict[str, str]]:
    """Proposes "<key> = <answer>" for every solved report task."""
    found: list[dict[str, str]] = []
    for turn in transcript:
        if turn.get("status") != "solved":
            continue
        match = TASK_KEY_RE.search(turn.get("task_text", ""))
        answer = next((p for p in reversed(turn.get("proposals", [])) if p.get("action") == "respond"), None)
        if match and answer and answer["text"]:
            found.append({"scope_key": match.group(1), "content": render_fact(match.group(1), answer["text"])})
    return found


def lookup_executor(env: DriftingEnvironment) -> Executor:
    def run(args: Mapping[str, Any]) -> dict[str, Any]:
        key = args["key"]
        value = env.facts.get(key)
        if value is None:
            return {"key": key, "value": None}
        return {"key": key, "value": value, "facts": {key: value},
                "memory": [{"scope_key": key, "content": render_fact(key, value)}]}
    return run


def flaky_lookup_executor(env: DriftingEnvironment, failures: int = 1) -> Executor:
    """Confidently wrong for its first ``failures`` calls."""
    calls = {"n": 0}
    honest = lookup_executor(env)

    def run(args: Mapping[str, Any]) -> dict[str, Any]:
        calls["n"] += 1
        if calls["n"] <= failures:
            key = args["key"]
            guess = "unverified-guess"
            return {"key": key, "value": guess, "facts": {key: guess},
                    "memory": [{"scope_key": key, "content": render_fact(key, guess)}]}
        return honest(args)
    return run


def delete_executor(env: DriftingEnvironment) -> Executor:
    def run(args: Mapping[str, Any]) -> dict[str, Any]:
        env.facts.pop(args["key"], None)
        return {"deleted": args["key"]}
    return run


def echo_executor(env: DriftingEnvironment | None = None) -> Executor:
    def run(args: Mapping[str, Any]) -> dict[str, Any]:
        return dict(args)
    return run


EXECUTOR_FACTORIES: dict[str, Callable[..., Executor]] = {
    "lookup": lookup_executor,
    "flaky_lookup": flaky_lookup_executor,
    "delete": delete_executor,
    "echo": echo_executor,
}


def builtin_predicates() -> PredicateTable:
    table = PredicateTable()

    @table.precondition("has-key")
    def _has_key(args):
        return bool(args.get("key"))

    @table.postcondition("has-key")
    def _echo_key(args, result, env):
        return bool(result.get("key"))

    @table.postcondition("value-present")
    def _value_present(args, result, env):
        return result.get("value") is not None

    @table.postcondition("value-matches-environment")
    def _matches(args, result, env):
        return result.get("value") is not None and env.facts.get(args["key"]) == result.get("value")

    @table.postcondition("key-absent")
    def _absent(args, result, env):
        return args["key"] not in env.facts

    return table


def bind_executors(records: Iterable[Mapping[str, Any]], env: DriftingEnvironment) -> dict[str, Executor]:
    """Executors keyed by skill name; each record names its builtin via ``executor``."""
    bound: dict[str, Executor] = {}
    for raw in records:
        kind = raw.get("executor", raw["name"])
        if kind not in EXECUTOR_FACTORIES:
            continue
        options = raw.get("executor_options", {})
        bound[raw["name"]] = EXECUTOR_FACTORIES[kind](env, **options)
    return bound


def substrate_from_config(raw: Mapping[str, Any] | None) -> Any:
    raw = raw or {"type": "fact-seeker"}
    kind = raw.get("type", "fact-seeker")
    if kind == "fact-seeker":
        return FactSeeker(raw.get("tags", ("lookup",)))
    if kind == "echo":
        return EchoSubstrate()
    if kind == "scripted":
        return ScriptedSubstrate([proposal_from_dict(p) for p in raw["proposals"]])
    raise ValueError(f"unknown substrate type {kind!r}")


def proposal_from_dict(raw: Mapping[str, Any]) -> Proposal:
    action = raw["action"]
    confidence = float(raw.get("confidence", 1.0))
    if action == "invoke-skill":
        return Proposal.invoke(raw["tags"], raw.get("args", {}), raw.get("subtask", ""), confidence)
    if action == "respond":
        return Proposal.respond(raw.get("text", ""), confidence)
    if action == "request-clarification":
        return Proposal.clarify(raw.get("text", ""), confidence)
    raise ValueError(f"unknown action {action!r}")
