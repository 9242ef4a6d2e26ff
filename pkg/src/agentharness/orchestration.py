"""The control loop: assemble, refresh, propose, route, gate, invoke, verify, write back.

The reasoning substrate only ever sees a ``ContextAssembly`` and returns a
``Proposal``; everything with side effects happens here, behind governance.
Failure feedback re-enters through the context as tool-output segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .audit import AuditLog
from .context import (
    PINNED,
    RETRIEVED,
    TOOL_OUTPUT,
    ContextAssembly,
    ContextSegment,
    MandatoryOverflow,
    assemble,
    refresh,
)
from .environment import parse_facts
from .governance import OperatorChannel, PermissionDecision, PermissionPolicy, WriteGate, check_permission
from .memory import MemoryEntry, MemoryQuery, MemoryStore, jaccard_relevance
from .skills import (
    PreconditionFailed,
    PredicateTable,
    SkillOutcome,
    SkillRegistry,
    SkillRouter,
    SkillRuntime,
    Subtask,
    escalate,
    verify_outcome,
)

INVOKE, RESPOND, CLARIFY = "invoke-skill", "respond", "request-clarification"
SOLVED, EXHAUSTED, ESCALATED = "solved", "exhausted", "escalated"
MESSAGE_KINDS = ("handoff", "summary", "clarification-request", "uncertainty-report")


@dataclass(frozen=True)
class Proposal:
    action: str
    text: str = ""
    subtask: Subtask | None = None
    args: Mapping[str, Any] = field(default_factory=dict)
    stated_confidence: float = 1.0

    def __post_init__(self) -> None:
        if self.action not in (INVOKE, RESPOND, CLARIFY):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == INVOKE and self.subtask is None:
            raise ValueError("invoke-skill needs a subtask")
        if not 0.0 <= self.stated_confidence <= 1.0:
            raise ValueError("stated_confidence outside [0, 1]")

    @classmethod
    def invoke(cls, tags: Iterable[str], args: Mapping[str, Any] | None = None, subtask_id: str = "", confidence: float = 1.0) -> "Proposal":
        tags = frozenset(tags)
        return cls(INVOKE, subtask=Subtask(subtask_id or "+".join(sorted(tags)), tags), args=dict(args or {}), stated_confidence=confidence)

    @classmethod
    def respond(cls, text: str, confidence: float = 1.0) -> "Proposal":
        return cls(RESPOND, text=text, stated_confidence=confidence)

    @classmethod
    def clarify(cls, text: str, confidence: float = 1.0) -> "Proposal":
        return cls(CLARIFY, text=text, stated_confidence=confidence)

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "text": self.text,
            "subtask": None if self.subtask is None else {"id": self.subtask.id, "tags": sorted(self.subtask.tags)},
            "args": dict(self.args),
            "stated_confidence": self.stated_confidence,
        }


class ReasoningSubstrate(Protocol):
    def propose(self, assembly: ContextAssembly) -> Proposal: ...


@dataclass(frozen=True)
class Task:
    id: str
    text: str
    # Environment-side judgement of a response; None accepts any response.
    check: Callable[[str], bool] | None = field(default=None, compare=False)


@dataclass(frozen=True)
class AgentMessage:
    kind: str
    sender: str
    recipient: str
    facts: tuple[tuple[str, str], ...] = ()
    uncertainty: float | None = None
    text: str = ""

    def problems(self) -> list[str]:
        found = []
        if self.kind not in MESSAGE_KINDS:
            found.append(f"unknown kind {self.kind!r}")
        if self.kind in ("handoff", "summary") and not self.facts:
            found.append("empty-facts")
        if self.kind == "uncertainty-report" and self.uncertainty is None:
            found.append("missing-uncertainty")
        if self.uncertainty is not None and not 0.0 <= self.uncertainty <= 1.0:
            found.append("uncertainty-out-of-range")
        return found

    def render(self) -> str:
        head = f"message {self.kind} from {self.sender}"
        if self.uncertainty is not None:
            head += f" uncertainty={self.uncertainty}"
        lines = [head] + [f"{k} = {v}" for k, v in self.facts]
        if self.text:
            lines.append(self.text)
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["facts"] = [list(f) for f in self.facts]
        return d


@dataclass(frozen=True)
class Acknowledgment:
    accepted: bool
    reason: str
    seq: int | None = None


@dataclass
class Counters:
    tokens: int = 0
    tool_calls: int = 0
    retries: int = 0
    failed_actions: int = 0
    interventions: int = 0


@dataclass
class Turn:
    session_id: str
    agent: str
    episode: int
    index: int
    now: float
    task_id: str
    task_text: str
    attempts: list[dict[str, Any]] = field(default_factory=list)
    proposals: list[dict[str, Any]] = field(default_factory=list)
    routing: list[dict[str, Any]] = field(default_factory=list)
    outcomes: list[dict[str, Any]] = field(default_factory=list)
    write_backs: list[dict[str, Any]] = field(default_factory=list)
    messages: list[dict[str, Any]] = field(default_factory=list)
    escalation: dict[str, Any] | None = None
    error: str | None = None
    counters: Counters = field(default_factory=Counters)
    status: str = "open"
    audit_start: int = 0
    audit_end: int = 0
    terminal: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


@dataclass
class Trajectory:
    session_id: str
    horizon: int
    turns: list[Turn]
    status: str

    def to_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.turns)


@dataclass
class HarnessConfig:
    budget: int = 256
    max_retries: int = 2
    retrieval_k: int = 3
    max_candidates: int = 64
    action_risk: float = 0.5
    refresh: bool = True
    tau: float = 7.0
    staleness_horizon: float = 14.0
    write_back_confidence: float = 0.5


class Clock:
    """Logical clock shared by a parent and its subagents."""

    def __init__(self, now: float = 0) -> None:
        self.now = now

    def tick(self, step: float = 1) -> float:
        self.now += step
        return self.now

    def advance_to(self, t: float) -> float:
        self.now = max(self.now, t)
        return self.now


class _Permissions:
    def __init__(self, harness: "Harness") -> None:
        self.harness = harness
        self.asked = 0

    def check(self, action: str, now: float) -> PermissionDecision:
        h = self.harness
        decision = check_permission(action, h.policy, h.operator, h.audit, now, agent=h.agent)
        if decision.asked:
            self.asked += 1
        return decision


class Harness:
    """Session state that persists across turns and sessions."""

    def __init__(
        self,
        *,
        substrate: ReasoningSubstrate,
        registry: SkillRegistry,
        predicates: PredicateTable,
        policy: PermissionPolicy,
        audit: AuditLog,
        store: MemoryStore | None = None,
        verifier: Callable[[MemoryEntry], bool | None] | None = None,
        environment: Any = None,
        operator: OperatorChannel | None = None,
        config: HarnessConfig | None = None,
        pinned: Sequence[ContextSegment] = (),
        extractor: Callable[[Sequence[Any]], Iterable[Any]] | None = None,
        agent: str = "main",
        role: str = "orchestrator",
        roles: Mapping[str, Callable[[], ReasoningSubstrate]] | None = None,
        clock: Clock | None = None,
        parent: "Harness | None" = None,
    ) -> None:
        self.substrate = substrate
        self.registry = registry
        self.predicates = predicates
        self.policy = policy
        self.audit = audit
        self.store = store
        self.verifier = verifier
        self.environment = environment
        self.operator = operator
        self.config = config or HarnessConfig()
        self.pinned = list(pinned)
        self.extractor = extractor
        self.agent = agent
        self.role = role
        self.roles = dict(roles or {})
        self.clock = clock or Clock()
        self.parent = parent
        self.router = SkillRouter(registry, audit, agent=agent)
        self.runtime = SkillRuntime(registry, predicates, audit, environment, agent=agent)
        self.write_gate = WriteGate(verifier)
        self.permissions = _Permissions(self)
        self.pending: list[ContextSegment] = []
        self.received: list[AgentMessage] = []
        self.subagents: list[SubagentHandle] = []
        self.episode = 0
        self._turns = 0
        self._messages = 0

    @property
    def now(self) -> float:
        return self.clock.now

    # -- context ----------------------------------------------------------

    def memory_segments(self, task: Task, now: float) -> tuple[list[ContextSegment], list[dict[str, Any]]]:
        if self.store is None:
            return [], []
        cfg = self.config
        k = min(cfg.retrieval_k, cfg.max_candidates)
        result = self.store.retrieve(MemoryQuery(task.text, k, cfg.action_risk, now, cfg.max_candidates))
        segments, retrieved = [], []
        for entry_id, score in result.entries:
            entry = self.store.get(entry_id)
            freshness = math.exp(-max(now - entry.last_verified_at, 0) / self.store.weights.tau)
            segments.append(
                ContextSegment(
                    f"mem:{entry.id}",
                    RETRIEVED,
                    entry.content,
                    self.store.relevance(entry.content, task.text),
                    freshness,
                    entry.id,
                )
            )
            retrieved.append({"id": entry.id, "scope_key": entry.scope_key, "content": entry.content, "score": score})
        return segments, retrieved

    def tool_segment(self, seg_id: str, content: str, provenance: str, task: Task | None = None) -> ContextSegment:
        relevance = jaccard_relevance(content, task.text) if task is not None else 0.0
        return ContextSegment(seg_id, TOOL_OUTPUT, content, relevance, 1.0, provenance)

    def receive(self, message: AgentMessage) -> None:
        self._messages += 1
        self.received.append(message)
        self.pending.append(
            ContextSegment(
                f"msg:{self.agent}:{self._messages}",
                TOOL_OUTPUT,
                message.render(),
                0.5,
                1.0,
                f"message:{message.sender}:{self._messages}",
            )
        )

    def sweep(self) -> list[str]:
        if self.store is None:
            return []
        return self.store.sweep(self.now, self.config.staleness_horizon)


def _segment_keys(assembly: ContextAssembly, retrieved: Sequence[Mapping[str, Any]]) -> dict[str, list[str]]:
    by_entry = {r["id"]: r["scope_key"] for r in retrieved}
    keys: dict[str, list[str]] = {}
    for seg in assembly.segments:
        if seg.kind == RETRIEVED:
            keys[seg.id] = [by_entry.get(seg.provenance, "")]
        elif seg.kind == TOOL_OUTPUT:
            keys[seg.id] = sorted({k for k, _ in parse_facts(seg.content)})
    return keys


def run_turn(harness: Harness, task: Task, session_id: str = "session") -> Turn:
    h = harness
    now = h.clock.tick()
    h._turns += 1
    turn = Turn(session_id, h.agent, h.episode, h._turns, now, task.id, task.text, audit_start=len(h.audit))
    feedback = list(h.pending)
    h.pending.clear()
    while h.received:
        turn.messages.append(h.received.pop(0).to_dict())
    asked_before = h.permissions.asked

    while True:
        segments, retrieved = h.memory_segments(task, now)
        try:
            assembly = assemble(task.text, h.pinned + segments + feedback, h.config.budget)
        except MandatoryOverflow as exc:
            turn.status, turn.error = "failed", f"mandatory-overflow:{exc.segment_id}"
            break
        if h.config.refresh and h.store is not None:
            assembly = refresh(assembly, h.store, h.verifier, now)
        turn.attempts.append(
            {
                "manifest": [row.to_dict() for row in assembly.manifest],
                "order": [s.id for s in assembly.segments],
                "annotations": list(assembly.annotations),
                "retrieved": retrieved,
                "segment_keys": _segment_keys(assembly, retrieved),
                "total_tokens": assembly.total_tokens,
            }
        )
        turn.counters.tokens += assembly.total_tokens

        try:
            proposal = h.substrate.propose(assembly)
        except Exception as exc:  # substrate faults are retried like failed actions
            turn.proposals.append({"error": f"{type(exc).__name__}: {exc}"})
            if turn.counters.retries < h.config.max_retries:
                turn.counters.retries += 1
                continue
            turn.status, turn.error = "failed", "substrate-error"
            break
        turn.proposals.append(proposal.to_dict())

        if proposal.action == RESPOND:
            ok = task.check is None or task.check(proposal.text)
            turn.status = SOLVED if ok else "open"
            break
        if proposal.action == CLARIFY:
            record = escalate(Subtask(task.id, frozenset()), "clarification", h.audit, now,
                              origin=h.agent, from_subagent=h.parent is not None)
            turn.escalation = asdict(record)
            turn.status = ESCALATED
            break

        subtask = proposal.subtask
        decision = h.router.route(subtask, now)
        turn.routing.append(decision.to_dict())
        if decision.escalated:
            record = escalate(subtask, decision.escalation_reason, h.audit, now, origin=h.agent,
                              from_subagent=h.parent is not None, best_score=decision.match_score,
                              threshold=decision.threshold)
            turn.escalation = asdict(record)
            turn.status = ESCALATED
            break

        try:
            outcome = h.runtime.invoke(decision, proposal.args, h.permissions, now)
        except PreconditionFailed as exc:
            turn.counters.failed_actions += 1
            if turn.counters.retries < h.config.max_retries:
                turn.counters.retries += 1
                feedback.append(h.tool_segment(f"pre:{turn.index}:{len(turn.proposals)}",
                                               f"precondition-failed {exc.skill}: {' '.join(exc.failed)}",
                                               f"refusal:{exc.skill}", task))
                continue
            break
        if outcome is None:
            turn.counters.failed_actions += 1
            turn.outcomes.append({"skill": decision.chosen[0], "denied": True})
            h.pending.append(h.tool_segment(f"deny:{turn.index}", f"permission-denied {decision.chosen[0]}",
                                            f"denial:{decision.chosen[0]}", task))
            break

        turn.counters.tool_calls += 1
        verified = verify_outcome(outcome, h.registry[outcome.skill])
        turn.outcomes.append({**outcome.to_dict(), "seq": outcome.seq})
        _write_back(h, turn, outcome, now)
        if verified:
            facts = outcome.result.get("facts") or {}
            if facts:
                text = "\n".join(f"{k} = {v}" for k, v in sorted(facts.items()))
            else:
                text = f"verified {outcome.skill}"
            h.pending.append(h.tool_segment(f"out:{outcome.invocation_id}", text, outcome.invocation_id, task))
            break
        turn.counters.failed_actions += 1
        if turn.counters.retries < h.config.max_retries:
            turn.counters.retries += 1
            note = f"postcondition-failed {outcome.skill}: {' '.join(outcome.failed_postconditions) or outcome.error}"
            feedback.append(h.tool_segment(f"fail:{outcome.invocation_id}", note, outcome.invocation_id, task))
            continue
        break

    turn.counters.interventions = h.permissions.asked - asked_before
    turn.audit_end = len(h.audit)
    return turn


def _write_back(h: Harness, turn: Turn, outcome: SkillOutcome, now: float) -> None:
    if h.store is None:
        return
    for item in outcome.result.get("memory") or ():
        candidate = MemoryEntry.candidate(
            item["scope_key"], item["content"], now, outcome.invocation_id,
            confidence=h.config.write_back_confidence,
        )
        result = h.store.write_entry(candidate, h.write_gate, source=outcome)
        turn.write_backs.append(
            {"id": result.id, "accepted": result.accepted, "reason": result.reason,
             "created": result.created, "source": outcome.invocation_id, "scope_key": candidate.scope_key}
        )


def run_session(harness: Harness, tasks: Sequence[Task], horizon: int, session_id: str = "session") -> Trajectory:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not tasks:
        raise ValueError("no tasks")
    turns: list[Turn] = []
    status = EXHAUSTED
    current = 0
    while len(turns) < horizon:
        turn = run_turn(harness, tasks[current], session_id)
        turns.append(turn)
        if turn.status == ESCALATED:
            status = ESCALATED
            break
        if turn.status == SOLVED:
            current += 1
            if current == len(tasks):
                status = SOLVED
                break
    if harness.store is not None and harness.extractor is not None:
        harness.store.consolidate_session(
            [t.to_dict() for t in turns], harness.extractor, harness.write_gate, harness.now,
            provenance=f"session:{session_id}",
        )
    turns[-1].terminal = status
    return Trajectory(session_id, horizon, turns, status)


@dataclass
class SubagentHandle:
    harness: Harness
    role: str
    task: Task
    parent: Harness

    @property
    def agent(self) -> str:
        return self.harness.agent

    def run(self, horizon: int, session_id: str | None = None) -> Trajectory:
        self.harness.episode = self.parent.episode
        return run_session(self.harness, [self.task], horizon, session_id or f"{self.agent}")


def dispatch_subagent(
    parent: Harness,
    role: str,
    task: Task,
    budget: int,
    skills: Iterable[str],
    policy: PermissionPolicy | None = None,
) -> SubagentHandle:
    """Spawn a subagent with its own budget, skill subset, policy slice and turn counter."""
    if role not in parent.roles:
        raise KeyError(f"unknown role {role!r}")
    agent = f"{role}#{len(parent.subagents) + 1}"
    child = Harness(
        substrate=parent.roles[role](),
        registry=parent.registry.subset(skills),
        predicates=parent.predicates,
        policy=policy if policy is not None else PermissionPolicy(),
        audit=parent.audit,
        environment=parent.environment,
        operator=parent.operator,
        config=replace(parent.config, budget=budget),
        pinned=[ContextSegment(f"role:{role}", PINNED, f"role {role}", 1.0, 1.0, f"config:role:{role}")],
        agent=agent,
        role=role,
        clock=parent.clock,
        parent=parent,
    )
    handle = SubagentHandle(child, role, task, parent)
    parent.subagents.append(handle)
    return handle


def handoff(sender: Harness, recipient: Harness, message: AgentMessage) -> Acknowledgment:
    if recipient.parent is not sender and sender.parent is not recipient:
        raise ValueError(f"no channel between {sender.agent} and {recipient.agent}")
    problems = message.problems()
    if problems:
        seq = sender.audit.record(
            "collaboration-failure",
            {"op": "handoff", "from": sender.agent, "to": recipient.agent,
             "message": message.to_dict(), "problems": problems},
            sender.now,
            outcome="rejected:" + ",".join(problems),
        )
        return Acknowledgment(False, ",".join(problems), seq)
    recipient.receive(message)
    return Acknowledgment(True, "delivered")
