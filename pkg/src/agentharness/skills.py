"""Skill specs, routing, gated invocation, and post-condition verification."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .audit import AuditLog
from .governance import PermissionDecision

Executor = Callable[[Mapping[str, Any]], Mapping[str, Any]]
Precondition = Callable[[Mapping[str, Any]], bool]
Postcondition = Callable[[Mapping[str, Any], Mapping[str, Any], Any], bool]


class RegistryError(ValueError):
    pass


class CompositionError(ValueError):
    def __init__(self, step: int, missing: str) -> None:
        super().__init__(f"step {step} needs {missing!r}, which step {step - 1} does not establish")
        self.step = step
        self.missing = missing


class VersionMismatch(ValueError):
    pass


class PreconditionFailed(RuntimeError):
    def __init__(self, skill: str, failed: Sequence[str]) -> None:
        super().__init__(f"{skill}: preconditions failed: {', '.join(failed)}")
        self.skill = skill
        self.failed = tuple(failed)


@dataclass(frozen=True)
class SkillSpec:
    name: str
    version: int
    capability_tags: frozenset[str]
    preconditions: tuple[str, ...] = ()
    postconditions: tuple[str, ...] = ()
    cost_estimate: float = 0.0
    min_route_confidence: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "capability_tags", frozenset(self.capability_tags))
        object.__setattr__(self, "preconditions", tuple(self.preconditions))
        object.__setattr__(self, "postconditions", tuple(self.postconditions))
        if not self.capability_tags:
            raise ValueError(f"skill {self.name} has no capability tags")
        if self.cost_estimate < 0:
            raise ValueError("cost_estimate must be nonnegative")
        if not 0.0 <= self.min_route_confidence <= 1.0:
            raise ValueError("min_route_confidence outside [0, 1]")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SkillSpec":
        return cls(
            name=raw["name"],
            version=int(raw["version"]),
            capability_tags=frozenset(raw["tags"]),
            preconditions=tuple(raw.get("preconditions", ())),
            postconditions=tuple(raw.get("postconditions", ())),
            cost_estimate=float(raw.get("cost", 0.0)),
            min_route_confidence=float(raw.get("min_route_confidence", 0.5)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "tags": sorted(self.capability_tags),
            "preconditions": list(self.preconditions),
            "postconditions": list(self.postconditions),
            "cost": self.cost_estimate,
            "min_route_confidence": self.min_route_confidence,
        }


@dataclass
class PredicateTable:
    """Named predicates; skills refer to them by name only."""

    pre: dict[str, Precondition] = field(default_factory=dict)
    post: dict[str, Postcondition] = field(default_factory=dict)

    def precondition(self, name: str) -> Callable[[Precondition], Precondition]:
        def register(fn: Precondition) -> Precondition:
            self.pre[name] = fn
            return fn
        return register

    def postcondition(self, name: str) -> Callable[[Postcondition], Postcondition]:
        def register(fn: Postcondition) -> Postcondition:
            self.post[name] = fn
            return fn
        return register


class SkillRegistry:
    def __init__(self, specs: Iterable[SkillSpec] = (), executors: Mapping[str, Executor] | None = None) -> None:
        self.specs: dict[str, SkillSpec] = {}
        self.executors: dict[str, Executor] = dict(executors or {})
        for spec in specs:
            self.add(spec)

    def add(self, spec: SkillSpec, executor: Executor | None = None) -> None:
        old = self.specs.get(spec.name)
        if old is not None and spec.version <= old.version and spec != old:
            raise RegistryError(f"{spec.name}: version must increase past {old.version}")
        self.specs[spec.name] = spec
        if executor is not None:
            self.executors[spec.name] = executor

    def __contains__(self, name: str) -> bool:
        return name in self.specs

    def __getitem__(self, name: str) -> SkillSpec:
        return self.specs[name]

    def __iter__(self):
        return iter(sorted(self.specs.values(), key=lambda s: s.name))

    def __len__(self) -> int:
        return len(self.specs)

    def subset(self, names: Iterable[str]) -> "SkillRegistry":
        names = set(names)
        return SkillRegistry(
            (s for s in self.specs.values() if s.name in names),
            {n: e for n, e in self.executors.items() if n in names},
        )

    @classmethod
    def from_records(
        cls,
        records: Iterable[Mapping[str, Any]],
        executors: Mapping[str, Executor],
        predicates: PredicateTable,
    ) -> "SkillRegistry":
        registry = cls()
        for raw in records:
            spec = SkillSpec.from_dict(raw)
            if spec.name not in executors:
                raise RegistryError(f"no executor bound for skill {spec.name!r}")
            for name in spec.preconditions:
                if name not in predicates.pre:
                    raise RegistryError(f"{spec.name}: unknown precondition {name!r}")
            for name in spec.postconditions:
                if name not in predicates.post:
                    raise RegistryError(f"{spec.name}: unknown postcondition {name!r}")
            registry.add(spec, executors[spec.name])
        return registry

    @classmethod
    def load(cls, path: str | os.PathLike[str], executors: Mapping[str, Executor], predicates: PredicateTable) -> "SkillRegistry":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        records = raw["skills"] if isinstance(raw, Mapping) else raw
        return cls.from_records(records, executors, predicates)


@dataclass(frozen=True)
class Subtask:
    id: str
    tags: frozenset[str]
    description: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tags", frozenset(self.tags))


class RoutingPolicy(Protocol):
    def match(self, subtask: Subtask, spec: SkillSpec) -> float: ...


class TagOverlap:
    """Fraction of the subtask's tags the skill covers."""

    def match(self, subtask: Subtask, spec: SkillSpec) -> float:
        if not subtask.tags:
            return 0.0
        return len(subtask.tags & spec.capability_tags) / len(subtask.tags)


@dataclass(frozen=True)
class RoutingDecision:
    subtask_id: str
    chosen: tuple[str, int] | None
    match_score: float
    alternatives: tuple[tuple[str, int, float], ...] = ()
    escalation_reason: str | None = None
    threshold: float | None = None

    @property
    def escalated(self) -> bool:
        return self.chosen is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "subtask": self.subtask_id,
            "chosen": list(self.chosen) if self.chosen else None,
            "match_score": self.match_score,
            "alternatives": [list(a) for a in self.alternatives],
            "escalation": self.escalation_reason,
            "threshold": self.threshold,
        }


def rank(subtask: Subtask, registry: SkillRegistry, policy: RoutingPolicy) -> list[tuple[SkillSpec, float]]:
    scored = [(spec, policy.match(subtask, spec)) for spec in registry]
    return sorted(scored, key=lambda t: (-t[1], t[0].cost_estimate, t[0].name))


def route(subtask: Subtask, registry: SkillRegistry, policy: RoutingPolicy | None = None) -> RoutingDecision:
    policy = policy or TagOverlap()
    ranked = rank(subtask, registry, policy)
    if not ranked:
        return RoutingDecision(subtask.id, None, 0.0, (), "no-skill", None)
    best, score = ranked[0]
    if score < best.min_route_confidence:
        alts = tuple((s.name, s.version, m) for s, m in ranked)
        return RoutingDecision(subtask.id, None, score, alts, "low-confidence", best.min_route_confidence)
    alts = tuple((s.name, s.version, m) for s, m in ranked[1:])
    return RoutingDecision(subtask.id, (best.name, best.version), score, alts, None, best.min_route_confidence)


class SkillRouter:
    """Routes subtasks and audits decisions that change for a tag set."""

    def __init__(self, registry: SkillRegistry, audit: AuditLog, policy: RoutingPolicy | None = None, agent: str = "main") -> None:
        self.registry = registry
        self.audit = audit
        self.policy = policy or TagOverlap()
        self.agent = agent
        self._previous: dict[frozenset[str], tuple[str, int] | None | str] = {}

    def route(self, subtask: Subtask, now: float) -> RoutingDecision:
        decision = route(subtask, self.registry, self.policy)
        key = subtask.tags
        current = decision.chosen if decision.chosen else f"escalate:{decision.escalation_reason}"
        if key not in self._previous or self._previous[key] != current:
            self.audit.record(
                "routing-change",
                {"agent": self.agent, "tags": sorted(key), **decision.to_dict()},
                now,
                outcome="escalate" if decision.escalated else f"{decision.chosen[0]}@{decision.chosen[1]}",
            )
            self._previous[key] = current
        return decision


@dataclass(frozen=True)
class SkillOutcome:
    invocation_id: str
    skill: str
    version: int
    result: Mapping[str, Any]
    postconditions: tuple[tuple[str, bool], ...]
    error: str | None = None
    seq: int = -1

    @property
    def verified(self) -> bool:
        return self.error is None and all(ok for _, ok in self.postconditions)

    @property
    def failed_postconditions(self) -> list[str]:
        return [name for name, ok in self.postconditions if not ok]

    def to_dict(self) -> dict[str, Any]:
        return {
            "invocation_id": self.invocation_id,
            "skill": self.skill,
            "version": self.version,
            "result": dict(self.result),
            "postconditions": [[n, ok] for n, ok in self.postconditions],
            "error": self.error,
            "verified": self.verified,
        }


class PermissionGate(Protocol):
    def check(self, action: str, now: float) -> PermissionDecision: ...


class SkillRuntime:
    """Executes routed skills behind the permission gate and checks post-conditions."""

    def __init__(self, registry: SkillRegistry, predicates: PredicateTable, audit: AuditLog, environment: Any = None, agent: str = "main") -> None:
        self.registry = registry
        self.predicates = predicates
        self.audit = audit
        self.environment = environment
        self.agent = agent
        self._counter = 0

    def invoke(
        self,
        decision: RoutingDecision,
        args: Mapping[str, Any],
        gate: PermissionGate,
        now: float,
    ) -> SkillOutcome | None:
        """None when the gate denies; raises PreconditionFailed before any execution."""
        if decision.escalated:
            raise ValueError("cannot invoke an escalation")
        name, version = decision.chosen
        spec = self.registry[name]
        if spec.version != version:
            raise VersionMismatch(f"{name}: routed v{version}, registry has v{spec.version}")
        failed = [p for p in spec.preconditions if not self.predicates.pre[p](args)]
        if failed:
            self.audit.record(
                "tool-invocation",
                {"phase": "precondition", "agent": self.agent, "action": name, "failed": failed},
                now,
                outcome="refused",
            )
            raise PreconditionFailed(name, failed)
        permission = gate.check(name, now)
        if not permission.allowed:
            return None
        self._counter += 1
        invocation_id = f"{self.agent}:inv{self._counter:04d}"
        executor = self.registry.executors[name]
        error = None
        try:
            result = dict(executor(args))
        except Exception as exc:  # executor faults become unverified outcomes
            result, error = {}, f"{type(exc).__name__}: {exc}"
        checks: tuple[tuple[str, bool], ...] = ()
        if error is None:
            checks = tuple(
                (p, bool(self.predicates.post[p](args, result, self.environment)))
                for p in spec.postconditions
            )
        outcome = SkillOutcome(invocation_id, name, spec.version, result, checks, error)
        seq = self.audit.record(
            "tool-invocation",
            {"phase": "execute", "agent": self.agent, "action": name, "permission_seq": permission.seq,
             "args": dict(args), **outcome.to_dict()},
            now,
            outcome="error" if error else ("verified" if outcome.verified else "unverified"),
        )
        return SkillOutcome(invocation_id, name, spec.version, result, checks, error, seq)


def verify_outcome(outcome: SkillOutcome, spec: SkillSpec) -> bool:
    if outcome.skill != spec.name or outcome.version != spec.version:
        raise VersionMismatch(f"outcome from {outcome.skill}@{outcome.version}, spec {spec.name}@{spec.version}")
    return outcome.verified


def compose(pipeline: Sequence[SkillSpec]) -> tuple[SkillSpec, ...]:
    if not pipeline:
        raise ValueError("empty pipeline")
    for i in range(1, len(pipeline)):
        established = set(pipeline[i - 1].postconditions)
        for name in pipeline[i].preconditions:
            if name not in established:
                raise CompositionError(i, name)
    return tuple(pipeline)


@dataclass(frozen=True)
class EscalationRecord:
    subtask_id: str
    reason: str
    origin: str
    best_score: float | None = None
    threshold: float | None = None
    seq: int | None = None


def escalate(
    subtask: Subtask,
    reason: str,
    audit: AuditLog,
    now: float,
    origin: str = "main",
    from_subagent: bool = False,
    best_score: float | None = None,
    threshold: float | None = None,
) -> EscalationRecord:
    seq = None
    if from_subagent:
        seq = audit.record(
            "collaboration-failure",
            {"op": "escalation", "agent": origin, "subtask": subtask.id, "reason": reason,
             "best_score": best_score, "threshold": threshold},
            now,
            outcome=reason,
        )
    return EscalationRecord(subtask.id, reason, origin, best_score, threshold, seq)
