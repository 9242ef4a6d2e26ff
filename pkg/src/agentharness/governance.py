"""Permissions, verification-gated memory writes, and the evolution-state partition."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol

from .audit import AuditLog

ALLOW, DENY, ASK = "allow", "deny", "ask"
DECISIONS = (ALLOW, DENY, ASK)

ONLINE = "online"
REVIEW_REQUIRED = "review-required"
PARTITIONS = ("memory", "skills", "preferences", "guardrails")


class OperatorChannelClosed(Exception):
    pass


class OperatorChannel(Protocol):
    def confirm(self, action: str) -> bool: ...


class ScriptedOperator:
    """Answers "ask" prompts from a fixed script; closes when the script runs out."""

    def __init__(self, answers: Iterable[bool | str] = ()) -> None:
        self._answers = [_as_bool(a) for a in answers]
        self.asked: list[str] = []

    def confirm(self, action: str) -> bool:
        self.asked.append(action)
        if not self._answers:
            raise OperatorChannelClosed(action)
        return self._answers.pop(0)


def _as_bool(answer: bool | str) -> bool:
    if isinstance(answer, bool):
        return answer
    return str(answer).strip().lower() in {"y", "yes", "true", "1"}


@dataclass(frozen=True)
class PermissionRule:
    pattern: str
    decision: str

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r} for {self.pattern!r}")
        if "*" in self.pattern[:-1]:
            raise ValueError(f"wildcard only allowed as suffix: {self.pattern!r}")

    def specificity(self, action: str) -> tuple[int, int] | None:
        """(exact?, prefix length) when the rule matches ``action``, else None."""
        if self.pattern.endswith("*"):
            prefix = self.pattern[:-1]
            return (0, len(prefix)) if action.startswith(prefix) else None
        return (1, len(self.pattern)) if action == self.pattern else None


@dataclass(frozen=True)
class PermissionPolicy:
    rules: tuple[PermissionRule, ...] = ()
    default: str = DENY

    def __post_init__(self) -> None:
        if self.default not in DECISIONS:
            raise ValueError(f"unknown default {self.default!r}")

    @classmethod
    def from_mapping(cls, rules: Mapping[str, str] | Iterable[Mapping[str, str]], default: str = DENY) -> "PermissionPolicy":
        if isinstance(rules, Mapping):
            items = [PermissionRule(p, d) for p, d in rules.items()]
        else:
            items = [PermissionRule(r["pattern"], r["decision"]) for r in rules]
        return cls(tuple(items), default)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "PermissionPolicy":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PermissionPolicy":
        return cls.from_mapping(raw.get("rules", []), raw.get("default", DENY))

    def to_dict(self) -> dict[str, Any]:
        return {
            "rules": [{"pattern": r.pattern, "decision": r.decision} for r in self.rules],
            "default": self.default,
        }

    def resolve(self, action: str) -> tuple[str, str | None]:
        """Most specific matching rule wins; earlier rules win exact ties."""
        best: tuple[tuple[int, int], PermissionRule] | None = None
        for rule in self.rules:
            spec = rule.specificity(action)
            if spec is not None and (best is None or spec > best[0]):
                best = (spec, rule)
        if best is None:
            return self.default, None
        return best[1].decision, best[1].pattern

    def without(self, *patterns: str) -> "PermissionPolicy":
        return PermissionPolicy(tuple(r for r in self.rules if r.pattern not in patterns), self.default)


@dataclass(frozen=True)
class PermissionDecision:
    action: str
    decision: str
    rule: str | None
    asked: bool
    seq: int

    @property
    def allowed(self) -> bool:
        return self.decision == ALLOW


def check_permission(
    action: str,
    policy: PermissionPolicy,
    operator: OperatorChannel | None,
    audit: AuditLog,
    now: float,
    agent: str = "main",
) -> PermissionDecision:
    decision, rule = policy.resolve(action)
    asked = decision == ASK
    if asked:
        try:
            decision = ALLOW if operator is not None and operator.confirm(action) else DENY
        except OperatorChannelClosed:
            decision = DENY
    payload = {
        "phase": "permission",
        "agent": agent,
        "action": action,
        "rule": rule,
        "asked": asked,
        "decision": decision,
    }
    seq = audit.record("tool-invocation", payload, now, outcome=decision)
    return PermissionDecision(action, decision, rule, asked, seq)


# An environment predicate over a memory entry: True pass, False fail, None unavailable.
Verifier = Callable[[Any], "bool | None"]


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    reason: str


class WriteGate:
    """Decides whether a candidate memory entry may be written back."""

    def __init__(self, verifier: Verifier | None = None) -> None:
        self.verifier = verifier

    def decide(self, candidate: Any, source: Any | None = None) -> GateDecision:
        if source is not None and not source.verified:
            return GateDecision(False, "unverified-skill-output")
        if self.verifier is not None and self.verifier(candidate) is False:
            return GateDecision(False, "verifier-failed")
        return GateDecision(True, "accepted")


def gate_write(
    candidate: Any,
    source: Any | None,
    verifier: Verifier | None,
    audit: AuditLog,
    now: float,
) -> GateDecision:
    """Standalone gate decision, audited as a memory-write."""
    decision = WriteGate(verifier).decide(candidate, source)
    audit.record(
        "memory-write",
        {
            "op": "gate",
            "scope_key": candidate.scope_key,
            "source": getattr(source, "invocation_id", None),
            "accepted": decision.accepted,
            "reason": decision.reason,
        },
        now,
        outcome="accepted" if decision.accepted else f"rejected:{decision.reason}",
    )
    return decision


_PARTITION_KIND = {
    "memory": "memory-write",
    "skills": "routing-change",
    "preferences": "permission-change",
    "guardrails": "guardrail-change",
}


@dataclass
class EvolutionState:
    """What persists, kept in four disjoint partitions with their own update policy."""

    audit: AuditLog
    review_token: str = ""
    memory: set[str] = field(default_factory=set)
    skills: dict[str, int] = field(default_factory=dict)
    preferences: dict[str, Any] = field(default_factory=dict)
    guardrails: PermissionPolicy = field(default_factory=PermissionPolicy)
    labels: dict[str, str] = field(
        default_factory=lambda: {
            "memory": ONLINE,
            "skills": REVIEW_REQUIRED,
            "preferences": ONLINE,
            "guardrails": REVIEW_REQUIRED,
        }
    )

    def __post_init__(self) -> None:
        self.labels["guardrails"] = REVIEW_REQUIRED

    def set_label(self, partition: str, label: str) -> None:
        if partition == "guardrails" and label != REVIEW_REQUIRED:
            raise ValueError("guardrails are always review-required")
        if label not in (ONLINE, REVIEW_REQUIRED):
            raise ValueError(f"unknown label {label!r}")
        self.labels[partition] = label

    def snapshot(self) -> dict[str, Any]:
        return {
            "memory": sorted(self.memory),
            "skills": dict(sorted(self.skills.items())),
            "preferences": copy.deepcopy(self.preferences),
            "guardrails": self.guardrails.to_dict(),
        }

    def _token_ok(self, token: str | None) -> bool:
        return bool(self.review_token) and token == self.review_token

    def update(self, partition: str, change: Mapping[str, Any], now: float, review_token: str | None = None) -> bool:
        """Apply ``change`` to one partition; returns False when refused."""
        if partition not in PARTITIONS:
            raise KeyError(partition)
        needs_review = self.labels[partition] == REVIEW_REQUIRED
        applied = not needs_review or self._token_ok(review_token)
        new_value = self._applied(partition, change) if applied else None
        self.audit.record(
            _PARTITION_KIND[partition],
            {
                "op": "evolution-update",
                "partition": partition,
                "change": change,
                "review": needs_review,
                "token_present": bool(review_token),
                "applied": applied,
            },
            now,
            outcome="applied" if applied else "refused",
        )
        if applied:
            setattr(self, partition, new_value)
        return applied

    def update_guardrails(self, change: Mapping[str, Any], now: float, review_token: str | None = None) -> bool:
        return self.update("guardrails", change, now, review_token)

    def _applied(self, partition: str, change: Mapping[str, Any]) -> Any:
        if partition == "memory":
            value = set(self.memory) | set(change.get("add", ()))
            return value - set(change.get("remove", ()))
        if partition == "skills":
            value = dict(self.skills)
            for name, version in change.items():
                if version <= value.get(name, 0):
                    raise ValueError(f"skill {name} version must increase past {value[name]}")
                value[name] = version
            return value
        if partition == "preferences":
            value = copy.deepcopy(self.preferences)
            for key, v in change.items():
                if v is None:
                    value.pop(key, None)
                else:
                    value[key] = v
            return value
        # guardrails: pattern -> decision upserts, None removes
        kept = [r for r in self.guardrails.rules if r.pattern not in change]
        added = [PermissionRule(p, d) for p, d in change.items() if d is not None]
        return PermissionPolicy(tuple(kept + added), self.guardrails.default)
