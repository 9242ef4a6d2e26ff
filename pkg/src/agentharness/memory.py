"""Durable memory whose trust is re-established at retrieval time.

Entries carry confidence and verification timestamps. Retrieval ranks them by
relevance minus a staleness penalty (time since last verification) minus a
risk term that grows with how destructive acting on a wrong entry would be and
how unsure the entry is. All timestamps are logical, supplied by the caller.
"""

from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

from .audit import AuditLog
from .governance import GateDecision, Verifier, WriteGate

ACTIVE, DEPRECATED, CONFLICTED = "active", "deprecated", "conflicted"
STATUSES = (ACTIVE, DEPRECATED, CONFLICTED)

ENTRY_KEYS = (
    "id",
    "scope_key",
    "content",
    "confidence",
    "created_at",
    "last_verified_at",
    "last_accessed_at",
    "provenance",
    "status",
    "tags",
)

CONSOLIDATION_CONFIDENCE = 0.5
CONFLICT_TIE_THRESHOLD = 0.05
DEPRECATE_BELOW = 0.2
SWEEP_CONFIDENCE = 0.4


class LifecycleError(ValueError):
    pass


class MemoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    id: str
    scope_key: str
    content: str
    confidence: float
    created_at: float
    last_verified_at: float
    last_accessed_at: float
    provenance: str
    status: str = ACTIVE
    tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.last_verified_at < self.created_at:
            raise ValueError("last_verified_at precedes created_at")
        if not self.provenance:
            raise ValueError("memory entry needs a provenance")
        if self.status not in STATUSES:
            raise MemoryFormatError(f"unknown status {self.status!r}")
        if not isinstance(self.tags, frozenset):
            object.__setattr__(self, "tags", frozenset(self.tags))

    @classmethod
    def candidate(
        cls,
        scope_key: str,
        content: str,
        now: float,
        provenance: str,
        confidence: float = CONSOLIDATION_CONFIDENCE,
        tags: Iterable[str] = (),
    ) -> "MemoryEntry":
        """An unstored entry; the store assigns its id on write."""
        return cls("", scope_key, content, confidence, now, now, now, provenance, ACTIVE, frozenset(tags))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "scope_key": self.scope_key,
            "content": self.content,
            "confidence": self.confidence,
            "created_at": self.created_at,
            "last_verified_at": self.last_verified_at,
            "last_accessed_at": self.last_accessed_at,
            "provenance": self.provenance,
            "status": self.status,
            "tags": sorted(self.tags),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "MemoryEntry":
        if set(raw) != set(ENTRY_KEYS):
            raise MemoryFormatError(f"entry keys {sorted(raw)} do not match {sorted(ENTRY_KEYS)}")
        if raw["status"] not in STATUSES:
            raise MemoryFormatError(f"unknown status {raw['status']!r}")
        return cls(
            id=raw["id"],
            scope_key=raw["scope_key"],
            content=raw["content"],
            confidence=float(raw["confidence"]),
            created_at=raw["created_at"],
            last_verified_at=raw["last_verified_at"],
            last_accessed_at=raw["last_accessed_at"],
            provenance=raw["provenance"],
            status=raw["status"],
            tags=frozenset(raw["tags"]),
        )


def _transition(entry: MemoryEntry, status: str) -> MemoryEntry:
    if status == entry.status:
        return entry
    if entry.status != ACTIVE:
        raise LifecycleError(f"{entry.id}: {entry.status} -> {status} is not allowed")
    return replace(entry, status=status)


@dataclass(frozen=True)
class MemoryQuery:
    text: str
    k: int
    action_risk: float
    now: float
    max_candidates: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.max_candidates < 1:
            raise ValueError("k and max_candidates must be positive")
        if self.k > self.max_candidates:
            raise ValueError("k exceeds max_candidates")
        if not 0.0 <= self.action_risk <= 1.0:
            raise ValueError("action_risk outside [0, 1]")


@dataclass(frozen=True)
class RetrievalResult:
    entries: tuple[tuple[str, float], ...] = ()
    scored: int = 0

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]


@dataclass(frozen=True)
class ConflictRecord:
    winner: str
    loser: str
    reason: str
    resolved_at: float


@dataclass(frozen=True)
class VerificationOutcome:
    id: str
    result: str  # pass | fail | indeterminate
    confidence_before: float
    confidence_after: float
    status: str


@dataclass(frozen=True)
class WriteResult:
    id: str | None
    accepted: bool
    reason: str
    created: bool = False
    conflict: ConflictRecord | None = None


@dataclass(frozen=True)
class ScoringWeights:
    relevance: float = 0.60
    staleness: float = 0.25
    risk: float = 0.15
    tau: float = 7.0


def tokens(text: str) -> set[str]:
    return set(text.lower().split())


def jaccard_relevance(content: str, query: str) -> float:
    a, b = tokens(content), tokens(query)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def staleness(delta: float, tau: float) -> float:
    """Saturating penalty in [0, 1) for time since last verification."""
    return 1.0 - math.exp(-max(delta, 0.0) / tau)


def score_entry(
    entry: MemoryEntry,
    query: MemoryQuery,
    weights: ScoringWeights = ScoringWeights(),
    relevance: Callable[[str, str], float] = jaccard_relevance,
) -> float:
    rel = relevance(entry.content, query.text)
    stale = staleness(query.now - entry.last_verified_at, weights.tau)
    risk = query.action_risk * (1.0 - entry.confidence)
    return weights.relevance * rel - weights.staleness * stale - weights.risk * risk


def decide_conflict(a: MemoryEntry, b: MemoryEntry) -> tuple[MemoryEntry, MemoryEntry, str]:
    """(winner, loser, reason) under the confidence-then-recency rule."""
    gap = abs(a.confidence - b.confidence)
    if gap >= CONFLICT_TIE_THRESHOLD or math.isclose(gap, CONFLICT_TIE_THRESHOLD):
        pair = (a, b) if a.confidence > b.confidence else (b, a)
        return pair[0], pair[1], "confidence"
    if a.last_verified_at != b.last_verified_at:
        pair = (a, b) if a.last_verified_at > b.last_verified_at else (b, a)
    else:
        pair = (a, b) if a.id <= b.id else (b, a)
    return pair[0], pair[1], "recency"


Extractor = Callable[[Sequence[Any]], Iterable[Any]]


class MemoryStore:
    """Entry store; all mutations serialize through one lock and audit first."""

    def __init__(
        self,
        audit: AuditLog,
        weights: ScoringWeights = ScoringWeights(),
        relevance: Callable[[str, str], float] = jaccard_relevance,
        entries: Iterable[MemoryEntry] = (),
    ) -> None:
        self.audit = audit
        self.weights = weights
        self.relevance = relevance
        self._lock = threading.RLock()
        self._entries: dict[str, MemoryEntry] = {}
        for e in entries:
            self._entries[e.id] = e
        self._counter = len(self._entries)
        self.verification_calls = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(list(self._entries.values()))

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def get(self, entry_id: str) -> MemoryEntry:
        return self._entries[entry_id]

    def active(self) -> list[MemoryEntry]:
        return [e for e in self._entries.values() if e.status == ACTIVE]

    def _new_id(self) -> str:
        while True:
            self._counter += 1
            candidate = f"m{self._counter:04d}"
            if candidate not in self._entries:
                return candidate

    def _audit(self, payload: dict[str, Any], now: float, outcome: str) -> int:
        return self.audit.record("memory-write", payload, now, outcome=outcome)

    # -- writes -----------------------------------------------------------

    def write_entry(
        self,
        candidate: MemoryEntry,
        gate: WriteGate,
        source: Any | None = None,
    ) -> WriteResult:
        if candidate.status != ACTIVE:
            raise LifecycleError("only active candidates can be written")
        now = candidate.created_at
        source_id = getattr(source, "invocation_id", None)
        with self._lock:
            decision: GateDecision = gate.decide(candidate, source)
            if not decision.accepted:
                self._audit(
                    {"op": "write", "accepted": False, "reason": decision.reason,
                     "source": source_id, "entry": candidate.to_dict()},
                    now,
                    f"rejected:{decision.reason}",
                )
                return WriteResult(None, False, decision.reason)

            same_scope = [e for e in self.active() if e.scope_key == candidate.scope_key]
            for existing in same_scope:
                if existing.content == candidate.content:
                    refreshed = replace(existing, last_verified_at=max(existing.last_verified_at, now))
                    self._audit(
                        {"op": "dedup", "accepted": True, "reason": "duplicate",
                         "source": source_id, "entry": refreshed.to_dict()},
                        now,
                        "deduplicated",
                    )
                    self._entries[existing.id] = refreshed
                    return WriteResult(existing.id, True, "duplicate")

            entry_id = candidate.id or self._new_id()
            if entry_id in self._entries:
                raise ValueError(f"entry id {entry_id} already stored")
            new = replace(candidate, id=entry_id)
            staged: dict[str, MemoryEntry] = {}
            conflict = None
            for rival in same_scope:
                winner, loser, reason = decide_conflict(rival, new)
                conflict = ConflictRecord(winner.id, loser.id, reason, now)
                loser_after = _transition(loser, CONFLICTED)
                self._audit(
                    {"op": "conflict", "winner": winner.id, "loser": loser.id,
                     "reason": reason, "entry": loser_after.to_dict()},
                    now,
                    reason,
                )
                staged[loser.id] = loser_after
                if loser.id == new.id:
                    new = loser_after
                    break
            self._audit(
                {"op": "write", "accepted": True, "reason": decision.reason,
                 "source": source_id, "entry": new.to_dict()},
                now,
                "accepted" if new.status == ACTIVE else "accepted:conflicted",
            )
            staged[new.id] = new
            self._entries.update(staged)
            return WriteResult(new.id, True, decision.reason, created=True, conflict=conflict)

    def resolve_conflict(self, a: MemoryEntry, b: MemoryEntry, now: float) -> ConflictRecord:
        if a.scope_key != b.scope_key:
            raise ValueError("conflicting entries must share a scope_key")
        if a.id == b.id:
            raise ValueError("an entry cannot conflict with itself")
        with self._lock:
            winner, loser, reason = decide_conflict(a, b)
            loser_after = _transition(self._entries.get(loser.id, loser), CONFLICTED)
            self._audit(
                {"op": "conflict", "winner": winner.id, "loser": loser.id,
                 "reason": reason, "entry": loser_after.to_dict()},
                now,
                reason,
            )
            self._entries[loser.id] = loser_after
            return ConflictRecord(winner.id, loser.id, reason, now)

    def verify_entry(self, entry_id: str, verifier: Verifier | None, now: float) -> VerificationOutcome:
        with self._lock:
            entry = self._entries[entry_id]
            self.verification_calls += 1
            verdict = None if verifier is None else verifier(entry)
            if verdict is None:
                after = replace(entry, last_accessed_at=now)
                result = "indeterminate"
            elif verdict:
                after = replace(
                    entry,
                    confidence=entry.confidence + 0.5 * (1.0 - entry.confidence),
                    last_verified_at=max(entry.last_verified_at, now),
                    last_accessed_at=now,
                )
                result = "pass"
            else:
                after = replace(entry, confidence=0.5 * entry.confidence, last_accessed_at=now)
                if after.confidence < DEPRECATE_BELOW and after.status == ACTIVE:
                    after = _transition(after, DEPRECATED)
                result = "fail"
            self._audit({"op": "verify", "result": result, "entry": after.to_dict()}, now, result)
            self._entries[entry_id] = after
            return VerificationOutcome(entry_id, result, entry.confidence, after.confidence, after.status)

    def consolidate_session(
        self,
        transcript: Sequence[Any],
        extractor: Extractor,
        gate: WriteGate,
        now: float,
        provenance: str = "session",
    ) -> list[str]:
        if not transcript:
            raise ValueError("transcript is empty")
        accepted: list[str] = []
        for proposal in extractor(transcript) or ():
            if isinstance(proposal, MemoryEntry):
                candidate = proposal
            elif isinstance(proposal, Mapping):
                candidate = MemoryEntry.candidate(
                    proposal["scope_key"], proposal["content"], now, provenance,
                    tags=proposal.get("tags", ()),
                )
            else:
                scope_key, content = proposal
                candidate = MemoryEntry.candidate(scope_key, content, now, provenance)
            result = self.write_entry(candidate, gate)
            if result.created:
                accepted.append(result.id)
        return accepted

    def sweep(self, now: float, staleness_horizon: float) -> list[str]:
        demoted: list[str] = []
        with self._lock:
            for entry in self.active():
                if now - entry.last_verified_at > staleness_horizon and entry.confidence < SWEEP_CONFIDENCE:
                    after = _transition(entry, DEPRECATED)
                    self._audit({"op": "sweep", "entry": after.to_dict()}, now, "deprecated")
                    self._entries[entry.id] = after
                    demoted.append(entry.id)
        return demoted

    # -- reads ------------------------------------------------------------

    def candidates(self, max_candidates: int) -> list[MemoryEntry]:
        """The retrievability budget: newest active writes first."""
        return list(reversed(self.active()))[:max_candidates]

    def score(self, entry: MemoryEntry, query: MemoryQuery) -> float:
        return score_entry(entry, query, self.weights, self.relevance)

    def retrieve(self, query: MemoryQuery) -> RetrievalResult:
        with self._lock:
            pool = self.candidates(query.max_candidates)
            ranked = sorted(((self.score(e, query), e.id) for e in pool), key=lambda t: (-t[0], t[1]))
            top = ranked[: query.k]
            for _, entry_id in top:
                self._entries[entry_id] = replace(self._entries[entry_id], last_accessed_at=query.now)
            return RetrievalResult(tuple((i, s) for s, i in top), scored=len(pool))

    # -- persistence ------------------------------------------------------

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self._entries.values():
                fh.write(json.dumps(entry.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike[str], audit: AuditLog, **kwargs: Any) -> "MemoryStore":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(MemoryEntry.from_dict(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise MemoryFormatError(f"{path}:{lineno}: {exc}") from exc
        return cls(audit, entries=entries, **kwargs)
