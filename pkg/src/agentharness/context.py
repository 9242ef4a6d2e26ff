"""Per-turn context assembly under a token budget, with a provenance manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

from .governance import Verifier

PINNED = "pinned-prior"
RETRIEVED = "retrieved-memory"
TASK = "task"
TOOL_OUTPUT = "tool-output"
KINDS = (PINNED, RETRIEVED, TASK, TOOL_OUTPUT)
MANDATORY = (PINNED, TASK)

MANIFEST_KEYS = ("segment_id", "kind", "provenance", "score", "token_count")
REFRESH_BELOW = 0.5


class MandatoryOverflow(ValueError):
    """Pinned and task segments alone do not fit the budget."""

    def __init__(self, segment_id: str, used: int, budget: int) -> None:
        super().__init__(f"mandatory segment {segment_id!r} overflows budget ({used} > {budget})")
        self.segment_id = segment_id


def count_tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class ContextSegment:
    id: str
    kind: str
    content: str
    relevance: float
    freshness: float
    provenance: str
    token_count: int = -1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if not self.provenance:
            raise ValueError(f"segment {self.id} has no provenance")
        if self.kind == PINNED and not self.provenance.startswith("config:"):
            raise ValueError(f"pinned segment {self.id} must cite a config source")
        counted = count_tokens(self.content)
        if self.token_count == -1:
            object.__setattr__(self, "token_count", counted)
        elif self.token_count != counted:
            raise ValueError(f"segment {self.id}: token_count {self.token_count} != {counted}")


@dataclass(frozen=True)
class ManifestRow:
    segment_id: str
    kind: str
    provenance: str
    score: float
    token_count: int

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in MANIFEST_KEYS}


@dataclass(frozen=True)
class ContextAssembly:
    segments: tuple[ContextSegment, ...]
    budget: int
    manifest: tuple[ManifestRow, ...]
    annotations: tuple[str, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.segments)

    def render(self) -> str:
        return "\n".join(s.content for s in self.segments)

    def of_kind(self, kind: str) -> list[ContextSegment]:
        return [s for s in self.segments if s.kind == kind]


def score_segment(segment: ContextSegment, budget: int) -> float:
    verbosity = min(1.0, segment.token_count / budget)
    return 0.5 * segment.relevance + 0.3 * segment.freshness - 0.2 * verbosity


def density(score: float, token_count: int) -> float:
    return score / max(token_count, 1)


def select_greedy(items: Sequence[tuple[str, float, int]], capacity: int) -> list[str]:
    """Density-greedy 0/1 selection, guarded by the best single item.

    ``items`` are (id, score, tokens). Items with non-positive score never help
    and are skipped. Taking the better of the greedy fill and the best single
    fitting item keeps the result within half of the optimum.
    """
    useful = [it for it in items if it[1] > 0 and it[2] <= capacity]
    order = sorted(useful, key=lambda it: (-density(it[1], it[2]), -it[1], it[0]))
    picked, used = [], 0
    for seg_id, _, tok in order:
        if used + tok <= capacity:
            picked.append(seg_id)
            used += tok
    if useful:
        best = max(useful, key=lambda it: (it[1], -it[2]))
        scores = {it[0]: it[1] for it in useful}
        if best[1] > sum(scores[i] for i in picked):
            return [best[0]]
    return picked


def _edge_order(chosen: list[tuple[ContextSegment, float]]) -> list[ContextSegment]:
    ranked = [s for s, _ in sorted(chosen, key=lambda t: (-t[1], t[0].id))]
    if len(ranked) < 2:
        return ranked
    return [ranked[0], *ranked[2:], ranked[1]]


def assemble(
    task_text: str,
    candidates: Iterable[ContextSegment],
    budget: int,
    scorer: Callable[[ContextSegment, int], float] = score_segment,
    task_id: str = "task",
) -> ContextAssembly:
    if budget <= 0:
        raise ValueError("budget must be positive")
    candidates = list(candidates)
    task = ContextSegment(task_id, TASK, task_text, 1.0, 1.0, "task")
    pinned = [s for s in candidates if s.kind == PINNED]
    extra_tasks = [s for s in candidates if s.kind == TASK]
    mandatory = pinned + [task] + extra_tasks

    used = 0
    for seg in mandatory:
        used += seg.token_count
        if used > budget:
            raise MandatoryOverflow(seg.id, used, budget)

    scores = {s.id: scorer(s, budget) for s in candidates if s.kind not in MANDATORY}
    scores.update({s.id: scorer(s, budget) for s in mandatory})
    optional = [s for s in candidates if s.kind not in MANDATORY]
    picked = select_greedy([(s.id, scores[s.id], s.token_count) for s in optional], budget - used)
    by_id = {s.id: s for s in optional}
    chosen = [(by_id[i], scores[i]) for i in picked]

    ordered = pinned + [task] + extra_tasks + _edge_order(chosen)
    selection_order = mandatory + [by_id[i] for i in picked]
    manifest = tuple(
        ManifestRow(s.id, s.kind, s.provenance, scores[s.id], s.token_count) for s in selection_order
    )
    return ContextAssembly(tuple(ordered), budget, manifest)


def manifest_of(assembly: ContextAssembly) -> tuple[ManifestRow, ...]:
    return assembly.manifest


def dump_manifest(manifest: Iterable[ManifestRow]) -> str:
    return "".join(json.dumps(row.to_dict(), sort_keys=True) + "\n" for row in manifest)


def parse_manifest(text: str) -> tuple[ManifestRow, ...]:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        if set(raw) != set(MANIFEST_KEYS):
            raise ValueError(f"manifest row keys {sorted(raw)}")
        rows.append(ManifestRow(**raw))
    return tuple(rows)


def refresh(assembly: ContextAssembly, store: Any, verifier: Verifier | None, now: float) -> ContextAssembly:
    """Re-verify stale retrieved-memory segments through the memory store.

    Segments whose entry fails are dropped and the drop is annotated; passing
    segments become fully fresh. Without a verifier the assembly is returned
    unchanged and annotated ``refresh-skipped``.
    """
    if verifier is None or store is None:
        return replace(assembly, annotations=assembly.annotations + ("refresh-skipped",))
    kept: list[ContextSegment] = []
    removed: set[str] = set()
    notes = list(assembly.annotations)
    for seg in assembly.segments:
        if seg.kind != RETRIEVED or seg.freshness >= REFRESH_BELOW:
            kept.append(seg)
            continue
        outcome = store.verify_entry(seg.provenance, verifier, now)
        if outcome.result == "fail":
            removed.add(seg.id)
            notes.append(f"removed:{seg.id}:verification-failed")
        elif outcome.result == "pass":
            kept.append(replace(seg, freshness=1.0))
            notes.append(f"refreshed:{seg.id}")
        else:
            kept.append(seg)
            notes.append(f"indeterminate:{seg.id}")
    manifest = tuple(row for row in assembly.manifest if row.segment_id not in removed)
    return ContextAssembly(tuple(kept), assembly.budget, manifest, tuple(notes))
