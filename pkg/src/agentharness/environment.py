"""Key-value world with scheduled mutations, used to make memory go stale on cue."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

FACT_RE = re.compile(r"(\S+) = (\S+)")


def render_fact(key: str, value: Any) -> str:
    return f"{key} = {value}"


def parse_fact(content: str) -> tuple[str, str] | None:
    match = FACT_RE.fullmatch(content.strip())
    return (match.group(1), match.group(2)) if match else None


def parse_facts(text: str) -> list[tuple[str, str]]:
    return FACT_RE.findall(text)


@dataclass(frozen=True)
class Mutation:
    episode: int
    key: str
    value: str | None  # None removes the fact


@dataclass
class DriftingEnvironment:
    facts: dict[str, str]
    mutations: list[Mutation] = field(default_factory=list)
    available: bool = True
    episode: int = -1

    def __post_init__(self) -> None:
        self._initial = dict(self.facts)
        self.mutations = sorted(self.mutations, key=lambda m: m.episode)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "DriftingEnvironment":
        muts = [Mutation(int(m["episode"]), m["key"], m.get("value")) for m in raw.get("mutations", [])]
        return cls({k: str(v) for k, v in raw.get("facts", {}).items()}, muts)

    def begin_episode(self, episode: int) -> list[Mutation]:
        """Apply every mutation scheduled up to and including ``episode``."""
        applied = []
        for m in self.mutations:
            if self.episode < m.episode <= episode:
                self._apply(m)
                applied.append(m)
        self.episode = max(self.episode, episode)
        return applied

    def _apply(self, m: Mutation) -> None:
        if m.value is None:
            self.facts.pop(m.key, None)
        else:
            self.facts[m.key] = str(m.value)

    def facts_at(self, episode: int) -> dict[str, str]:
        """Facts as they stand during ``episode`` (pure; ignores live edits)."""
        state = dict(self._initial)
        for m in self.mutations:
            if m.episode <= episode:
                if m.value is None:
                    state.pop(m.key, None)
                else:
                    state[m.key] = str(m.value)
        return state

    def keys(self) -> set[str]:
        keys = set(self._initial)
        keys.update(m.key for m in self.mutations)
        return keys

    def verify(self, entry: Any) -> bool | None:
        """Does the entry's content still match the world? None when unreachable."""
        if not self.available:
            return None
        return fact_holds(entry.scope_key, entry.content, self.facts)


def fact_holds(scope_key: str, content: str, facts: Mapping[str, str]) -> bool:
    parsed = parse_fact(content)
    if parsed is None or parsed[0] != scope_key:
        return False
    return facts.get(scope_key) == parsed[1]
