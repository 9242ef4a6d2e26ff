"""Hash-chained, append-only audit log.

Every record carries the digest of its canonical payload and the digest of
the previous record, so rewriting history is detectable by recomputing the
chain. Payloads live in a sibling store addressed by their digest.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

ZERO_HASH = "0" * 64

KINDS = (
    "memory-write",
    "routing-change",
    "tool-invocation",
    "permission-change",
    "collaboration-failure",
    "guardrail-change",
)


class AuditWriteError(RuntimeError):
    """Raised when a record cannot be persisted; callers must abort their change."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def payload_digest(payload: Mapping[str, Any]) -> str:
    return sha256_hex(canonical_json(payload))


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    ts: float
    kind: str
    payload_digest: str
    prev_digest: str
    outcome: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AuditRecord":
        return cls(
            seq=int(raw["seq"]),
            ts=raw["ts"],
            kind=str(raw["kind"]),
            payload_digest=str(raw["payload_digest"]),
            prev_digest=str(raw["prev_digest"]),
            outcome=str(raw["outcome"]),
        )

    @property
    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))


def verify_chain(
    records: Sequence[AuditRecord],
    payloads: Mapping[str, Mapping[str, Any]] | None = None,
) -> int | None:
    """Recompute the chain; return the first bad seq, or None when intact.

    When ``payloads`` is given, each record's payload must be present and
    hash to the recorded payload digest.
    """
    prev = ZERO_HASH
    for index, record in enumerate(records):
        if record.seq != index or record.prev_digest != prev:
            return index
        if record.kind not in KINDS:
            return index
        if payloads is not None:
            body = payloads.get(record.payload_digest)
            if body is None or payload_digest(body) != record.payload_digest:
                return index
        prev = record.digest
    return None


class AuditLog:
    """Single-appender audit log, in memory or backed by JSONL files.

    With a ``path`` the records go to ``path`` and payloads to
    ``<path>.payloads.jsonl``; an existing log is reloaded and extended.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self._lock = threading.RLock()
        self._records: list[AuditRecord] = []
        self._payloads: dict[str, dict[str, Any]] = {}
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self._records, self._payloads = read_log(self.path)

    @property
    def payload_path(self) -> Path | None:
        return payload_path_for(self.path) if self.path is not None else None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[AuditRecord, ...]:
        return tuple(self._records)

    @property
    def payloads(self) -> dict[str, dict[str, Any]]:
        return dict(self._payloads)

    def payload(self, record: AuditRecord) -> dict[str, Any]:
        return self._payloads[record.payload_digest]

    @property
    def head_digest(self) -> str:
        return self._records[-1].digest if self._records else ZERO_HASH

    def record(self, kind: str, payload: Mapping[str, Any], now: float, outcome: str = "ok") -> int:
        if kind not in KINDS:
            raise ValueError(f"unknown audit kind {kind!r}")
        body = json.loads(canonical_json(payload))
        with self._lock:
            rec = AuditRecord(
                seq=len(self._records),
                ts=now,
                kind=kind,
                payload_digest=payload_digest(body),
                prev_digest=self.head_digest,
                outcome=outcome,
            )
            self._persist(rec, body)
            self._records.append(rec)
            self._payloads[rec.payload_digest] = body
            return rec.seq

    def _persist(self, rec: AuditRecord, body: dict[str, Any]) -> None:
        if self.path is None:
            return
        try:
            if rec.payload_digest not in self._payloads:
                with open(self.payload_path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json({"digest": rec.payload_digest, "payload": body}) + "\n")
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(rec.to_dict()) + "\n")
        except OSError as exc:
            raise AuditWriteError(f"cannot append to {self.path}: {exc}") from exc

    def verify(self) -> int | None:
        return verify_chain(self._records, self._payloads)

    def select(self, kind: str | None = None) -> list[tuple[AuditRecord, dict[str, Any]]]:
        return [
            (r, self._payloads[r.payload_digest])
            for r in self._records
            if kind is None or r.kind == kind
        ]

    def digests(self) -> list[str]:
        return [r.digest for r in self._records]

    def dump(self, path: str | os.PathLike[str]) -> None:
        write_log(path, self._records, self._payloads)


def payload_path_for(path: str | os.PathLike[str]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".payloads.jsonl")


def read_log(path: str | os.PathLike[str]) -> tuple[list[AuditRecord], dict[str, dict[str, Any]]]:
    path = Path(path)
    records = [AuditRecord.from_dict(json.loads(line)) for line in _lines(path)]
    payloads: dict[str, dict[str, Any]] = {}
    ppath = payload_path_for(path)
    if ppath.exists():
        for line in _lines(ppath):
            row = json.loads(line)
            payloads[row["digest"]] = row["payload"]
    return records, payloads


def write_log(
    path: str | os.PathLike[str],
    records: Iterable[AuditRecord],
    payloads: Mapping[str, Mapping[str, Any]],
) -> None:
    path = Path(path)
    records = list(records)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec.to_dict()) + "\n")
    seen: set[str] = set()
    with open(payload_path_for(path), "w", encoding="utf-8") as fh:
        for rec in records:
            if rec.payload_digest in seen or rec.payload_digest not in payloads:
                continue
            seen.add(rec.payload_digest)
            fh.write(canonical_json({"digest": rec.payload_digest, "payload": payloads[rec.payload_digest]}) + "\n")


def _lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line for line in fh.read().splitlines() if line.strip()]
