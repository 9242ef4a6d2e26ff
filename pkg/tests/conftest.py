from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from agentharness.audit import AuditLog
from agentharness.governance import WriteGate
from agentharness.memory import MemoryEntry, MemoryStore

FIXTURES = Path(__file__).parent / "fixtures"


def entry(
    id: str,
    content: str = "x = 1",
    *,
    scope_key: str = "x",
    confidence: float = 0.5,
    created_at: float = 0,
    verified_at: float | None = None,
    accessed_at: float | None = None,
    status: str = "active",
    provenance: str = "test",
) -> MemoryEntry:
    verified_at = created_at if verified_at is None else verified_at
    accessed_at = verified_at if accessed_at is None else accessed_at
    return MemoryEntry(id, scope_key, content, confidence, created_at, verified_at, accessed_at, provenance, status)


@pytest.fixture
def audit() -> AuditLog:
    return AuditLog()


@pytest.fixture
def store(audit: AuditLog) -> MemoryStore:
    return MemoryStore(audit)


@pytest.fixture
def gate() -> WriteGate:
    return WriteGate()


@pytest.fixture
def cli_workdir(tmp_path: Path) -> Path:
    target = tmp_path / "cli"
    shutil.copytree(FIXTURES / "cli", target)
    return target
