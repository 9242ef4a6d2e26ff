"""Pack a tight context budget and read back the manifest that explains it."""

from __future__ import annotations

from agentharness import ContextSegment, assemble
from agentharness.context import PINNED, RETRIEVED, TOOL_OUTPUT


def main() -> None:
    budget = 24
    candidates = [
        ContextSegment("conventions", PINNED, "answer with the bare value", 1.0, 1.0, "config:project"),
        ContextSegment("mem:port", RETRIEVED, "db.port = 5432", 0.9, 0.9, "m0001"),
        ContextSegment("mem:owner", RETRIEVED, "db.owner = team-a", 0.3, 0.6, "m0002"),
        ContextSegment("log", TOOL_OUTPUT, " ".join(["noise"] * 14), 0.4, 1.0, "inv0007"),
        ContextSegment("out:port", TOOL_OUTPUT, "db.port = 5432 verified", 0.8, 1.0, "inv0008"),
    ]
    assembly = assemble("report db.port", candidates, budget)
    print(f"budget {budget}, used {assembly.total_tokens}")
    print("\nmanifest, in selection order:")
    for row in assembly.manifest:
        print(f"  {row.segment_id:<12} {row.kind:<17} score={row.score:+.3f} tokens={row.token_count} from {row.provenance}")
    print("\nprompt order puts the two strongest optional items at the edges:")
    print("  " + " | ".join(s.id for s in assembly.segments))
    dropped = {c.id for c in candidates} - {s.id for s in assembly.segments}
    print(f"\nleft out: {sorted(dropped)}")


if __name__ == "__main__":
    main()
