"""Write, conflict, verify and sweep a handful of memories, narrating each step."""

from __future__ import annotations

from agentharness import AuditLog, MemoryEntry, MemoryQuery, MemoryStore, WriteGate


def show(store: MemoryStore) -> None:
    for e in store:
        print(f"  {e.id} {e.scope_key:<12} conf={e.confidence:.3f} status={e.status:<10} {e.content}")


def main() -> None:
    audit = AuditLog()
    store = MemoryStore(audit)
    gate = WriteGate()

    print("A confident entry and a weaker contradicting one arrive for the same key.")
    store.write_entry(MemoryEntry.candidate("loader.path", "loader.path = utils/loader.py", 0, "operator", confidence=0.9), gate)
    store.write_entry(MemoryEntry.candidate("loader.path", "loader.path = data/loader.py", 1, "guess", confidence=0.5), gate)
    show(store)

    print("\nRetrieval for a risky action penalizes stale, low-confidence entries.")
    result = store.retrieve(MemoryQuery("where is loader.path", 2, 0.8, 10, 8))
    for entry_id, score in result.entries:
        print(f"  {entry_id} score={score:.4f}")

    print("\nThe world moved: verification fails and halves confidence.")
    world = {"loader.path": "data/loader.py"}
    verifier = lambda e: e.content.split(" = ")[1] == world.get(e.scope_key)
    outcome = store.verify_entry("m0001", verifier, 11)
    print(f"  {outcome.id} {outcome.result}: {outcome.confidence_before:.2f} -> {outcome.confidence_after:.2f}")

    print("\nA second failure drops it under the sweep threshold; the sweep retires it.")
    store.verify_entry("m0001", verifier, 12)
    print(f"  demoted: {store.sweep(40, 14)}")
    show(store)
    print(f"\n{len(audit)} audit records, chain intact: {audit.verify() is None}")


if __name__ == "__main__":
    main()
