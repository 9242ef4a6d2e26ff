"""Two sessions against one harness: the first looks a fact up, the second answers from memory."""

from __future__ import annotations

from agentharness import AuditLog, DriftingEnvironment, Harness, HarnessConfig, MemoryStore, PermissionPolicy, SkillRegistry, Task, run_session
from agentharness.scripted import FactSeeker, answer_extractor, bind_executors, builtin_predicates

SKILLS = [{"name": "env.lookup", "executor": "lookup", "version": 1, "tags": ["lookup"],
           "preconditions": ["has-key"], "postconditions": ["value-matches-environment"], "cost": 1.0}]


def main() -> None:
    env = DriftingEnvironment({"svc.port": "8080"})
    predicates = builtin_predicates()
    audit = AuditLog()
    harness = Harness(
        substrate=FactSeeker(),
        registry=SkillRegistry.from_records(SKILLS, bind_executors(SKILLS, env), predicates),
        predicates=predicates,
        policy=PermissionPolicy.from_mapping({"env.*": "allow"}),
        audit=audit,
        store=MemoryStore(audit),
        verifier=env.verify,
        environment=env,
        config=HarnessConfig(budget=64),
        extractor=answer_extractor,
    )
    for session in ("first", "second"):
        trajectory = run_session(harness, [Task("t", "report svc.port")], 4, session)
        print(f"{session} session: {trajectory.status} in {len(trajectory.turns)} turn(s)")
        for turn in trajectory.turns:
            actions = [p["action"] for p in turn.proposals]
            print(f"  turn {turn.index}: proposals={actions} tool_calls={turn.counters.tool_calls}")
    print("\nmemory:")
    for e in harness.store:
        print(f"  {e.id} {e.content} conf={e.confidence:.2f} from {e.provenance}")
    kinds = {}
    for r in audit.records:
        kinds[r.kind] = kinds.get(r.kind, 0) + 1
    print(f"audit: {kinds}")


if __name__ == "__main__":
    main()
