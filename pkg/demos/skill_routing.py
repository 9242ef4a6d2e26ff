"""Route subtasks to skills, invoke one under a permission gate, and catch a bad result."""

from __future__ import annotations

from agentharness import AuditLog, PermissionPolicy, SkillRegistry, SkillSpec, Subtask, check_permission, route
from agentharness.skills import PredicateTable, SkillRuntime


class Gate:
    def __init__(self, policy: PermissionPolicy, audit: AuditLog) -> None:
        self.policy, self.audit = policy, audit

    def check(self, action, now):
        return check_permission(action, self.policy, None, self.audit, now)


def main() -> None:
    predicates = PredicateTable()
    predicates.precondition("has-key")(lambda args: "key" in args)
    predicates.postcondition("non-empty")(lambda args, result, env: bool(result.get("value")))

    registry = SkillRegistry(
        [
            SkillSpec("env.lookup", 1, frozenset({"lookup", "env"}), ("has-key",), ("non-empty",), 1.0, 0.5),
            SkillSpec("web.search", 1, frozenset({"lookup"}), (), (), 5.0, 0.5),
        ],
        {"env.lookup": lambda args: {"value": ""}, "web.search": lambda args: {"value": "?"}},
    )
    audit = AuditLog()
    runtime = SkillRuntime(registry, predicates, audit)

    decision = route(Subtask("find-port", {"lookup", "env"}), registry)
    print(f"route lookup+env -> {decision.chosen} (match {decision.match_score:.2f}), alternatives {decision.alternatives}")
    decision_low = route(Subtask("deploy", {"deploy", "k8s", "env"}), registry)
    print(f"route deploy+k8s+env -> escalated={decision_low.escalated} reason={decision_low.escalation_reason}")

    print("\nwith an empty policy the skill never runs:")
    print(f"  outcome: {runtime.invoke(decision, {'key': 'db.port'}, Gate(PermissionPolicy(), audit), 1)}")

    print("with env.* allowed it runs, and the post-condition catches the empty answer:")
    allow = Gate(PermissionPolicy.from_mapping({"env.*": "allow"}), audit)
    outcome = runtime.invoke(decision, {"key": "db.port"}, allow, 2)
    print(f"  verified={outcome.verified} failed={outcome.failed_postconditions}")
    print(f"\naudit outcomes: {[r.outcome for r in audit.records]}")


if __name__ == "__main__":
    main()
