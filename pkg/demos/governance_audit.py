"""Show the permission ladder, the review-gated guardrails, and a tampered audit log being caught."""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from agentharness import AuditLog, EvolutionState, PermissionPolicy, ScriptedOperator, check_permission
from agentharness.audit import payload_path_for


def main() -> None:
    policy = PermissionPolicy.from_mapping({"fs.*": "allow", "fs.delete": "ask", "fs.tmp.*": "deny"})
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "audit.jsonl"
        audit = AuditLog(path)
        operator = ScriptedOperator(["n"])
        for now, action in enumerate(["fs.read", "fs.delete", "fs.tmp.clean", "net.fetch"]):
            d = check_permission(action, policy, operator, audit, now)
            print(f"{action:<13} -> {d.decision:<5} rule={d.rule} asked={d.asked}")

        state = EvolutionState(audit, review_token="ops-review")
        print(f"\nguardrail edit without review applied: {state.update_guardrails({'net.*': 'allow'}, 10)}")
        print(f"guardrail edit with review applied:    {state.update_guardrails({'net.*': 'allow'}, 11, review_token='ops-review')}")
        print(f"preference edit (online) applied:      {state.update('preferences', {'style': 'terse'}, 12)}")

        print(f"\nchain verifies: first bad seq = {AuditLog(path).verify()}")
        ppath = payload_path_for(path)
        rows = [json.loads(line) for line in ppath.read_text().splitlines()]
        rows[1]["payload"]["decision"] = "allow"
        ppath.write_text("".join(json.dumps(r) + "\n" for r in rows))
        print(f"after flipping the second payload's decision: first bad seq = {AuditLog(path).verify()}")


if __name__ == "__main__":
    main()
