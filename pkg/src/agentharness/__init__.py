"""A reference agent harness: trustworthy memory, governed context, verified skills,
auditable governance, an orchestration loop, and a longitudinal evaluation harness."""

from .audit import AuditLog, AuditRecord, AuditWriteError, verify_chain
from .context import (
    ContextAssembly,
    ContextSegment,
    MandatoryOverflow,
    assemble,
    manifest_of,
    refresh,
    score_segment,
)
from .environment import DriftingEnvironment, Mutation
from .evaluation import BenchmarkReport, ScenarioSpec, run_scenario, shipped_scenarios
from .governance import (
    EvolutionState,
    PermissionPolicy,
    ScriptedOperator,
    WriteGate,
    check_permission,
    gate_write,
)
from .memory import MemoryEntry, MemoryQuery, MemoryStore, ScoringWeights
from .orchestration import (
    AgentMessage,
    Harness,
    HarnessConfig,
    Proposal,
    Task,
    dispatch_subagent,
    handoff,
    run_session,
    run_turn,
)
from .skills import SkillRegistry, SkillSpec, Subtask, compose, route, verify_outcome

__version__ = "0.1.0"
