"""Governed agent runtime: bounded control loop, policy gate, tool registry,
tiered memory, hash-chained traces, hardening audit and a multi-agent
failure simulator."""

from .audit import HardeningReport, audit
from .errors import AgentGovError
from .kernel import (AgentState, Context, Goal, PlannerScript, PlanProposal, RepairEntry, RunResult,
                     StopConfig, build_context, init_state, plan_step, repair_plan, run_loop,
                     should_stop, summarize_progress)
from .memory import MemoryQuery, MemoryRecord, MemoryStore, summarize_episode
from .policy import (Action, ApprovalRecord, BreakerState, Budget, PolicyDecision, PolicyGate,
                     PolicyRule, Principal, RuleMatch, StagedApproval, approve, charge,
                     effective_privileges, evaluate, observe)
from .scenario import ScenarioConfig, execute, load_scenario, parse_scenario, replay
from .tools import (SandboxLimits, StubBehavior, ToolCall, ToolExecutor, ToolRegistry, ToolResult,
                    ToolSpec, validate)
from .trace import (TraceEvent, TraceSink, compare_traces, read_trace, verify_chain,
                    verify_completeness)

__version__ = "0.1.0"
