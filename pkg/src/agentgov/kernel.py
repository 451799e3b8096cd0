"""Bounded, instrumented agent control loop around a scripted planner.

One iteration builds a context, asks the planner for a proposal, puts the
proposal through the policy gate (allowing one repair), then either
finalizes, executes a tool, or records a failed step. Every run ends in a
terminal status. Errors are never raised to the caller. They degrade into
``FailedSafe`` with an escalation event.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from ._canon import digest
from .errors import AgentGovError, InvalidArgument, InvalidState, NotFound, ScriptExhausted, ValidationError
from .memory import MemoryQuery, MemoryRecord, MemoryStore
from .policy import (CIRCUIT_OPEN, Action, BreakerState, Budget, Exhausted, PolicyDecision,
                     PolicyGate, charge, observe, satisfied)
from .tools import SandboxLimits, ToolCall, ToolExecutor, ToolRegistry, ToolResult, validate
from .trace import TraceSink

STATUSES = ("Running", "Finalized", "Stopped", "FailedSafe", "BudgetExhausted")
TERMINAL = frozenset(STATUSES[1:])
BLOCKED_BY_POLICY = "blocked-by-policy"
DEFAULT_WINDOW = 8


@dataclass(frozen=True)
class Goal:
    id: str
    description: str
    constraints: tuple[str, ...] = ()
    success_tag: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("goal id empty")
        if not self.description:
            raise InvalidArgument("goal description empty")
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def to_dict(self) -> dict:
        return {"id": self.id, "description": self.description,
                "constraints": list(self.constraints), "success_tag": self.success_tag}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Goal":
        return cls(id=d.get("id", ""), description=d.get("description", ""),
                   constraints=tuple(d.get("constraints", ())), success_tag=d.get("success_tag"))


@dataclass(frozen=True)
class PlanProposal:
    kind: str  # "ToolCall" | "FinalAnswer"
    call: ToolCall | None = None
    answer: str | None = None
    rationale: str = ""
    evidence: tuple[str, ...] = ()
    confidence: float = 1.0
    tag: str | None = None

    def __post_init__(self):
        if self.kind == "ToolCall":
            if self.call is None or self.answer is not None:
                raise InvalidArgument("ToolCall proposal needs a call and no answer")
        elif self.kind == "FinalAnswer":
            if self.answer is None or self.call is not None:
                raise InvalidArgument("FinalAnswer proposal needs an answer and no call")
        else:
            raise InvalidArgument(f"unknown proposal kind {self.kind!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgument("confidence outside [0, 1]")
        object.__setattr__(self, "evidence", tuple(self.evidence))

    @property
    def is_tool_call(self) -> bool:
        return self.kind == "ToolCall"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "call": self.call.to_dict() if self.call else None,
                "answer": self.answer, "rationale": self.rationale,
                "evidence": list(self.evidence), "confidence": self.confidence, "tag": self.tag}

    @property
    def digest(self) -> str:
        return digest(self.to_dict())

    @property
    def tokens(self) -> int:
        return len(self.rationale.split()) + len((self.answer or "").split())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlanProposal":
        kind = {"tool_call": "ToolCall", "final_answer": "FinalAnswer"}.get(d.get("kind"), d.get("kind"))
        call = ToolCall.from_dict(d["call"]) if d.get("call") else None
        return cls(kind=kind, call=call, answer=d.get("answer"), rationale=d.get("rationale", ""),
                   evidence=tuple(d.get("evidence", ())),
                   confidence=float(d.get("confidence", 1.0)), tag=d.get("tag"))


@dataclass(frozen=True)
class AgentState:
    goal: Goal
    k: int
    k_max: int
    history: tuple = ()  # (PlanProposal, ToolResult | None) pairs
    status: str = "Running"
    run_id: str = ""

    def __post_init__(self):
        if not 0 <= self.k <= self.k_max:
            raise InvalidArgument("k outside [0, k_max]")
        if self.status not in STATUSES:
            raise InvalidArgument(f"unknown status {self.status!r}")

    @property
    def digest(self) -> str:
        return digest({"goal": self.goal.id, "k": self.k, "status": self.status,
                       "history": [p.digest for p, _ in self.history]})


def init_state(goal: Goal, k_max: int, run_id: str | None = None) -> AgentState:
    if not isinstance(goal, Goal):
        raise InvalidArgument("goal must be a Goal")
    if not isinstance(k_max, int) or k_max < 1:
        raise InvalidArgument("k_max must be >= 1")
    return AgentState(goal=goal, k=0, k_max=k_max, run_id=run_id or uuid.uuid4().hex)


def transition(state: AgentState, status: str) -> AgentState:
    if state.status != "Running" or status not in TERMINAL:
        raise InvalidState(f"cannot go {state.status} -> {status}")
    return replace(state, status=status)


@dataclass(frozen=True)
class Context:
    goal: Goal
    window: tuple
    retrieved: tuple[MemoryRecord, ...]
    policy_summary: tuple[str, ...]
    budget_snapshot: Mapping[str, Any]

    @property
    def digest(self) -> str:
        return digest({"goal": self.goal.id,
                       "window": [p.digest for p, _ in self.window],
                       "retrieved": [r.id for r in self.retrieved],
                       "policy": list(self.policy_summary),
                       "budget": dict(self.budget_snapshot)})


def build_context(state: AgentState, memory: MemoryStore, policy_summary: Sequence[str] = (),
                  w: int = DEFAULT_WINDOW, *, principal: str = "", gate: PolicyGate | None = None,
                  budget: Budget | None = None, limit: int = 5) -> Context:
    if state.status != "Running":
        raise InvalidState("context requested for a finished run")
    window = state.history[-w:] if w > 0 else ()
    retrieved: tuple = ()
    if memory is not None:
        query = MemoryQuery(terms=(state.goal.description,), principal=principal, limit=limit)
        retrieved = tuple(memory.retrieve(query, gate))
    snapshot = budget.remaining() if budget is not None else {}
    return Context(goal=state.goal, window=tuple(window), retrieved=retrieved,
                   policy_summary=tuple(policy_summary), budget_snapshot=snapshot)


@dataclass(frozen=True)
class RepairEntry:
    """Scripted replacement for a blocked proposal.

    ``match`` is a proposal digest, ``step:<n>``, ``tool:<name>`` or ``*``;
    ``rule`` is the blocking rule id or ``*``.
    """

    match: str
    rule: str
    proposal: PlanProposal


@dataclass(frozen=True)
class PlannerScript:
    planner_id: str
    version: str
    steps: Mapping[int, PlanProposal] = field(default_factory=dict)
    default: PlanProposal | None = None
    by_digest: Mapping[str, PlanProposal] = field(default_factory=dict)
    repairs: tuple[RepairEntry, ...] = ()

    def proposal_for(self, context_digest: str, step: int) -> PlanProposal:
        if context_digest in self.by_digest:
            return self.by_digest[context_digest]
        if step in self.steps:
            return self.steps[step]
        if self.default is not None:
            return self.default
        raise ScriptExhausted(f"{self.planner_id}: no proposal for step {step} and no default")

    def repair_for(self, proposal: PlanProposal, rule_id: str, step: int) -> PlanProposal | None:
        refs = [proposal.digest, f"step:{step}"]
        if proposal.call is not None:
            refs.append(f"tool:{proposal.call.name}")
        refs.append("*")
        for ref in refs:
            for rule in (rule_id, "*"):
                for entry in self.repairs:
                    if entry.match == ref and entry.rule == rule:
                        return entry.proposal
        return None


def plan_step(planner: PlannerScript, context: Context, step_index: int) -> PlanProposal:
    if step_index < 1:
        raise InvalidArgument("step_index must be >= 1")
    return planner.proposal_for(context.digest, step_index)


def repair_plan(proposal: PlanProposal, decision: PolicyDecision, planner: PlannerScript,
                step: int | None = None) -> PlanProposal:
    step = decision.step if step is None else step
    fixed = planner.repair_for(proposal, decision.rule_id, step)
    if fixed is not None:
        return fixed
    return PlanProposal(kind="FinalAnswer", answer=BLOCKED_BY_POLICY,
                        rationale=f"action blocked by {decision.rule_id}",
                        evidence=(f"decision:{decision.decision_id}",),
                        confidence=1.0, tag=BLOCKED_BY_POLICY)


@dataclass(frozen=True)
class StopConfig:
    n_low: int = 2
    theta: float = 0.3


def should_stop(state: AgentState, cfg: StopConfig = StopConfig()) -> bool:
    proposals = [p for p, _ in state.history]
    if len(proposals) >= 2 and proposals[-1].digest == proposals[-2].digest:
        return True
    if cfg.n_low >= 1 and len(proposals) >= cfg.n_low:
        return all(p.confidence < cfg.theta for p in proposals[-cfg.n_low:])
    return False


@dataclass(frozen=True)
class RunResult:
    status: str
    answer_or_summary: str
    steps_used: int
    budget_consumed: Mapping[str, Any]
    trace_ref: str
    success: bool = False

    def to_dict(self) -> dict:
        return {"status": self.status, "answer_or_summary": self.answer_or_summary,
                "steps_used": self.steps_used, "budget_consumed": dict(self.budget_consumed),
                "trace_ref": self.trace_ref, "success": self.success}


def summarize_progress(state: AgentState, status: str) -> str:
    tools = [f"{p.call.name}:{'aborted' if r is None else ('ok' if r.ok else 'error')}"
             for p, r in state.history if p.is_tool_call]
    return (f"goal={state.goal.id} status={status} steps={state.k} "
            f"tools=[{', '.join(tools)}]")


class _Run:
    """Mutable bookkeeping for one ``run_loop`` call."""

    def __init__(self, state, planner, registry, gate, memory, sink, budget, executor,
                 principal, chain, breaker, limits, stop, window, run_label, context_attrs,
                 working_retention):
        self.state = state
        self.planner = planner
        self.registry = registry
        self.gate = gate
        self.memory = memory
        self.sink = sink
        self.budget = budget
        self.executor = executor
        self.principal = principal
        self.chain = tuple(chain) or (principal,)
        self.breaker = breaker
        self.limits = limits
        self.stop = stop
        self.window = window
        self.run_label = run_label
        self.context_attrs = dict(context_attrs or {})
        self.working_retention = working_retention
        self.n_decisions = 0
        self.policy_summary = tuple(f"{rid}:{d[:12]}" for rid, d in sorted(gate.rule_digests().items()))

    # -- trace helpers
    def prov(self, **extra) -> dict:
        out = {"planner_id": self.planner.planner_id, "planner_version": self.planner.version,
               "principal": self.principal, "budget": self.budget.snapshot()}
        out.update({k: v for k, v in extra.items() if v is not None})
        return out

    def emit(self, kind, payload=None, **prov) -> int:
        return self.sink.emit(kind, self.state.k, payload or {}, self.prov(**prov))

    def charge(self, reason: str, cost: Mapping[str, Any]) -> Exhausted | None:
        res = charge(self.budget, cost)
        if isinstance(res, Exhausted):
            self.emit("BudgetCharged", {"reason": reason, "cost": dict(cost), "outcome": "exhausted",
                                        "dimension": res.dimension, **self.budget.snapshot()})
            return res
        self.budget = res.budget
        self.emit("BudgetCharged", {"reason": reason, "cost": dict(cost), "outcome": "charged",
                                    **self.budget.snapshot()})
        return None

    # -- terminal paths
    def finish(self, status: str, text: str, success: bool = False, escalate: str | None = None,
               detail: Mapping[str, Any] | None = None) -> RunResult:
        if escalate:
            self.emit("Escalation", {"reason": escalate, **(detail or {})})
        self.state = transition(self.state, status)
        self.emit("RunTerminated", {"status": status, "steps_used": self.state.k,
                                    "answer_or_summary": text, "success": success,
                                    "budget_consumed": dict(self.budget.consumed)})
        return RunResult(status=status, answer_or_summary=text, steps_used=self.state.k,
                         budget_consumed=dict(self.budget.consumed), trace_ref=self.state.run_id,
                         success=success)

    def exhausted(self, ex: Exhausted) -> RunResult:
        self.record(None)
        text = summarize_progress(self.state, "BudgetExhausted")
        return self.finish("BudgetExhausted", text, escalate="budget-exhausted",
                           detail={"dimension": ex.dimension})

    def record(self, proposal: PlanProposal | None, result: ToolResult | None = None) -> None:
        if proposal is None:
            proposal = self.current
        self.state = replace(self.state, history=self.state.history + ((proposal, result),))

    # -- gate
    def action_for(self, p: PlanProposal):
        if not p.is_tool_call:
            return Action(kind="final_answer", target="answer", digest=p.digest), None
        try:
            spec = self.registry.resolve(p.call.name, p.call.version)
        except NotFound:
            return Action(kind="tool_call", target=p.call.name, digest=p.digest), None
        return Action(kind="tool_call", target=spec.name, digest=p.digest, risk_tier=spec.risk_tier,
                      side_effecting=spec.side_effecting, access_tags=spec.access_tags), spec

    def gate_check(self, p: PlanProposal):
        action, spec = self.action_for(p)
        self.n_decisions += 1
        did = f"{self.state.run_id}/d{self.n_decisions}"
        k = self.state.k
        if p.is_tool_call and not self.breaker.admits:
            d = PolicyDecision(decision_id=did, effect="Deny", rule_id=CIRCUIT_OPEN,
                               principal=self.principal, action_digest=action.digest, step=k,
                               chain=self.chain)
        else:
            d = self.gate.evaluate(action, self.principal, self.chain, self.context_attrs,
                                   decision_id=did, step=k)
        self.emit("PolicyEvaluated", {
            "effect": d.effect, "rule_id": d.rule_id,
            "rule_digest": self.gate.rule_digests().get(d.rule_id),
            "action": {"kind": action.kind, "target": action.target,
                       "risk_tier": action.risk_tier, "side_effecting": action.side_effecting},
            "action_digest": action.digest, "chain": list(d.chain)}, decision_id=did)
        if d.effect == "RequireApproval" and p.is_tool_call:
            approver = self.gate.staged_approver(self.run_label, k, action.target)
            if approver is not None:
                try:
                    rec = self.gate.approve(d, approver, k)
                except AgentGovError:
                    rec = None
                if rec is not None:
                    self.emit("ApprovalGranted", rec.to_dict(), decision_id=did)
                    d = satisfied(d, rec)
        return d, spec

    # -- memory
    def write_result(self, p: PlanProposal, result: ToolResult) -> None:
        k = self.state.k
        rec = MemoryRecord(
            id=f"{self.state.run_id}/m{k}", tier="Working",
            content={"tool": f"{p.call.name}@{p.call.version}", "status": result.status,
                     "error": result.error or "", "args": " ".join(f"{a}={v}" for a, v in sorted(p.call.args.items())),
                     "output": " ".join(f"{a}={v}" for a, v in sorted(result.output.items()))},
            tags=(p.call.name,), scope=self.principal, created_at=k,
            retention=self.working_retention)
        self.memory.write(rec)
        self.emit("MemoryOp", {"op": "write", "id": rec.id, "tier": rec.tier,
                               "retention_class": rec.retention_class,
                               "evicted": list(self.memory.last_evicted)}, memory_ops=[rec.id])

    def purge(self) -> None:
        if self.memory.purge_expired(self.state.k):
            gone = self.memory.last_purged
            self.emit("MemoryOp", {"op": "purge", "ids": [r.id for r in gone],
                                   "tier": ",".join(sorted({r.tier for r in gone})),
                                   "retention_class": ",".join(sorted({r.retention_class for r in gone}))},
                      memory_ops=[r.id for r in gone])

    def evidence_ok(self, p: PlanProposal) -> bool:
        for ref in p.evidence:
            head, _, rest = ref.partition(":")
            if head == "mem" and rest in self.memory:
                continue
            if head == "seq" and rest.isdigit() and int(rest) < len(self.sink):
                continue
            if head == "decision" and rest.startswith(self.state.run_id + "/"):
                continue
            return False
        return True

    # -- one iteration; returns a RunResult when the run ends
    def iterate(self) -> RunResult | None:
        self.purge()
        ctx = build_context(self.state, self.memory, self.policy_summary, self.window,
                            principal=self.principal, gate=self.gate, budget=self.budget)
        p = plan_step(self.planner, ctx, self.state.k)
        self.current = p
        self.emit("PlanProposed", {"proposal": p.to_dict(), "digest": p.digest,
                                   "context_digest": ctx.digest},
                  memory_ops=[r.id for r in ctx.retrieved] or None)
        ex = self.charge("tokens", {"tokens": p.tokens})
        if ex:
            return self.exhausted(ex)
        if not self.evidence_ok(p):
            self.record(p, ToolResult.failure("unresolved-evidence"))
            return None

        decision, spec = self.gate_check(p)
        if not decision.permits:
            p = repair_plan(p, decision, self.planner, self.state.k)
            self.current = p
            self.emit("PlanProposed", {"proposal": p.to_dict(), "digest": p.digest,
                                       "repair_of": decision.decision_id})
            ex = self.charge("tokens", {"tokens": p.tokens})
            if ex:
                return self.exhausted(ex)
            decision, spec = self.gate_check(p)
            if not decision.permits:
                # one repair per step; the step fails
                result = ToolResult.failure("policy-denied")
                if p.is_tool_call:
                    self.breaker = observe(self.breaker, "skip")
                    self.write_result(p, result)
                self.record(p, result)
                return self.maybe_stop()

        if not p.is_tool_call:
            self.record(p)
            success = self.state.goal.success_tag is None or p.tag == self.state.goal.success_tag
            return self.finish("Finalized", p.answer, success=success)

        call = replace(p.call, principal=self.principal)
        try:
            if spec is None:
                raise NotFound(f"no tool {call.name} matching {call.version}")
            validated = validate(call, spec)
        except (NotFound, ValidationError) as e:
            result = ToolResult.failure(f"{e.kind}:{getattr(e, 'element', call.name)}")
            self.breaker = observe(self.breaker, "error")
            self.write_result(p, result)
            self.record(p, result)
            return self.maybe_stop()

        dedupe = self.executor.would_dedupe(validated)
        cost = 0.0 if (call.mode == "Simulate" or dedupe) else float(spec.cost)
        ex = self.charge("tool", {"tool_calls": 1, "time_units": spec.stub.latency, "cost_units": cost})
        if ex:
            return self.exhausted(ex)
        result = self.executor.execute(validated, self.limits)
        self.emit("ToolExecuted", {
            "tool": spec.name, "version": spec.version, "tool_digest": spec.digest,
            "mode": call.mode, "side_effecting": spec.side_effecting,
            "idempotency_key": call.idempotency_key, "args": dict(validated.args),
            **result.to_dict()},
            tool_name=spec.name, tool_version=spec.version, decision_id=decision.decision_id)
        self.breaker = observe(self.breaker, "ok" if result.ok else "error")
        self.write_result(p, result)
        self.record(p, result)
        return self.maybe_stop()

    def maybe_stop(self) -> RunResult | None:
        if should_stop(self.state, self.stop):
            return self.finish("Stopped", summarize_progress(self.state, "Stopped"))
        return None


def run_loop(state: AgentState, planner: PlannerScript, registry: ToolRegistry, gate: PolicyGate,
             memory: MemoryStore, trace: TraceSink, budget: Budget, *, principal: str,
             chain: Sequence[str] = (), executor: ToolExecutor | None = None,
             breaker: BreakerState | None = None, limits: SandboxLimits = SandboxLimits(),
             stop: StopConfig = StopConfig(), window: int = DEFAULT_WINDOW,
             run_label: str = "run", meta: Mapping[str, Any] | None = None,
             context_attrs: Mapping[str, Any] | None = None,
             working_retention: int | None = None) -> RunResult:
    """Execute the agent loop for at most ``state.k_max`` steps."""
    if state.k != 0 or state.status != "Running" or state.history:
        raise InvalidState("run_loop needs a fresh state")
    executor = executor if executor is not None else ToolExecutor()
    executor.clear_cache()
    run = _Run(state, planner, registry, gate, memory, trace, budget, executor, principal,
               chain, breaker or BreakerState(), limits, stop, window, run_label,
               context_attrs, working_retention)
    run.emit("RunStarted", {"run": run_label, "goal": state.goal.to_dict(), "k_max": state.k_max,
                            "chain": list(run.chain), **dict(meta or {})})
    result = None
    while result is None and run.state.k < run.state.k_max:
        run.state = replace(run.state, k=run.state.k + 1)
        run.current = None
        try:
            result = run.iterate()
        except AgentGovError as e:
            if run.current is not None and len(run.state.history) < run.state.k:
                run.record(run.current, ToolResult.failure(e.kind))
            return run.finish("FailedSafe", summarize_progress(run.state, "FailedSafe"),
                              escalate=e.kind, detail={"message": str(e)})
    if result is None:
        result = run.finish("FailedSafe", summarize_progress(run.state, "FailedSafe"),
                            escalate="k_max-reached")
    return result
