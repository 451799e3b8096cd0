"""Hardening audit of trace corpora against the enterprise control checklist.

Six control areas are checked mechanically from traces. The other four
need evidence that traces cannot carry, so they are always reported as
``not-checkable`` with the reason. They are never marked as passing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .errors import InvalidCorpus
from .trace import TraceEvent, verify_chain, verify_completeness

IDENTITY = "Identity & Access"
POLICY = "Policy Enforcement"
TOOLING = "Tooling & Integrations"
MEMORY = "Memory Management"
OBSERVABILITY = "Observability & Tracing"
BUDGET = "Budgeted Autonomy"
DATA_GOVERNANCE = "Data Governance"
CICD = "CI/CD & Evaluation"
SECURITY_TESTING = "Security Testing"
CHANGE_MANAGEMENT = "Change Management"

REQUIREMENT = {
    IDENTITY: "MUST", POLICY: "MUST", TOOLING: "MUST", MEMORY: "SHOULD",
    OBSERVABILITY: "MUST", BUDGET: "MUST", DATA_GOVERNANCE: "MUST", CICD: "SHOULD",
    SECURITY_TESTING: "SHOULD", CHANGE_MANAGEMENT: "SHOULD",
}
AREAS = tuple(REQUIREMENT)
AUTOMATABLE = (IDENTITY, POLICY, TOOLING, MEMORY, OBSERVABILITY, BUDGET)

NOT_CHECKABLE_REASONS = {
    DATA_GOVERNANCE: "classification, encryption in transit/at rest and lineage configuration "
                     "are deployment properties not recorded in run traces",
    CICD: "requires evaluation pipeline reports and benchmark history outside the trace corpus",
    SECURITY_TESTING: "requires red-team and penetration test reports; traces cannot show "
                      "adversarial coverage",
    CHANGE_MANAGEMENT: "requires signed prompt/policy change logs and review records "
                       "outside the trace corpus",
}


@dataclass(frozen=True)
class Evidence:
    run_id: str
    seq: int

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "seq": self.seq}


@dataclass(frozen=True)
class RowResult:
    area: str
    requirement: str
    status: str  # pass | fail | not-checkable
    evidence: tuple[Evidence, ...] = ()
    reason: str = ""

    def to_dict(self) -> dict:
        return {"area": self.area, "requirement": self.requirement, "status": self.status,
                "evidence": [e.to_dict() for e in self.evidence], "reason": self.reason}


@dataclass(frozen=True)
class HardeningReport:
    rows: tuple[RowResult, ...]

    def row(self, area: str) -> RowResult:
        for r in self.rows:
            if r.area == area:
                return r
        raise KeyError(area)

    @property
    def failed(self) -> list[str]:
        return [r.area for r in self.rows if r.status == "fail"]

    @property
    def must_pass(self) -> bool:
        return all(r.status == "pass" for r in self.rows
                   if r.area in AUTOMATABLE and r.requirement == "MUST")

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "must_pass": self.must_pass}

    def to_text(self) -> str:
        lines = [f"{'control area':<26} {'req':<7} {'status':<14} evidence / reason"]
        for r in self.rows:
            if r.status == "not-checkable":
                detail = r.reason
            else:
                refs = [f"{e.run_id}#{e.seq}" for e in r.evidence[:6]]
                more = f" (+{len(r.evidence) - 6})" if len(r.evidence) > 6 else ""
                detail = (", ".join(refs) + more) or "-"
            lines.append(f"{r.area:<26} {r.requirement:<7} {r.status:<14} {detail}")
        return "\n".join(lines) + "\n"


Trace = Sequence[TraceEvent]


def _check_identity(trace: Trace, ctx) -> list[Evidence]:
    return [Evidence(e.run_id, e.seq) for e in trace if not e.provenance.get("principal")]


def _check_policy(trace: Trace, ctx) -> list[Evidence]:
    rules = ctx["rule_digests"]
    bad = []
    permitted: dict[str, int] = {}  # decision_id -> step
    pending: dict[str, int] = {}
    for e in trace:
        if e.kind == "PolicyEvaluated":
            p = e.payload
            rid = p.get("rule_id")
            if rules is not None and rid in rules and p.get("rule_digest") not in (None, rules[rid]):
                bad.append(Evidence(e.run_id, e.seq))
            did = e.provenance.get("decision_id")
            if p.get("effect") == "Allow":
                permitted[did] = e.step
            elif p.get("effect") == "RequireApproval":
                pending[did] = e.step
        elif e.kind == "ApprovalGranted":
            did = e.payload.get("decision_id")
            if did in pending:
                permitted[did] = pending.pop(did)
        elif e.kind == "ToolExecuted" and e.payload.get("side_effecting"):
            did = e.provenance.get("decision_id")
            if permitted.get(did) != e.step:
                bad.append(Evidence(e.run_id, e.seq))
    return bad


def _check_tooling(trace: Trace, ctx) -> list[Evidence]:
    registry = ctx["registry_digests"]
    bad = []
    for e in trace:
        if e.kind != "ToolExecuted":
            continue
        key = (e.provenance.get("tool_name"), e.provenance.get("tool_version"))
        if key not in registry:
            bad.append(Evidence(e.run_id, e.seq))
            continue
        recorded = e.payload.get("tool_digest")
        if recorded is not None and registry[key] is not None and recorded != registry[key]:
            bad.append(Evidence(e.run_id, e.seq))
    return bad


def _check_memory(trace: Trace, ctx) -> list[Evidence]:
    return [Evidence(e.run_id, e.seq) for e in trace if e.kind == "MemoryOp"
            and (not e.payload.get("tier") or not e.payload.get("retention_class"))]


def _check_observability(trace: Trace, ctx) -> list[Evidence]:
    # principal coverage is the identity row's job
    report = verify_completeness(trace, exclude=("principal",))
    run_id = trace[0].run_id if trace else ""
    return [Evidence(run_id, seq) for seq, _ in report.missing]


def _check_budget(trace: Trace, ctx) -> list[Evidence]:
    bad = []
    exhausted_at = None
    escalated_after = False
    for e in trace:
        if e.kind == "BudgetCharged":
            p = e.payload
            if p.get("outcome") == "exhausted" and exhausted_at is None:
                exhausted_at = e
            caps, consumed = p.get("caps", {}), p.get("consumed", {})
            for dim, cap in caps.items():
                if cap is not None and consumed.get(dim, 0) > cap:
                    bad.append(Evidence(e.run_id, e.seq))
                    break
        elif e.kind == "Escalation" and exhausted_at is not None:
            escalated_after = True
        elif e.kind == "ToolExecuted" and exhausted_at is not None:
            bad.append(Evidence(e.run_id, e.seq))
    end = trace[-1] if trace and trace[-1].kind == "RunTerminated" else None
    if end is None:
        bad.append(Evidence(trace[-1].run_id if trace else "", trace[-1].seq if trace else 0))
        return bad
    status = end.payload.get("status")
    if exhausted_at is not None:
        if not escalated_after or status != "BudgetExhausted":
            bad.append(Evidence(exhausted_at.run_id, exhausted_at.seq))
    elif status == "BudgetExhausted":
        bad.append(Evidence(end.run_id, end.seq))
    if status == "FailedSafe" and not any(e.kind == "Escalation" for e in trace):
        bad.append(Evidence(end.run_id, end.seq))
    return bad


CHECKS: dict[str, Callable] = {
    IDENTITY: _check_identity,
    POLICY: _check_policy,
    TOOLING: _check_tooling,
    MEMORY: _check_memory,
    OBSERVABILITY: _check_observability,
    BUDGET: _check_budget,
}


def audit(traces: Iterable[Trace], registry_digests: Mapping | Iterable,
          rule_digests: Mapping[str, str] | None = None) -> HardeningReport:
    """Check a corpus of chain-valid traces; raise ``InvalidCorpus`` otherwise.

    ``registry_digests`` maps (tool name, version) to the tool spec digest; a plain
    iterable of (name, version) pairs skips the digest comparison.
    """
    traces = [list(t) for t in traces]
    for t in traces:
        verdict = verify_chain(t)
        if not verdict.ok:
            run = t[0].run_id if t else "?"
            raise InvalidCorpus(f"trace {run} broken at seq {verdict.seq}", seq=verdict.seq)
    if not isinstance(registry_digests, Mapping):
        registry_digests = {tuple(k): None for k in registry_digests}
    ctx = {"registry_digests": dict(registry_digests), "rule_digests": rule_digests}
    rows = []
    for area in AREAS:
        if area not in CHECKS:
            rows.append(RowResult(area, REQUIREMENT[area], "not-checkable",
                                  reason=NOT_CHECKABLE_REASONS[area]))
            continue
        bad: list[Evidence] = []
        for t in traces:
            bad.extend(CHECKS[area](t, ctx))
        rows.append(RowResult(area, REQUIREMENT[area], "fail" if bad else "pass", tuple(bad)))
    return HardeningReport(tuple(rows))
