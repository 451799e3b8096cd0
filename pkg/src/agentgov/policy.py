"""Policy enforcement gateway: rules, delegation, approvals, budgets, breakers.

Evaluation is deny-by-default. Delegation chains are collapsed to their
effective privileges (role intersection, minimum privilege level, agreeing
attributes) before any rule is matched, so adding a delegate can only ever
take privileges away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

from ._canon import digest
from .errors import InvalidArgument, NegativeCost, UnauthorizedApprover, WrongEffect

EFFECTS = ("Allow", "Deny", "RequireApproval")
# lower wins at equal priority: fail closed
_TIE_RANK = {"Deny": 0, "RequireApproval": 1, "Allow": 2}

APPROVER_ROLE = "approver"
RESTRICTED_READER_ROLE = "restricted-reader"


@dataclass(frozen=True)
class Principal:
    id: str
    roles: frozenset = frozenset()
    attributes: Mapping[str, Any] = field(default_factory=dict)
    privilege_level: int = 0

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("principal id empty")
        if self.privilege_level < 0:
            raise InvalidArgument("privilege_level must be >= 0")
        object.__setattr__(self, "roles", frozenset(self.roles))
        object.__setattr__(self, "attributes", MappingProxyType(dict(self.attributes)))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Principal":
        return cls(id=d["id"], roles=frozenset(d.get("roles", ())),
                   attributes=dict(d.get("attributes", {})),
                   privilege_level=int(d.get("privilege_level", 0)))

    def to_dict(self) -> dict:
        return {"id": self.id, "roles": sorted(self.roles),
                "attributes": dict(self.attributes), "privilege_level": self.privilege_level}


@dataclass(frozen=True)
class Privileges:
    roles: frozenset
    level: int
    attributes: Mapping[str, Any]

    def within(self, other: "Privileges") -> bool:
        return (self.roles <= other.roles and self.level <= other.level
                and all(other.attributes.get(k) == v for k, v in self.attributes.items()))


def effective_privileges(chain: Sequence[Principal]) -> Privileges:
    if not chain:
        raise InvalidArgument("empty delegation chain")
    roles = frozenset.intersection(*(p.roles for p in chain))
    level = min(p.privilege_level for p in chain)
    attrs = dict(chain[0].attributes)
    for p in chain[1:]:
        attrs = {k: v for k, v in attrs.items() if k in p.attributes and p.attributes[k] == v}
    return Privileges(roles=roles, level=level, attributes=MappingProxyType(attrs))


@dataclass(frozen=True)
class Action:
    """What is being asked for. ``kind`` is ``tool_call`` or ``final_answer``."""

    kind: str
    target: str = ""
    digest: str = ""
    risk_tier: str | None = None
    side_effecting: bool = False
    access_tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class RuleMatch:
    """Conjunction of optional conditions; an unset condition matches anything."""

    roles_all: frozenset = frozenset()
    roles_any: frozenset = frozenset()
    min_level: int | None = None
    tools: frozenset = frozenset()
    risk_tiers: frozenset = frozenset()
    kinds: frozenset = frozenset()
    attributes: Mapping[str, Any] = field(default_factory=dict)
    context: Mapping[str, Any] = field(default_factory=dict)

    def matches(self, action: Action, priv: Privileges, context: Mapping[str, Any]) -> bool:
        if self.roles_all and not self.roles_all <= priv.roles:
            return False
        if self.roles_any and not (self.roles_any & priv.roles):
            return False
        if self.min_level is not None and priv.level < self.min_level:
            return False
        if self.tools and action.target not in self.tools and "*" not in self.tools:
            return False
        if self.risk_tiers and action.risk_tier not in self.risk_tiers:
            return False
        if self.kinds and action.kind not in self.kinds:
            return False
        if any(priv.attributes.get(k) != v for k, v in self.attributes.items()):
            return False
        if any(context.get(k) != v for k, v in self.context.items()):
            return False
        return True

    def required(self) -> Privileges:
        """Minimal privileges this match demands of the effective principal."""
        return Privileges(roles=frozenset(self.roles_all), level=self.min_level or 0,
                          attributes=MappingProxyType(dict(self.attributes)))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RuleMatch":
        return cls(
            roles_all=frozenset(d.get("roles_all", ())),
            roles_any=frozenset(d.get("roles_any", ())),
            min_level=d.get("min_level"),
            tools=frozenset(d.get("tools", ())),
            risk_tiers=frozenset(d.get("risk_tiers", ())),
            kinds=frozenset(d.get("kinds", ())),
            attributes=dict(d.get("attributes", {})),
            context=dict(d.get("context", {})),
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for name in ("roles_all", "roles_any", "tools", "risk_tiers", "kinds"):
            value = getattr(self, name)
            if value:
                out[name] = sorted(value)
        if self.min_level is not None:
            out["min_level"] = self.min_level
        if self.attributes:
            out["attributes"] = dict(self.attributes)
        if self.context:
            out["context"] = dict(self.context)
        return out


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    match: RuleMatch
    effect: str
    priority: int = 0

    def __post_init__(self):
        if self.effect not in EFFECTS:
            raise InvalidArgument(f"unknown effect {self.effect!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PolicyRule":
        return cls(rule_id=d["rule_id"], match=RuleMatch.from_dict(d.get("match", {})),
                   effect=d["effect"], priority=int(d.get("priority", 0)))

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "match": self.match.to_dict(),
                "effect": self.effect, "priority": self.priority}

    @property
    def digest(self) -> str:
        return digest(self.to_dict())


DEFAULT_DENY = "default-deny"
ACCESS_TAG_DENY = "tool-access-tags"
CIRCUIT_OPEN = "circuit-open"


@dataclass(frozen=True)
class PolicyDecision:
    decision_id: str
    effect: str
    rule_id: str
    principal: str
    action_digest: str
    step: int
    requires_approval_satisfied: bool = False
    chain: tuple[str, ...] = ()

    @property
    def permits(self) -> bool:
        return self.effect == "Allow" or (
            self.effect == "RequireApproval" and self.requires_approval_satisfied)

    def to_dict(self) -> dict:
        return {"decision_id": self.decision_id, "effect": self.effect, "rule_id": self.rule_id,
                "principal": self.principal, "action_digest": self.action_digest,
                "step": self.step, "requires_approval_satisfied": self.requires_approval_satisfied,
                "chain": list(self.chain)}


def select_rule(rules: Iterable[PolicyRule], action: Action, priv: Privileges,
                context: Mapping[str, Any]) -> PolicyRule | None:
    matching = [r for r in rules if r.match.matches(action, priv, context)]
    if not matching:
        return None
    return min(matching, key=lambda r: (-r.priority, _TIE_RANK[r.effect], r.rule_id))


def evaluate(action: Action, principal: Principal, chain: Sequence[Principal],
             context: Mapping[str, Any], rules: Sequence[PolicyRule],
             decision_id: str = "", step: int = 0) -> PolicyDecision:
    """Decide one action for ``principal`` acting through ``chain``.

    The chain head is the originating principal; when the acting principal is
    not the last member it is appended, so its own privileges always count.
    """
    members = list(chain) or [principal]
    if members[-1].id != principal.id:
        members.append(principal)
    priv = effective_privileges(members)
    ids = tuple(p.id for p in members)
    if action.access_tags and not (priv.roles & frozenset(action.access_tags)):
        effect, rule_id = "Deny", ACCESS_TAG_DENY
    else:
        rule = select_rule(rules, action, priv, context)
        effect, rule_id = ("Deny", DEFAULT_DENY) if rule is None else (rule.effect, rule.rule_id)
    return PolicyDecision(decision_id=decision_id, effect=effect, rule_id=rule_id,
                          principal=principal.id, action_digest=action.digest,
                          step=step, chain=ids)


@dataclass(frozen=True)
class ApprovalRecord:
    decision_id: str
    approver: str
    step: int

    def to_dict(self) -> dict:
        return {"decision_id": self.decision_id, "approver": self.approver, "step": self.step}


def approve(decision: PolicyDecision, approver: Principal, step: int | None = None) -> ApprovalRecord:
    if decision.effect != "RequireApproval":
        raise WrongEffect(f"decision {decision.decision_id} has effect {decision.effect}")
    if APPROVER_ROLE not in approver.roles:
        raise UnauthorizedApprover(f"{approver.id} lacks role {APPROVER_ROLE!r}")
    return ApprovalRecord(decision_id=decision.decision_id, approver=approver.id,
                          step=decision.step if step is None else step)


def satisfied(decision: PolicyDecision, record: ApprovalRecord) -> PolicyDecision:
    if record.decision_id != decision.decision_id:
        raise InvalidArgument("approval record references another decision")
    return replace(decision, requires_approval_satisfied=True)


# ---------------------------------------------------------------- budgets

DIMENSIONS = ("tokens", "time_units", "tool_calls", "cost_units")


def _vector(values: Mapping[str, Any] | None, default=0) -> dict:
    values = values or {}
    unknown = set(values) - set(DIMENSIONS)
    if unknown:
        raise InvalidArgument(f"unknown budget dimensions {sorted(unknown)}")
    return {d: values.get(d, default) for d in DIMENSIONS}


@dataclass(frozen=True)
class Charged:
    budget: "Budget"


@dataclass(frozen=True)
class Exhausted:
    dimension: str
    budget: "Budget"


@dataclass(frozen=True)
class Budget:
    """Caps and consumption over tokens, time, tool calls and cost.

    A cap of ``None`` means unlimited on that dimension.
    """

    caps: Mapping[str, Any]
    consumed: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "caps", MappingProxyType(_vector(self.caps, default=None)))
        object.__setattr__(self, "consumed", MappingProxyType(_vector(self.consumed)))

    def cap(self, dim: str) -> float:
        c = self.caps[dim]
        return math.inf if c is None else c

    def remaining(self) -> dict:
        return {d: (None if self.caps[d] is None else self.caps[d] - self.consumed[d])
                for d in DIMENSIONS}

    def snapshot(self) -> dict:
        return {"caps": dict(self.caps), "consumed": dict(self.consumed)}

    def charge(self, cost: Mapping[str, Any]) -> Charged | Exhausted:
        return charge(self, cost)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Budget":
        if "caps" in d:
            return cls(caps=d["caps"], consumed=d.get("consumed", {}))
        return cls(caps=d)


def charge(budget: Budget, cost: Mapping[str, Any]) -> Charged | Exhausted:
    cost = _vector(cost)
    for d in DIMENSIONS:
        if cost[d] < 0:
            raise NegativeCost(f"negative {d} cost {cost[d]}")
    for d in DIMENSIONS:
        if budget.consumed[d] + cost[d] > budget.cap(d):
            return Exhausted(dimension=d, budget=budget)
    consumed = {d: budget.consumed[d] + cost[d] for d in DIMENSIONS}
    return Charged(budget=Budget(caps=budget.caps, consumed=consumed))


# ---------------------------------------------------------------- breakers

@dataclass(frozen=True)
class BreakerState:
    mode: str = "Closed"
    window: tuple[bool, ...] = ()  # True marks an error
    window_size: int = 5
    error_threshold: int = 3
    cooldown: int = 2
    cooldown_left: int = 0

    @property
    def admits(self) -> bool:
        return self.mode != "Open"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "BreakerState":
        d = d or {}
        return cls(window_size=int(d.get("window", 5)),
                   error_threshold=int(d.get("error_threshold", 3)),
                   cooldown=int(d.get("cooldown", 2)))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "errors": sum(self.window),
                "cooldown_left": self.cooldown_left}


def observe(breaker: BreakerState, outcome: str) -> BreakerState:
    """Advance the breaker by one observed step.

    ``outcome`` is ``"ok"``, ``"error"`` or ``"skip"`` (no call was made);
    an Open breaker counts down on any observed step.
    """
    if outcome not in ("ok", "error", "skip"):
        raise InvalidArgument(f"unknown outcome {outcome!r}")
    if breaker.mode == "Open":
        left = breaker.cooldown_left - 1
        if left <= 0:
            return replace(breaker, mode="HalfOpen", cooldown_left=0)
        return replace(breaker, cooldown_left=left)
    if outcome == "skip":
        return breaker
    if breaker.mode == "HalfOpen":
        if outcome == "ok":
            return replace(breaker, mode="Closed", window=())
        return replace(breaker, mode="Open", window=(), cooldown_left=breaker.cooldown)
    window = (breaker.window + (outcome == "error",))[-breaker.window_size:]
    if sum(window) >= breaker.error_threshold:
        return replace(breaker, mode="Open", window=(), cooldown_left=breaker.cooldown)
    return replace(breaker, window=window)


# ---------------------------------------------------------------- gateway

@dataclass(frozen=True)
class StagedApproval:
    """Pre-recorded human approval, matched by run label, step and tool."""

    approver: str
    step: int
    tool: str
    run: str = "*"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StagedApproval":
        return cls(approver=d["approver"], step=int(d["step"]), tool=d["tool"],
                   run=d.get("run", "*"))

    def to_dict(self) -> dict:
        return {"approver": self.approver, "step": self.step, "tool": self.tool, "run": self.run}


class PolicyGate:
    """Immutable rule set, principal directory and staged approvals.

    Safe to share across runs; per-run state (breaker, decision counter,
    budget) lives with the run.
    """

    def __init__(self, rules: Iterable[PolicyRule] = (), principals: Iterable[Principal] = (),
                 approvals: Iterable[StagedApproval] = ()):
        self.rules = tuple(rules)
        ids = [r.rule_id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise InvalidArgument("duplicate rule_id")
        self.principals = MappingProxyType({p.id: p for p in principals})
        self.approvals = tuple(approvals)

    def principal(self, pid: str) -> Principal:
        return self.principals.get(pid) or Principal(id=pid or "anonymous")

    def evaluate(self, action: Action, principal: str, chain: Sequence[str] = (),
                 context: Mapping[str, Any] | None = None, decision_id: str = "",
                 step: int = 0) -> PolicyDecision:
        members = [self.principal(c) for c in chain]
        return evaluate(action, self.principal(principal), members, context or {},
                        self.rules, decision_id=decision_id, step=step)

    def staged_approver(self, run: str, step: int, tool: str) -> str | None:
        for a in self.approvals:
            if a.step == step and a.tool == tool and a.run in ("*", run):
                return a.approver
        return None

    def approve(self, decision: PolicyDecision, approver: str, step: int | None = None) -> ApprovalRecord:
        return approve(decision, self.principal(approver), step)

    def can_read_restricted(self, pid: str) -> bool:
        return RESTRICTED_READER_ROLE in self.principal(pid).roles

    def rule_digests(self) -> dict[str, str]:
        return {r.rule_id: r.digest for r in self.rules}
