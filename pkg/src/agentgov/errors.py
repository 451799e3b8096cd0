"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` (e.g. ``"duplicate-version"``)
so callers and tests can branch on it without parsing messages.
"""

from __future__ import annotations


class AgentGovError(Exception):
    kind = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.kind)
        self.details = details


class InvalidArgument(AgentGovError):
    kind = "invalid-argument"


class InvalidState(AgentGovError):
    kind = "invalid-state"


class ScriptExhausted(AgentGovError):
    kind = "script-exhausted"


# tools
class DuplicateVersion(AgentGovError):
    kind = "duplicate-version"


class InvalidSpec(AgentGovError):
    kind = "invalid-spec"


class NotFound(AgentGovError):
    kind = "not-found"


class ValidationError(AgentGovError):
    """Raised by tool-call validation. ``kind`` is set per instance."""

    def __init__(self, kind: str, element: str, message: str = ""):
        super().__init__(message or f"{kind}({element})", element=element)
        self.kind = kind
        self.element = element


# policy
class NegativeCost(AgentGovError):
    kind = "negative-cost"


class WrongEffect(AgentGovError):
    kind = "wrong-effect"


class UnauthorizedApprover(AgentGovError):
    kind = "unauthorized-approver"


# memory
class InvalidRecord(AgentGovError):
    kind = "invalid-record"


class RunNotTerminated(AgentGovError):
    kind = "run-not-terminated"


# trace
class RunTerminatedError(AgentGovError):
    kind = "run-terminated"


class ScenarioMismatch(AgentGovError):
    kind = "scenario-mismatch"


class InvalidCorpus(AgentGovError):
    kind = "invalid-corpus"


# multiagent
class CycleDetected(AgentGovError):
    kind = "cycle-detected"

    def __init__(self, cycle: list[str]):
        super().__init__(f"cycle-detected {cycle}", cycle=cycle)
        self.cycle = cycle


class MissingStake(AgentGovError):
    kind = "missing-stake"


class UnknownNode(AgentGovError):
    kind = "unknown-node-in-edge"


class InvalidDistribution(AgentGovError):
    kind = "invalid-distribution"


class UnstakedBidder(AgentGovError):
    kind = "unstaked-bidder"


# scenario files
class ScenarioError(AgentGovError):
    """Scenario parse or validation failure; ``where`` names the section/field."""

    kind = "parse-error"

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}", where=where)
        self.where = where
