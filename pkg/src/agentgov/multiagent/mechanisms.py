"""Mitigation and detection mechanisms used by the topology simulator.

Each function here is pure and usable on its own. The simulator decides
when to call them and whether their verdicts are enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .._canon import keyed_tag
from ..errors import InvalidArgument, InvalidDistribution, UnstakedBidder
from .topology import AgentNode, Task


# ---------------------------------------------------------------- capability

@dataclass(frozen=True)
class Match:
    ok = True


@dataclass(frozen=True)
class Mismatch:
    missing: frozenset
    ok = False


def check_capability(task: Task, node: AgentNode) -> Match | Mismatch:
    missing = frozenset(task.required) - node.capabilities
    return Mismatch(missing) if missing else Match()


# ---------------------------------------------------------------- routing

@dataclass(frozen=True)
class Route:
    target: str
    confidence: float


@dataclass(frozen=True)
class Fallback:
    confidence: float
    plurality: str | None = None


Classifier = Callable[[Task], str]


def route_task(task: Task, routers: Sequence[Classifier], theta: float) -> Route | Fallback:
    """Plurality vote of the classifier ensemble.

    Confidence is the plurality fraction; ties go to the lexicographically
    smallest class. Below ``theta`` the task goes to the human queue.
    """
    if not routers:
        raise InvalidArgument("empty router ensemble")
    if not 0.0 <= theta <= 1.0:
        raise InvalidArgument("theta outside [0, 1]")
    votes: dict[str, int] = {}
    for clf in routers:
        c = clf(task)
        votes[c] = votes.get(c, 0) + 1
    best = min(votes, key=lambda c: (-votes[c], c))
    confidence = votes[best] / len(routers)
    if confidence < theta:
        return Fallback(confidence=confidence, plurality=best)
    return Route(target=best, confidence=confidence)


# ---------------------------------------------------------------- admission

@dataclass(frozen=True)
class Admitted:
    ok = True


@dataclass(frozen=True)
class Backpressure:
    depth: int
    ok = False


def admit(solver, task: Task | None = None) -> Admitted | Backpressure:
    """``solver`` needs ``depth`` and ``quota`` attributes."""
    depth = solver.depth
    return Admitted() if depth < solver.quota else Backpressure(depth)


# ---------------------------------------------------------------- intent chains

@dataclass(frozen=True)
class IntentHop:
    agent: str
    goal_digest: str
    tag: str

    def to_dict(self) -> dict:
        return {"agent": self.agent, "goal_digest": self.goal_digest, "tag": self.tag}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "IntentHop":
        return cls(agent=d["agent"], goal_digest=d["goal_digest"], tag=d["tag"])


def hop_tag(key: str, prior_tag: str, goal_digest: str) -> str:
    return keyed_tag(key, f"{prior_tag}|{goal_digest}")


def extend_chain(chain: Sequence[IntentHop], agent: str, goal_digest: str, key: str) -> tuple[IntentHop, ...]:
    prior = chain[-1].tag if chain else ""
    return tuple(chain) + (IntentHop(agent, goal_digest, hop_tag(key, prior, goal_digest)),)


@dataclass(frozen=True)
class IntentOk:
    ok = True


@dataclass(frozen=True)
class DistortedAt:
    hop: int  # 1-based
    ok = False


def verify_intent_chain(chain: Sequence[IntentHop], root_digest: str, key: str) -> IntentOk | DistortedAt:
    if not chain:
        raise InvalidArgument("empty intent chain")
    prior = ""
    for i, hop in enumerate(chain, start=1):
        if hop.goal_digest != root_digest or hop.tag != hop_tag(key, prior, hop.goal_digest):
            return DistortedAt(i)
        prior = hop.tag
    return IntentOk()


# ---------------------------------------------------------------- herding

@dataclass(frozen=True)
class HerdingMetrics:
    gini: float
    entropy_bits: float


def gini(allocation: Sequence[float]) -> float:
    x = np.asarray(allocation, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidDistribution("allocation must be a non-empty vector")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise InvalidDistribution("allocation counts must be finite and >= 0")
    mu = x.mean()
    if mu == 0:
        raise InvalidDistribution("allocation is all zero")
    return float(np.abs(x[:, None] - x[None, :]).sum() / (2 * x.size ** 2 * mu))


def entropy_bits(p: Sequence[float]) -> float:
    q = np.asarray(p, dtype=float)
    if q.ndim != 1 or q.size == 0 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise InvalidDistribution("selections must be a probability vector")
    nz = q[q > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0


def herding_metrics(allocation: Sequence[float], selections: Sequence[float]) -> HerdingMetrics:
    return HerdingMetrics(gini=gini(allocation), entropy_bits=entropy_bits(selections))


# ---------------------------------------------------------------- market

@dataclass(frozen=True)
class Bid:
    agent: str
    score: float
    fingerprint: str
    option: str = ""
    retract: bool = False


@dataclass(frozen=True)
class MarketConfig:
    s0: float = 1.0
    slash_fraction: float = 0.5
    k_fingerprints: int = 3
    collusion_threshold: float = 1.0
    retract_threshold: int = 2
    retract_window: int = 10
    anti_correlation: float = 0.0  # penalty weight; 0 disables


@dataclass(frozen=True)
class MarketOutcome:
    task: str
    winner: str | None
    effective: Mapping[str, float]
    penalties: Mapping[str, float]
    slashes: Mapping[str, float]
    retractions: tuple[str, ...]
    stakes: Mapping[str, float]
    alarms: tuple[tuple[str, tuple[str, ...]], ...] = ()  # (kind, agents)

    def to_dict(self) -> dict:
        return {"task": self.task, "winner": self.winner, "effective": dict(self.effective),
                "penalties": dict(self.penalties), "slashes": dict(self.slashes),
                "retractions": list(self.retractions), "stakes": dict(self.stakes),
                "alarms": [[k, list(a)] for k, a in self.alarms]}


def stake_weight(stake: float, s0: float) -> float:
    return stake / (stake + s0) if stake + s0 > 0 else 0.0


def market_round(task: str, bids: Sequence[Bid], stakes: Mapping[str, float],
                 history: Sequence[MarketOutcome] = (), cfg: MarketConfig = MarketConfig(),
                 excluded: Iterable[str] = ()) -> MarketOutcome:
    """Stake-weighted auction with collusion and retraction checks.

    ``excluded`` agents may bid (their bids are still inspected) but cannot win.
    """
    for b in bids:
        if b.agent not in stakes or stakes[b.agent] is None:
            raise UnstakedBidder(f"{b.agent} has no stake")
    stakes = dict(stakes)
    excluded = set(excluded)
    n = len(bids)
    same_option = {}
    for b in bids:
        same_option[b.option] = same_option.get(b.option, 0) + 1
    effective, penalties = {}, {}
    for b in bids:
        e = b.score * stake_weight(stakes[b.agent], cfg.s0)
        if cfg.anti_correlation and b.option:
            pen = cfg.anti_correlation * same_option[b.option] / n
            penalties[b.agent] = pen
            e -= pen
        effective[b.agent] = e

    slashes: dict[str, float] = {}
    alarms = []
    groups: dict[str, list[str]] = {}
    for b in bids:
        groups.setdefault(b.fingerprint, []).append(b.agent)
    flagged: set[str] = set()
    for fp, members in sorted(groups.items()):
        if len(members) < cfg.k_fingerprints:
            continue
        low = all(stakes[a] + stakes[c] < cfg.collusion_threshold
                  for i, a in enumerate(members) for c in members[i + 1:])
        if low:
            members = sorted(members)
            alarms.append(("sybil-collusion", tuple(members)))
            flagged.update(members)
            for a in members:
                slashes[a] = slashes.get(a, 0.0) + cfg.slash_fraction * stakes[a]

    ranked = sorted((b for b in bids if b.agent not in excluded),
                    key=lambda b: (-effective[b.agent], b.agent))
    winner, retractions = None, []
    for b in ranked:
        if b.retract:
            retractions.append(b.agent)
            slashes[b.agent] = slashes.get(b.agent, 0.0) + cfg.slash_fraction * stakes[b.agent]
            continue
        winner = b.agent
        break

    if retractions:
        recent = list(history)[-(cfg.retract_window - 1):] if cfg.retract_window > 1 else []
        for a in retractions:
            count = 1 + sum(a in h.retractions for h in recent)
            if count >= cfg.retract_threshold:
                alarms.append(("bid-retraction", (a,)))
    for a, s in slashes.items():
        stakes[a] = max(0.0, stakes[a] - s)
    return MarketOutcome(task=task, winner=winner, effective=effective, penalties=penalties,
                         slashes=slashes, retractions=tuple(retractions), stakes=stakes,
                         alarms=tuple(alarms))
