"""Tiered agent memory with policy-aware retrieval.

Retrieval ranks by token overlap rather than embeddings:
score = |query terms ∩ record words| / |query terms|.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from ._canon import canonical_json
from .errors import InvalidRecord, RunNotTerminated

TIERS = ("Working", "Episodic", "Semantic", "Preference")
SENSITIVITY = ("Public", "Restricted")

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> set[str]:
    return set(_WORD.findall(str(text).lower()))


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    tier: str
    content: Mapping[str, Any]
    tags: tuple[str, ...] = ()
    scope: str = "shared"
    sensitivity: str = "Public"
    created_at: int = 0
    retention: int | None = None  # steps to live; None = never expires

    def __post_init__(self):
        object.__setattr__(self, "content", MappingProxyType(dict(self.content)))
        object.__setattr__(self, "tags", tuple(self.tags))

    def check(self) -> None:
        if not self.id:
            raise InvalidRecord("record id empty")
        if self.tier not in TIERS:
            raise InvalidRecord(f"{self.id}: unknown tier {self.tier!r}")
        if self.sensitivity not in SENSITIVITY:
            raise InvalidRecord(f"{self.id}: unknown sensitivity {self.sensitivity!r}")
        if self.retention is not None and (not isinstance(self.retention, int) or self.retention < 0):
            raise InvalidRecord(f"{self.id}: retention must be a non-negative integer or None")
        if self.created_at < 0:
            raise InvalidRecord(f"{self.id}: created_at < 0")
        if not self.scope:
            raise InvalidRecord(f"{self.id}: empty scope")

    @property
    def retention_class(self) -> str:
        return "inf" if self.retention is None else str(self.retention)

    def words(self) -> set[str]:
        out: set[str] = set()
        for value in self.content.values():
            out |= words(value)
        return out

    def expired(self, now: int) -> bool:
        return self.retention is not None and self.created_at + self.retention <= now

    def to_dict(self) -> dict:
        return {"id": self.id, "tier": self.tier, "content": dict(self.content),
                "tags": list(self.tags), "scope": self.scope, "sensitivity": self.sensitivity,
                "created_at": self.created_at, "retention": self.retention}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MemoryRecord":
        return cls(id=d["id"], tier=d["tier"], content=d.get("content", {}),
                   tags=tuple(d.get("tags", ())), scope=d.get("scope", "shared"),
                   sensitivity=d.get("sensitivity", "Public"),
                   created_at=int(d.get("created_at", 0)), retention=d.get("retention"))


@dataclass(frozen=True)
class MemoryQuery:
    terms: tuple[str, ...]
    principal: str
    tier: str | None = None
    purpose: str = ""
    limit: int = 5

    def __post_init__(self):
        if self.limit < 1:
            raise InvalidRecord("query limit must be >= 1")
        norm: set[str] = set()
        for t in self.terms:
            norm |= words(t)
        object.__setattr__(self, "terms", tuple(sorted(norm)))


def score(query_terms: Iterable[str], record: MemoryRecord) -> float:
    terms = set(query_terms)
    if not terms:
        return 0.0
    return len(terms & record.words()) / len(terms)


class MemoryStore:
    """One store per scenario; single writer.

    The Working tier is capped at ``working_capacity`` records and evicts
    oldest-first. ``last_evicted``/``last_purged`` expose what the previous
    write/purge removed so callers can trace it.
    """

    def __init__(self, working_capacity: int = 8, records: Iterable[MemoryRecord] = ()):
        if working_capacity < 1:
            raise InvalidRecord("working capacity must be >= 1")
        self.working_capacity = working_capacity
        self._records: dict[str, MemoryRecord] = {}
        self._working: list[str] = []
        self.last_evicted: list[str] = []
        self.last_purged: list[MemoryRecord] = []
        for r in records:
            self.write(r)

    def write(self, record: MemoryRecord) -> str:
        record.check()
        if record.id in self._records:
            raise InvalidRecord(f"duplicate record id {record.id!r}")
        self.last_evicted = []
        if record.tier == "Working":
            while len(self._working) >= self.working_capacity:
                old = self._working.pop(0)
                del self._records[old]
                self.last_evicted.append(old)
            self._working.append(record.id)
        self._records[record.id] = record
        return record.id

    def get(self, rid: str) -> MemoryRecord:
        try:
            return self._records[rid]
        except KeyError:
            raise InvalidRecord(f"no record {rid!r}") from None

    def __contains__(self, rid: str) -> bool:
        return rid in self._records

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[MemoryRecord]:
        return list(self._records.values())

    def count(self, tier: str) -> int:
        return sum(1 for r in self._records.values() if r.tier == tier)

    def visible(self, record: MemoryRecord, principal: str, gate) -> bool:
        if record.scope not in ("shared", principal):
            return False
        if record.sensitivity == "Restricted":
            return gate is not None and gate.can_read_restricted(principal)
        return True

    def retrieve(self, query: MemoryQuery, gate) -> list[MemoryRecord]:
        scored = []
        for r in self._records.values():
            if query.tier is not None and r.tier != query.tier:
                continue
            if not self.visible(r, query.principal, gate):
                continue
            s = score(query.terms, r)
            if s > 0:
                scored.append((s, r))
        scored.sort(key=lambda sr: (-sr[0], -sr[1].created_at, sr[1].id))
        return [r for _, r in scored[:query.limit]]

    def purge_expired(self, now: int) -> int:
        gone = [r for r in self._records.values() if r.expired(now)]
        for r in gone:
            del self._records[r.id]
            if r.id in self._working:
                self._working.remove(r.id)
        self.last_purged = gone
        return len(gone)

    def dump_jsonl(self) -> str:
        return "".join(canonical_json(r.to_dict()) + "\n" for r in self._records.values())

    @classmethod
    def load_jsonl(cls, text: str, working_capacity: int = 8) -> "MemoryStore":
        recs = [MemoryRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(working_capacity=working_capacity, records=recs)


def summarize_episode(events) -> MemoryRecord:
    """Structural Episodic summary of one terminated run trace."""
    events = list(events)
    if not events or events[-1].kind != "RunTerminated":
        raise RunNotTerminated("trace does not end with RunTerminated")
    start, end = events[0], events[-1]
    tools = []
    for e in events:
        if e.kind == "ToolExecuted":
            p = e.payload
            tools.append({"tool": p.get("tool"), "version": p.get("version"),
                          "status": p.get("status")})
    goal = start.payload.get("goal", {})
    content = {
        "goal_id": str(goal.get("id", "")),
        "status": str(end.payload.get("status")),
        "steps_used": str(end.payload.get("steps_used")),
        "tools": canonical_json(tools),
        "budget_consumed": canonical_json(end.payload.get("budget_consumed", {})),
    }
    return MemoryRecord(id=f"episode-{end.run_id}", tier="Episodic", content=content,
                        tags=("episode",), scope=start.provenance.get("principal") or "shared",
                        created_at=int(end.payload.get("steps_used") or 0))
