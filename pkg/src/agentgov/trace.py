"""Append-only, hash-chained provenance traces.

Each event is stored as one canonical JSON line with fields
``seq, run_id, step, kind, payload, provenance, prev_hash, hash``. The hash is
SHA-256 over the canonical form of every other field, and the first event
chains from the digest of the empty string.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ._canon import GENESIS, canonical_json, digest
from .errors import InvalidArgument, InvalidCorpus, RunTerminatedError

KINDS = (
    "RunStarted", "PlanProposed", "PolicyEvaluated", "ApprovalGranted", "ToolExecuted",
    "MemoryOp", "BudgetCharged", "HeartbeatSent", "MessageSent", "MessageAcked",
    "AlarmRaised", "Escalation", "RunTerminated",
)
FIELDS = ("seq", "run_id", "step", "kind", "payload", "provenance", "prev_hash", "hash")

# provenance keys every event must carry, and the extra ones per kind
BASE_PROVENANCE = ("planner_id", "planner_version", "principal", "budget")
KIND_PROVENANCE = {
    "ToolExecuted": ("tool_name", "tool_version", "decision_id"),
    "PolicyEvaluated": ("decision_id",),
}


def event_hash(seq, run_id, step, kind, payload, provenance, prev_hash) -> str:
    return digest({"seq": seq, "run_id": run_id, "step": step, "kind": kind,
                   "payload": payload, "provenance": provenance, "prev_hash": prev_hash})


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    run_id: str
    step: int
    kind: str
    payload: Mapping[str, Any]
    provenance: Mapping[str, Any]
    prev_hash: str
    hash: str

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in FIELDS}

    def to_line(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TraceEvent":
        return cls(**{f: d[f] for f in FIELDS})

    def computed_hash(self) -> str:
        return event_hash(self.seq, self.run_id, self.step, self.kind,
                          self.payload, self.provenance, self.prev_hash)


class TraceSink:
    """Single-writer sink for one run. Stores canonical lines, never objects,
    so nothing handed out can alter what was recorded."""

    def __init__(self, run_id: str):
        if not run_id:
            raise InvalidArgument("run_id empty")
        self.run_id = run_id
        self._lines: list[str] = []
        self._head = GENESIS
        self.terminated = False

    def emit(self, kind: str, step: int, payload: Mapping[str, Any] | None = None,
             provenance: Mapping[str, Any] | None = None) -> int:
        if self.terminated:
            raise RunTerminatedError(f"run {self.run_id} already terminated")
        if kind not in KINDS:
            raise InvalidArgument(f"unknown event kind {kind!r}")
        seq = len(self._lines)
        # round-trip through JSON so later mutation of the caller's dicts cannot leak in
        payload = json.loads(canonical_json(payload or {}))
        provenance = json.loads(canonical_json(provenance or {}))
        h = event_hash(seq, self.run_id, step, kind, payload, provenance, self._head)
        ev = TraceEvent(seq, self.run_id, step, kind, payload, provenance, self._head, h)
        self._lines.append(ev.to_line())
        self._head = h
        if kind == "RunTerminated":
            self.terminated = True
        return seq

    @property
    def head(self) -> str:
        return self._head

    def __len__(self) -> int:
        return len(self._lines)

    def lines(self) -> list[str]:
        return list(self._lines)

    def events(self) -> list[TraceEvent]:
        return [TraceEvent.from_dict(json.loads(line)) for line in self._lines]

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(line + "\n" for line in self._lines), encoding="utf-8")
        return path


def rechain(events: Iterable[Mapping[str, Any] | TraceEvent]) -> list[TraceEvent]:
    """Renumber and re-hash a sequence of events into a fresh valid chain.

    Used to build hand-edited traces that are chain-valid but violate some
    other rule (e.g. for audit tests).
    """
    out: list[TraceEvent] = []
    head = GENESIS
    for i, e in enumerate(events):
        d = e.to_dict() if isinstance(e, TraceEvent) else dict(e)
        h = event_hash(i, d["run_id"], d["step"], d["kind"], d["payload"], d["provenance"], head)
        out.append(TraceEvent(i, d["run_id"], d["step"], d["kind"], d["payload"],
                              d["provenance"], head, h))
        head = h
    return out


# ---------------------------------------------------------------- chain checks

@dataclass(frozen=True)
class ChainOk:
    length: int

    @property
    def ok(self) -> bool:
        return True


@dataclass(frozen=True)
class BrokenAt:
    seq: int
    reason: str = ""

    @property
    def ok(self) -> bool:
        return False


def _is_hex(s: Any) -> bool:
    return isinstance(s, str) and len(s) == 64 and all(c in "0123456789abcdef" for c in s)


def verify_chain(trace: Sequence[TraceEvent | str | Mapping[str, Any]]) -> ChainOk | BrokenAt:
    """Recompute every hash; report the first position that fails.

    Accepts events, dicts or raw lines. Raw lines must also be in canonical
    form, so any byte-level edit is caught even when it still parses.
    """
    prev = GENESIS
    for i, item in enumerate(trace):
        try:
            if isinstance(item, str):
                d = json.loads(item)
                if canonical_json(d) != item.rstrip("\n"):
                    return BrokenAt(i, "non-canonical line")
            elif isinstance(item, TraceEvent):
                d = item.to_dict()
            else:
                d = dict(item)
            if set(d) != set(FIELDS):
                return BrokenAt(i, "field set")
            ev = TraceEvent.from_dict(d)
        except (ValueError, TypeError, KeyError):
            return BrokenAt(i, "unparseable")
        if ev.seq != i:
            return BrokenAt(i, "seq")
        if ev.prev_hash != prev:
            return BrokenAt(i, "prev_hash")
        if not _is_hex(ev.hash):
            return BrokenAt(i, "hash format")
        try:
            if ev.computed_hash() != ev.hash:
                return BrokenAt(i, "hash")
        except (TypeError, ValueError):
            return BrokenAt(i, "unhashable")
        prev = ev.hash
    return ChainOk(len(trace))


# ---------------------------------------------------------------- completeness

@dataclass(frozen=True)
class CompletenessReport:
    missing: tuple[tuple[int, str], ...] = ()

    @property
    def passed(self) -> bool:
        return not self.missing

    def to_dict(self) -> dict:
        return {"passed": self.passed, "missing": [list(m) for m in self.missing]}


def _present(value: Any) -> bool:
    return value is not None and value != "" and value != {}


def verify_completeness(trace: Sequence[TraceEvent], exclude: Iterable[str] = ()) -> CompletenessReport:
    """List every (seq, field) missing from the mandatory provenance set.

    Run-level problems are reported against the last seq with the pseudo
    fields ``missing-run-started`` and ``unterminated-run``.
    """
    exclude = set(exclude)
    missing: list[tuple[int, str]] = []
    for e in trace:
        required = BASE_PROVENANCE + KIND_PROVENANCE.get(e.kind, ())
        for f in required:
            if f not in exclude and not _present(e.provenance.get(f)):
                missing.append((e.seq, f))
    last = trace[-1].seq if trace else 0
    if not trace or trace[0].kind != "RunStarted":
        missing.append((0, "missing-run-started"))
    if not trace or trace[-1].kind != "RunTerminated":
        missing.append((last, "unterminated-run"))
    elif sum(1 for e in trace if e.kind == "RunTerminated") != 1:
        missing.append((last, "multiple-run-terminated"))
    return CompletenessReport(tuple(missing))


# ---------------------------------------------------------------- files

def write_trace(path, events: Iterable[TraceEvent]) -> Path:
    path = Path(path)
    path.write_text("".join(e.to_line() + "\n" for e in events), encoding="utf-8")
    return path


def read_lines(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def read_trace(path) -> list[TraceEvent]:
    """Load a trace file; raise ``InvalidCorpus`` if it does not verify."""
    lines = read_lines(path)
    verdict = verify_chain(lines)
    if not verdict.ok:
        raise InvalidCorpus(f"{path}: chain broken at seq {verdict.seq} ({verdict.reason})",
                            seq=verdict.seq)
    return [TraceEvent.from_dict(json.loads(line)) for line in lines]


# ---------------------------------------------------------------- replay comparison

@dataclass(frozen=True)
class Identical:
    length: int

    @property
    def ok(self) -> bool:
        return True


@dataclass(frozen=True)
class DivergedAt:
    seq: int
    field: str

    @property
    def ok(self) -> bool:
        return False


def _first_key_diff(a: Mapping, b: Mapping, prefix: str) -> str | None:
    for k in sorted(set(a) | set(b)):
        if a.get(k, _MISSING) != b.get(k, _MISSING):
            return f"{prefix}.{k}"
    return None


_MISSING = object()
# recorded for provenance only; comparing it would make every edit diverge at seq 0
_MASKED = {("RunStarted", "payload", "scenario_digest")}


def compare_traces(recorded: Sequence[TraceEvent], fresh: Sequence[TraceEvent]) -> Identical | DivergedAt:
    """First event where two traces disagree on content.

    Compared per event: kind, step, run_id, payload, provenance. The scenario
    digest stamped on RunStarted is excluded.
    """
    for i, (a, b) in enumerate(zip(recorded, fresh)):
        for name in ("kind", "step", "run_id"):
            if getattr(a, name) != getattr(b, name):
                return DivergedAt(i, name)
        for name in ("payload", "provenance"):
            x, y = dict(getattr(a, name)), dict(getattr(b, name))
            for kind, part, key in _MASKED:
                if a.kind == kind and part == name:
                    x.pop(key, None)
                    y.pop(key, None)
            where = _first_key_diff(x, y, name)
            if where:
                return DivergedAt(i, where)
    if len(recorded) != len(fresh):
        return DivergedAt(min(len(recorded), len(fresh)), "length")
    return Identical(len(recorded))


def chain_hashes(trace: Sequence[TraceEvent]) -> list[str]:
    return [e.hash for e in trace]
