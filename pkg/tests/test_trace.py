import json

import pytest
from hypothesis import given, settings, strategies as st

from agentgov._canon import GENESIS
from agentgov.errors import InvalidArgument, InvalidCorpus, RunTerminatedError
from agentgov.trace import (TraceSink, compare_traces, read_trace, rechain, verify_chain,
                            verify_completeness)

PROV = {"planner_id": "p", "planner_version": "1", "principal": "alice", "budget": {"tokens": 1}}


def sample(n=4):
    sink = TraceSink("r")
    sink.emit("RunStarted", 0, {"goal": "g"}, PROV)
    for i in range(1, n - 1):
        sink.emit("PolicyEvaluated", i, {"effect": "Allow"}, {**PROV, "decision_id": f"d{i}"})
    sink.emit("RunTerminated", n - 1, {"status": "Finalized"}, PROV)
    return sink


def test_genesis_and_linking():
    ev = sample().events()
    assert ev[0].prev_hash == GENESIS
    assert all(b.prev_hash == a.hash for a, b in zip(ev, ev[1:]))
    assert verify_chain(ev).ok and verify_chain(sample().lines()).ok


def test_sink_is_sealed_after_termination():
    sink = sample()
    with pytest.raises(RunTerminatedError):
        sink.emit("MemoryOp", 9)
    with pytest.raises(InvalidArgument):
        TraceSink("x").emit("Bogus", 0)


def test_caller_mutation_does_not_leak():
    sink = TraceSink("r")
    payload = {"a": [1]}
    sink.emit("RunStarted", 0, payload, PROV)
    payload["a"].append(2)
    assert sink.events()[0].payload == {"a": [1]}


def test_edited_payload_breaks_at_that_seq():
    lines = sample(6).lines()
    d = json.loads(lines[3])
    d["payload"]["effect"] = "Deny"
    lines[3] = json.dumps(d, sort_keys=True, separators=(",", ":"))
    v = verify_chain(lines)
    assert not v.ok and v.seq == 3


def test_deleted_event_is_detected():
    lines = sample(6).lines()
    del lines[2]
    assert verify_chain(lines).seq == 2


def test_completeness():
    assert verify_completeness(sample().events()).passed
    sink = TraceSink("r")
    sink.emit("RunStarted", 0, {}, PROV)
    sink.emit("ToolExecuted", 1, {}, {**PROV, "tool_name": "kb"})
    report = verify_completeness(sink.events())
    assert (1, "tool_version") in report.missing and (1, "decision_id") in report.missing
    assert (1, "unterminated-run") in report.missing


def test_read_trace_rejects_broken_files(tmp_path):
    path = sample().write(tmp_path / "t.jsonl")
    assert len(read_trace(path)) == 4
    path.write_text(path.read_text().replace("Finalized", "Finalizex"))
    with pytest.raises(InvalidCorpus) as info:
        read_trace(path)
    assert info.value.details["seq"] == 3


def test_compare_traces():
    a = sample(5).events()
    assert compare_traces(a, sample(5).events()).ok
    b = [e.to_dict() for e in a]
    b[2]["payload"] = {"effect": "Deny"}
    v = compare_traces(a, rechain(b))
    assert (v.seq, v.field) == (2, "payload.effect")
    assert compare_traces(a, a[:3]).field == "length"


@settings(max_examples=200)
@given(st.integers(0, 9), st.data())
def test_any_single_bit_flip_breaks_at_or_before(seq, data):
    lines = sample(10).lines()
    raw = bytearray(lines[seq].encode())
    pos = data.draw(st.integers(0, len(raw) - 1))
    bit = data.draw(st.integers(0, 7))
    raw[pos] ^= 1 << bit
    try:
        lines[seq] = raw.decode()
    except UnicodeDecodeError:
        lines[seq] = raw.decode("latin-1")
    v = verify_chain(lines)
    assert not v.ok and v.seq <= seq
