import json
import subprocess
import sys

import pytest

from agentgov.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def test_run_writes_traces_and_reports(tmp_path, capsys):
    assert run("run", "agent_operations", "--out", tmp_path) == 0
    files = {p.name for p in tmp_path.iterdir()}
    assert "agent-operations__research.jsonl" in files
    assert {"agent-operations.report.json", "agent-operations.report.txt"} <= files
    report = json.loads((tmp_path / "agent-operations.report.json").read_text())
    assert len(report["runs"]) == 6
    assert "agent-operations/research: Finalized" in capsys.readouterr().out


def test_replay_identical_then_diverged(tmp_path, capsys):
    run("run", "agent_operations", "--out", tmp_path)
    trace = tmp_path / "agent-operations__research.jsonl"
    capsys.readouterr()
    assert run("replay", "agent_operations", trace) == 0
    assert capsys.readouterr().out.startswith("Identical")

    from agentgov.scenario import shipped_scenarios
    src = next(p for p in shipped_scenarios() if p.stem == "agent_operations")
    edited = json.loads(src.read_text())
    edited["tools"][0]["stub"]["table"]["refund-policy"] = "store credit only"
    path = tmp_path / "edited.json"
    path.write_text(json.dumps(edited))
    assert run("replay", path, trace) == 1
    assert capsys.readouterr().out.startswith("DivergedAt(seq=")


def test_replay_mismatch_and_broken_trace(tmp_path, capsys):
    run("run", "healthy_swarm", "--out", tmp_path)
    trace = tmp_path / "healthy-swarm__sim.jsonl"
    assert run("replay", "agent_operations", trace) == 2
    assert "scenario-mismatch" in capsys.readouterr().err
    lines = trace.read_text().splitlines()
    lines[3] = lines[3].replace('"step":', '"step": ')
    trace.write_text("\n".join(lines) + "\n")
    assert run("replay", "healthy_swarm", trace) == 2


def test_audit_exit_codes(tmp_path, capsys):
    run("run", "agent_operations", "--out", tmp_path)
    traces = sorted(tmp_path.glob("*.jsonl"))
    assert run("audit", *traces, "--scenario", "agent_operations", "--out", tmp_path / "a") == 0
    assert (tmp_path / "a" / "audit.json").exists()

    from agentgov.trace import read_trace, rechain, write_trace
    events = [e.to_dict() for e in read_trace(traces[0])]
    events[1]["provenance"]["principal"] = ""
    bad = write_trace(tmp_path / "bad.jsonl", rechain(events))
    assert run("audit", bad, "--scenario", "agent_operations", "--out", tmp_path / "b") == 1
    audit = json.loads((tmp_path / "b" / "audit.json").read_text())
    statuses = {r["area"]: r["status"] for r in audit["rows"]}
    assert statuses["Identity & Access"] == "fail"

    bad.write_text(bad.read_text().replace("alice", "alicf", 1))
    assert run("audit", bad, "--scenario", "agent_operations", "--out", tmp_path / "c") == 2


def test_run_errors(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text('{"scenario": {"id": "x"}}')
    assert run("run", broken, "--out", tmp_path) == 2
    assert "parse-error in tools" in capsys.readouterr().err
    assert run("run", tmp_path / "absent.json", "--out", tmp_path) == 3


def test_inject_and_mitigate_toggles(tmp_path, capsys):
    assert run("run", "fm_silent_worker", "--inject", "SilentWorkerFailure=off", "--out", tmp_path) == 0
    assert "alarms=0" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        run("run", "fm_silent_worker", "--inject", "SilentWorkerFailure=maybe")
    with pytest.raises(SystemExit):
        run("run", "fm_silent_worker", "--mitigate", "Gremlins=on")


def test_sweep(tmp_path, capsys):
    assert run("sweep", "fm_herding", "--seeds", "1-3,7", "--jobs", "2", "--out", tmp_path) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split(":")[0] for line in out] == ["seed 1", "seed 2", "seed 3", "seed 7"]
    assert (tmp_path / "fm-herding__sim.seed7.jsonl").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "agentgov", "run", "healthy_router_solver",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "healthy-router-solver/sim" in proc.stdout
