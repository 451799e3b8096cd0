"""Acceptance suite: twelve pass/fail criteria, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; every criterion prints one
PASS/FAIL line and the lines are repeated in a summary section.
"""

import math
import random
from pathlib import Path

import numpy as np
import pytest

from agentgov.audit import AUTOMATABLE, AREAS, audit
from agentgov.cli import main as cli
from agentgov.kernel import Goal, PlannerScript, PlanProposal, init_state, run_loop
from agentgov.memory import MemoryStore
from agentgov.multiagent import MATCHING, DetectorConfig, detect_cycle, entropy_bits, gini
from agentgov.policy import (DIMENSIONS, Action, Budget, Exhausted, PolicyGate, PolicyRule,
                             Principal, Privileges, RuleMatch, charge, evaluate)
from agentgov.scenario import Overrides, execute, load_scenario, shipped_scenarios, trace_filename
from agentgov.tools import ToolCall, ToolExecutor, ToolRegistry, validate
from agentgov.trace import TraceSink, chain_hashes, verify_chain, verify_completeness

from conftest import (SEEDS, allow_all_gate, corpus_digests, counter_tool, echo_tool,
                      seed_violation, seedable_trace)


def all_traces(corpus):
    return [out for _, outputs in corpus for out in outputs]


def scenario(stem):
    return load_scenario(next(p for p in shipped_scenarios() if p.stem == stem))


# ---------------------------------------------------------------- 1

def _never_stopping(rng, n):
    steps = {}
    for i in range(1, n + 1):
        pick = rng.random()
        if pick < 0.5:
            call = ToolCall("echo", "1.x", {"text": f"s{i}-{rng.random():.6f}"})
        elif pick < 0.8:
            call = ToolCall("ledger.append", "1.x", {"amount": rng.randint(1, 100)},
                            idempotency_key=f"k{i}", mode=rng.choice(["Commit", "Simulate"]))
        else:
            call = ToolCall("echo", "1.0.0", {"text": str(i)})
        steps[i] = PlanProposal(kind="ToolCall", call=call, rationale=f"step {i}",
                                confidence=rng.uniform(0.5, 1.0))
    return steps


def test_c01_loop_bound(criterion):
    rng = random.Random(101)
    registry = ToolRegistry([echo_tool(), counter_tool()])
    gate = allow_all_gate()
    violations, runs = [], 0
    for k_max in range(1, 11):
        for i in range(100):
            planner = PlannerScript("fuzz", "1", steps=_never_stopping(rng, k_max + 3))
            sink = TraceSink(f"loop-{k_max}-{i}")
            state = init_state(Goal("g", "keep working"), k_max, run_id=sink.run_id)
            res = run_loop(state, planner, registry, gate, MemoryStore(), sink, Budget({}),
                           principal="alice")
            kinds = [e.kind for e in sink.events()]
            runs += 1
            if res.steps_used > k_max or res.status != "FailedSafe" or "Escalation" not in kinds:
                violations.append((k_max, i, res.status, res.steps_used))
    criterion(1, "loop bound", not violations,
              f"{runs} runs over k_max 1..10, {len(violations)} violations")


# ---------------------------------------------------------------- 2

def test_c02_gate_mediation(corpus, criterion):
    traces = [o.events for o in all_traces(corpus)]
    tools, rules = corpus_digests(corpus)
    report = audit(traces, tools, rules)
    side_effects = sum(1 for t in traces for e in t
                       if e.kind == "ToolExecuted" and e.payload.get("side_effecting"))
    clean = report.row("Policy Enforcement").status == "pass" and side_effects > 0

    area = "Policy Enforcement"
    bad, seq = seed_violation(seedable_trace(corpus, area), area)
    seeded = audit([bad], tools, rules).row(area)
    flagged = [(ev.run_id, ev.seq) for ev in seeded.evidence]
    exact = flagged == [(bad[seq].run_id, seq)]
    criterion(2, "gate mediation", clean and exact,
              f"{side_effects} side-effecting executions all mediated; "
              f"seeded violation flagged at {flagged} (expected seq {seq})")


# ---------------------------------------------------------------- 3

def _oracle_first_exhausted(caps, seq):
    running = dict.fromkeys(DIMENSIONS, 0)
    for i, cost in enumerate(seq):
        for d in DIMENSIONS:
            cap = math.inf if caps[d] is None else caps[d]
            if running[d] + cost[d] > cap:
                return i, d
        for d in DIMENSIONS:
            running[d] += cost[d]
    return None


def _random_caps(rng):
    return {d: (None if rng.random() < 0.2 else rng.choice([rng.randint(0, 30), rng.uniform(0, 30)]))
            for d in DIMENSIONS}


def _random_cost(rng):
    return {d: rng.choice([0, rng.randint(0, 6), rng.uniform(0, 6)]) for d in DIMENSIONS}


def _budget_runs(rng, n):
    """Random agent runs under random small caps; yields event lists."""
    registry = ToolRegistry([echo_tool(), counter_tool()])
    gate = allow_all_gate()
    for i in range(n):
        caps = {"tokens": rng.randint(3, 40), "tool_calls": rng.randint(1, 6),
                "cost_units": rng.randint(1, 12), "time_units": rng.randint(1, 8)}
        planner = PlannerScript("fuzz", "1", steps=_never_stopping(rng, 8))
        sink = TraceSink(f"budget-{i}")
        state = init_state(Goal("g", "spend"), 8, run_id=sink.run_id)
        run_loop(state, planner, registry, gate, MemoryStore(), sink, Budget(caps),
                 principal="alice")
        yield sink.events()


def _safely_terminated(events):
    charged = [e for e in events if e.kind == "BudgetCharged"]
    for e in charged:
        caps, used = e.payload["caps"], e.payload["consumed"]
        if any(c is not None and used[d] > c for d, c in caps.items()):
            return False
    hit = next((e for e in charged if e.payload["outcome"] == "exhausted"), None)
    status = events[-1].payload["status"]
    if hit is None:
        return status != "BudgetExhausted"
    after = [e.kind for e in events if e.seq > hit.seq]
    return (status == "BudgetExhausted" and after[-2:] == ["Escalation", "RunTerminated"]
            and "ToolExecuted" not in after)


def test_c03_budgeted_autonomy(corpus, criterion):
    rng = random.Random(303)
    over_cap = mismatches = 0
    exhausted_cases = 0
    for _ in range(1000):
        caps = _random_caps(rng)
        seq = [_random_cost(rng) for _ in range(rng.randint(1, 20))]
        b, got = Budget(caps), None
        for i, cost in enumerate(seq):
            res = charge(b, cost)
            if isinstance(res, Exhausted):
                got = (i, res.dimension)
                break
            b = res.budget
            if any(b.consumed[d] > b.cap(d) for d in DIMENSIONS):
                over_cap += 1
        exhausted_cases += got is not None
        mismatches += got != _oracle_first_exhausted(caps, seq)

    runs = [o.events for o in all_traces(corpus) if o.result is not None]
    runs += list(_budget_runs(rng, 200))
    exhausted_runs = [t for t in runs if t[-1].payload["status"] == "BudgetExhausted"]
    unsafe = [t[0].run_id for t in runs if not _safely_terminated(t)]
    ok = (over_cap == 0 and mismatches == 0 and exhausted_cases > 0
          and not unsafe and len(exhausted_runs) > 0)
    criterion(3, "budgeted autonomy", ok,
              f"1000 sequences ({exhausted_cases} exhausted), {mismatches} oracle mismatches, "
              f"{over_cap} cap overruns; {len(exhausted_runs)}/{len(runs)} runs exhausted, "
              f"{len(unsafe)} unsafe terminations")


# ---------------------------------------------------------------- 4

def test_c04_trace_integrity(corpus, criterion):
    outs = all_traces(corpus)
    broken = [o.run_id for o in outs if not verify_chain(o.lines).ok]
    incomplete = [o.run_id for o in outs if not verify_completeness(o.events).passed]
    rng = random.Random(404)
    late = []
    for _ in range(500):
        lines = list(rng.choice(outs).lines)
        seq = rng.randrange(len(lines))
        raw = bytearray(lines[seq].encode())
        pos = rng.randrange(len(raw))
        raw[pos] ^= 1 << rng.randrange(8)
        lines[seq] = raw.decode("utf-8", errors="surrogateescape")
        verdict = verify_chain(lines)
        if verdict.ok or verdict.seq > seq:
            late.append(seq)
    ok = not broken and not incomplete and not late
    criterion(4, "trace integrity", ok,
              f"{len(outs)} traces chain-valid and complete "
              f"({len(broken)} broken, {len(incomplete)} incomplete); "
              f"500 bit flips, {len(late)} missed or located late")


# ---------------------------------------------------------------- 5

def test_c05_deterministic_replay(tmp_path, criterion):
    unstable, replay_fail, traces = [], [], 0
    for path in shipped_scenarios():
        cfg = load_scenario(path)
        baseline = {o.run_id: chain_hashes(o.events) for o in execute(cfg)}
        for _ in range(9):
            again = {o.run_id: chain_hashes(o.events) for o in execute(cfg)}
            if again != baseline:
                unstable.append(cfg.id)
                break
        out = tmp_path / path.stem
        assert cli(["run", str(path), "--out", str(out)]) == 0
        for run_id in baseline:
            traces += 1
            if cli(["replay", str(path), str(out / trace_filename(run_id))]) != 0:
                replay_fail.append(run_id)
    ok = not unstable and not replay_fail
    criterion(5, "deterministic replay", ok,
              f"{len(shipped_scenarios())} scenarios x10 identical hash chains "
              f"({len(unstable)} unstable); replay Identical on {traces - len(replay_fail)}/{traces}")


# ---------------------------------------------------------------- 6

FAILURE_SCENARIOS = {
    "SilentWorkerFailure": "fm_silent_worker",
    "CapabilityMismatch": "fm_capability_mismatch",
    "Misrouting": "fm_misrouting",
    "SolverOverloadCascade": "fm_solver_overload",
    "CommandDistortion": "fm_command_distortion",
    "DelegationDeadlock": "fm_delegation_deadlock",
    "Herding": "fm_herding",
    "StrategicManipulation": "fm_strategic_manipulation",
}
HEALTHY = ("healthy_orchestrator_worker", "healthy_router_solver", "healthy_hierarchical",
           "healthy_swarm")


def _detection(mode, stem):
    cfg = scenario(stem)
    sim = cfg.simulation
    inj = next(d for d in sim["injections"] if d["mode"] == mode)
    det = DetectorConfig.from_dict(sim.get("detectors"))
    report = execute(cfg, only=["sim"])[0].report
    steps = [a.step for a in report.alarms if a.detector in MATCHING[mode]]
    if not steps:
        return False, "no alarm"
    first, onset = min(steps), inj["onset"]
    if mode == "SilentWorkerFailure":
        bound = onset + det.heartbeat_interval * det.miss_threshold
        return first == bound, f"step {first} (exactly {bound})"
    if mode == "DelegationDeadlock":
        tasks = {t["id"]: t for t in sim["workload"]}
        deadline = min(tasks[t]["deadline"] for t in inj["params"]["cycle"])
        return first <= deadline, f"step {first} (deadline {deadline})"
    return first - onset <= det.window, f"latency {first - onset} (window {det.window})"


def test_c06_detection_matrix(criterion):
    rows, ok = [], True
    for mode, stem in FAILURE_SCENARIOS.items():
        hit, note = _detection(mode, stem)
        ok &= hit
        rows.append(f"{mode} {note}")
    false_alarms = {}
    for stem in HEALTHY:
        report = execute(scenario(stem))[-1].report
        if report.alarms:
            false_alarms[stem] = sorted(report.alarm_kinds())
    for mode, stem in FAILURE_SCENARIOS.items():
        report = execute(scenario(stem), Overrides(inject={mode: False}))[-1].report
        if report.alarms:
            false_alarms[f"{stem} (off)"] = sorted(report.alarm_kinds())
    ok &= not false_alarms
    criterion(6, "detection matrix", ok,
              "; ".join(rows) + f"; false alarms with injection off: {false_alarms or 0}")


# ---------------------------------------------------------------- 7

def test_c07_mitigation_efficacy(criterion):
    results, ok = [], True
    for mode in ("SilentWorkerFailure", "DelegationDeadlock", "SolverOverloadCascade", "Misrouting"):
        cfg = scenario(FAILURE_SCENARIOS[mode])
        off = execute(cfg, Overrides(mitigate={mode: False}), only=["sim"])[0].report
        on = execute(cfg, Overrides(mitigate={mode: True}), only=["sim"])[0].report
        ok &= on.completed > off.completed
        results.append(f"{mode} {on.completed} vs {off.completed}")
    criterion(7, "mitigation efficacy", ok, "tasks done on vs off: " + "; ".join(results))


# ---------------------------------------------------------------- 8

def _gini_oracle(x):
    # rank formula, independent of the pairwise-difference implementation
    s = sorted(x)
    n = len(s)
    return 2 * sum((i + 1) * v for i, v in enumerate(s)) / (n * sum(s)) - (n + 1) / n


def _entropy_oracle(p):
    return -sum(v * math.log2(v) for v in p if v > 0)


def test_c08_numeric_oracles(criterion):
    tol = 1e-9
    examples = [
        abs(gini([1, 1, 1, 1]) - 0.0) <= tol,
        abs(gini([0, 0, 0, 4]) - 0.75) <= tol,
        abs(entropy_bits([0.25] * 4) - 2.0) <= tol,
        abs(_gini_oracle([0, 0, 0, 4]) - 0.75) <= tol,
        abs(_entropy_oracle([0.25] * 4) - 2.0) <= tol,
    ]
    rng = np.random.default_rng(808)
    worst_g = worst_h = worst_scale = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        x = rng.uniform(0.001, 100.0, n)
        worst_g = max(worst_g, abs(gini(x) - _gini_oracle(x.tolist())))
        c = float(rng.uniform(0.01, 1000.0))
        worst_scale = max(worst_scale, abs(gini(c * x) - gini(x)))
        p = rng.dirichlet(np.ones(n))
        worst_h = max(worst_h, abs(entropy_bits(p) - _entropy_oracle(p.tolist())))
    ok = all(examples) and max(worst_g, worst_h, worst_scale) <= tol
    criterion(8, "numeric oracles", ok,
              f"examples {sum(examples)}/5; max |gini-oracle| {worst_g:.1e}, "
              f"|entropy-oracle| {worst_h:.1e}, scale drift {worst_scale:.1e} over 1000 vectors")


# ---------------------------------------------------------------- 9

def _reaches_itself(adj):
    for start in adj:
        seen, stack = set(), list(adj[start])
        while stack:
            n = stack.pop()
            if n == start:
                return True
            if n not in seen:
                seen.add(n)
                stack.extend(adj[n])
    return False


def test_c09_cycle_oracle(criterion):
    rng = random.Random(909)
    disagree = bad_witness = cyclic = 0
    for _ in range(1000):
        n = rng.randint(1, 10)
        density = rng.choice([0.05, 0.1, 0.2, 0.35])
        adj = {i: [j for j in range(n) if rng.random() < density] for i in range(n)}
        verdict = detect_cycle(adj)
        expected = _reaches_itself(adj)
        cyclic += expected
        disagree += verdict.has_cycle != expected
        if verdict.has_cycle:
            ring = verdict.nodes
            bad_witness += not all(b in adj[a] for a, b in zip(ring, ring[1:] + ring[:1]))
    criterion(9, "cycle oracle", disagree == 0 and bad_witness == 0,
              f"1000 digraphs ({cyclic} cyclic), {disagree} disagreements, "
              f"{bad_witness} invalid witnesses")


# ---------------------------------------------------------------- 10

def _valid_args(spec):
    args = {}
    for name, fs in spec.input_schema.items():
        if fs.type == "int":
            args[name] = int(fs.min if fs.min is not None else 1)
        elif fs.type == "real":
            args[name] = float(fs.min if fs.min is not None else 1.0)
        elif fs.type == "bool":
            args[name] = True
        elif fs.type == "enum":
            args[name] = fs.values[0]
        else:
            args[name] = f"{name}-value"
    return args


def test_c10_idempotency(corpus, criterion):
    specs = {}
    for cfg, _ in corpus:
        for spec in cfg.registry():
            if spec.side_effecting:
                specs[spec.tool_id] = spec
    failures, checks = [], 0
    for spec in specs.values():
        call = ToolCall(spec.name, spec.version, _valid_args(spec), idempotency_key="retry-key")
        for n in (2, 5, 10):
            ex = ToolExecutor()
            committed = sum(ex.execute(validate(call, spec)).side_effect_committed for _ in range(n))
            # same again through the agent loop, each retry a distinct proposal
            loop_ex = ToolExecutor()
            steps = {i: PlanProposal(kind="ToolCall", call=call, rationale=f"attempt {i}")
                     for i in range(1, n + 1)}
            gate = PolicyGate([PolicyRule("all", RuleMatch(), "Allow")],
                              [Principal("alice", roles=set(spec.access_tags))])
            sink = TraceSink("idem")
            run_loop(init_state(Goal("g", "retry"), n, "idem"), PlannerScript("p", "1", steps),
                     ToolRegistry([spec]), gate, MemoryStore(), sink, Budget({}),
                     principal="alice", executor=loop_ex)
            loop_commits = sum(1 for e in sink.events() if e.kind == "ToolExecuted"
                               and e.payload["side_effect_committed"])
            checks += 2
            if not (committed == ex.effects[spec.name] == 1
                    and loop_commits == loop_ex.effects.get(spec.name) == 1):
                failures.append((spec.tool_id, n))
    criterion(10, "idempotency", not failures and len(specs) > 0,
              f"{len(specs)} side-effecting tools x n in (2, 5, 10), executor and loop: "
              f"{checks - len(failures) * 2}/{checks} committed exactly once")


# ---------------------------------------------------------------- 11

ROLE_POOL = ("operator", "analyst", "approver", "admin", "auditor")
ATTR_POOL = {"dept": ("finance", "ops"), "region": ("eu", "us")}


def _random_principal(rng, i):
    roles = {r for r in ROLE_POOL if rng.random() < 0.5}
    attrs = {k: rng.choice(v) for k, v in ATTR_POOL.items() if rng.random() < 0.6}
    return Principal(f"p{i}", roles=roles, privilege_level=rng.randint(0, 4), attributes=attrs)


def _random_rule(rng, i):
    match = RuleMatch(
        roles_all={r for r in ROLE_POOL if rng.random() < 0.25},
        roles_any={r for r in ROLE_POOL if rng.random() < 0.2},
        min_level=rng.choice([None, 0, 1, 2, 3]),
        tools={t for t in ("kb", "ledger", "wire") if rng.random() < 0.4},
        attributes={k: rng.choice(v) for k, v in ATTR_POOL.items() if rng.random() < 0.3})
    return PolicyRule(f"r{i}", match, rng.choice(["Allow", "Allow", "Deny", "RequireApproval"]),
                      rng.randint(0, 3))


def _member_privileges(p):
    return Privileges(roles=p.roles, level=p.privilege_level, attributes=p.attributes)


def test_c11_delegation_privilege(criterion):
    rng = random.Random(1111)
    bypasses = permitted = 0
    for c in range(500):
        chain = [_random_principal(rng, f"{c}-{j}") for j in range(rng.randint(1, 4))]
        rules = [_random_rule(rng, j) for j in range(rng.randint(1, 6))]
        by_id = {r.rule_id: r for r in rules}
        for _ in range(4):
            tags = tuple(r for r in ROLE_POOL if rng.random() < 0.15)
            action = Action("tool_call", rng.choice(["kb", "ledger", "wire"]), "d",
                            risk_tier=rng.choice(["Low", "High"]), access_tags=tags)
            d = evaluate(action, chain[-1], chain, {}, rules)
            if not d.permits:
                continue
            permitted += 1
            match = by_id[d.rule_id].match
            need = match.required()
            for member in chain:
                mine = _member_privileges(member)
                if (not need.within(mine)
                        or (match.roles_any and not match.roles_any & member.roles)
                        or (tags and not set(tags) & member.roles)):
                    bypasses += 1
                    break
    criterion(11, "delegation privilege", bypasses == 0 and permitted > 0,
              f"500 chains, {permitted} permitted actions, {bypasses} bypasses")


# ---------------------------------------------------------------- 12

def test_c12_hardening_audit(corpus, criterion):
    traces = [o.events for o in all_traces(corpus)]
    tools, rules = corpus_digests(corpus)

    def consistent_not_checkable(report):
        return all(report.row(a).status == "not-checkable" and report.row(a).reason
                   for a in AREAS if a not in AUTOMATABLE)

    compliant = audit(traces, tools, rules)
    ok = (all(compliant.row(a).status == "pass" for a in AUTOMATABLE)
          and consistent_not_checkable(compliant))
    outcomes = []
    for area in SEEDS:
        source = seedable_trace(corpus, area)
        bad, _ = seed_violation(source, area)
        seeded = [bad if t is source else t for t in traces]
        report = audit(seeded, tools, rules)
        own = report.failed == [area]
        ok &= own and consistent_not_checkable(report)
        outcomes.append(f"{area}: {'own row only' if own else report.failed}")
    criterion(12, "hardening audit", ok,
              f"compliant corpus passes {len(AUTOMATABLE)} rows, "
              f"{len(AREAS) - len(AUTOMATABLE)} not-checkable; seeded: " + "; ".join(outcomes))
