import pytest

from agentgov.kernel import Goal, PlannerScript, PlanProposal, init_state, run_loop
from agentgov.memory import MemoryStore
from agentgov.policy import Budget, PolicyGate, PolicyRule, Principal, RuleMatch
from agentgov.scenario import execute, load_scenario, shipped_scenarios
from agentgov.tools import FieldSpec, StubBehavior, ToolCall, ToolExecutor, ToolRegistry, ToolSpec
from agentgov.trace import TraceSink


def echo_tool(name="echo", version="1.0.0", **kw):
    return ToolSpec(name=name, version=version, input_schema={"text": FieldSpec("text")},
                    output_schema={"text": FieldSpec("text")}, **kw)


def counter_tool(name="ledger.append", version="1.0.0", cost=2.0, **kw):
    return ToolSpec(name=name, version=version,
                    input_schema={"amount": FieldSpec("int", min=1, max=100)},
                    output_schema={"balance": FieldSpec("int")}, side_effecting=True,
                    idempotent=True, cost=cost,
                    stub=StubBehavior(kind="counter", amount_field="amount", output_field="balance"),
                    **kw)


def allow_all_gate(*principals):
    rules = [PolicyRule("allow-all", RuleMatch(), "Allow")]
    return PolicyGate(rules, principals or [Principal("alice", roles={"operator"})])


def tool_step(name, version="1.0.0", key="", **args):
    return PlanProposal(kind="ToolCall", call=ToolCall(name, version, args, idempotency_key=key),
                        rationale=f"call {name}")


def answer(text="done", tag=None):
    return PlanProposal(kind="FinalAnswer", answer=text, rationale="finish", tag=tag)


def run_script(steps, *, k_max=5, registry=None, gate=None, caps=None, default=None,
               principal="alice", executor=None, goal=None, **kw):
    registry = registry or ToolRegistry([echo_tool(), counter_tool()])
    gate = gate or allow_all_gate()
    planner = PlannerScript("p", "1", steps=dict(enumerate(steps, start=1)), default=default)
    sink = TraceSink("r1")
    state = init_state(goal or Goal("g", "answer the question"), k_max, run_id="r1")
    result = run_loop(state, planner, registry, gate, MemoryStore(), sink,
                      Budget(caps or {}), principal=principal, executor=executor, **kw)
    return result, sink.events()


@pytest.fixture(scope="session")
def corpus():
    """Every shipped scenario executed once: list of (config, outputs)."""
    return [(cfg, execute(cfg)) for cfg in map(load_scenario, shipped_scenarios())]


# ---- seeded audit violations: edit one event, then rebuild a valid chain

def _first(events, pred):
    return next(i for i, e in enumerate(events) if pred(e))


def _blank_principal(d):
    d["provenance"]["principal"] = ""


def _forge_decision(d):
    d["provenance"]["decision_id"] = "forged/d0"


def _unknown_version(d):
    d["provenance"]["tool_version"] = "9.9.9"


def _drop_retention(d):
    d["payload"].pop("retention_class")


def _drop_planner_version(d):
    d["provenance"].pop("planner_version")


def _overspend(d):
    dim = next(k for k, v in d["payload"]["caps"].items() if v is not None)
    d["payload"]["consumed"][dim] = d["payload"]["caps"][dim] + 1


SEEDS = {
    "Identity & Access": (lambda e: e.kind == "PlanProposed", _blank_principal),
    "Policy Enforcement": (lambda e: e.kind == "ToolExecuted" and e.payload["side_effecting"],
                           _forge_decision),
    "Tooling & Integrations": (lambda e: e.kind == "ToolExecuted", _unknown_version),
    "Memory Management": (lambda e: e.kind == "MemoryOp", _drop_retention),
    "Observability & Tracing": (lambda e: e.kind == "PolicyEvaluated", _drop_planner_version),
    "Budgeted Autonomy": (lambda e: e.kind == "BudgetCharged"
                          and any(v is not None for v in e.payload["caps"].values()), _overspend),
}


def seed_violation(events, area):
    """Return (rechained events, seq of the edited event) violating ``area``."""
    import copy
    from agentgov.trace import rechain
    pred, edit = SEEDS[area]
    seq = _first(events, pred)
    dicts = [copy.deepcopy(e.to_dict()) for e in events]
    edit(dicts[seq])
    return rechain(dicts), seq


def seedable_trace(corpus, area):
    """First corpus trace that has an event the seed for ``area`` can edit."""
    pred, _ = SEEDS[area]
    for _, outputs in corpus:
        for out in outputs:
            if any(pred(e) for e in out.events):
                return out.events
    raise LookupError(area)


def corpus_digests(corpus):
    tools, rules = {}, {}
    for cfg, _ in corpus:
        tools.update(cfg.registry().digests())
        rules.update(cfg.gate().rule_digests())
    return tools, rules


# ---- acceptance summary: one line per criterion, repeated at the end of the run

_acceptance = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_acceptance] = []


@pytest.fixture
def criterion(request, capsys):
    def record(number, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {name}: {detail}"
        request.config.stash[_acceptance].append((number, line))
        with capsys.disabled():
            print(f"\n    {line}")
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_acceptance, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
