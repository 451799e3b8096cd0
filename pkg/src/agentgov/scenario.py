"""Scenario files: parsing, validation, execution and replay.

A scenario is one self-contained JSON document. Its digest is the SHA-256 of
the canonical serialization (sorted keys, compact separators), so
``parse(serialize(parse(text)))`` always has the same digest as
``parse(text)``.

Top-level sections::

    scenario     {id, version}                       required
    tools        [ToolSpec]                          required (may be empty)
    principals   [Principal]
    policy       {rules: [PolicyRule]}
    budgets      {name: caps}
    breakers     {name: breaker config}
    approvals    [StagedApproval]
    planners     {id: {version, steps, default, repairs}}
    memory       {capacity, records}
    runs         [{label, goal, principal, planner, budget, ...}]
    simulation   {topology, workload, injections, detectors, mitigations, ...}
    seed, k_max, t_max
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from ._canon import canonical_json, digest
from .errors import AgentGovError, ScenarioError, ScenarioMismatch
from .kernel import Goal, PlannerScript, PlanProposal, RepairEntry, RunResult, StopConfig, init_state, run_loop
from .memory import MemoryRecord, MemoryStore
from .multiagent.simulator import MODES, DetectorConfig, FailureInjection, SimReport, simulate
from .multiagent.topology import Task, build_topology
from .policy import BreakerState, Budget, PolicyGate, PolicyRule, Principal, StagedApproval
from .tools import SandboxLimits, ToolExecutor, ToolRegistry, ToolSpec
from .trace import DivergedAt, Identical, TraceEvent, TraceSink, compare_traces

SECTIONS = ("scenario", "tools", "principals", "policy", "budgets", "breakers", "approvals",
            "planners", "memory", "runs", "simulation", "seed", "k_max", "t_max")
REQUIRED = ("scenario", "tools")
SIM_RUN = "sim"


def _fail(where: str, message: str):
    raise ScenarioError(where, message)


def _section(raw: Mapping, name: str, kind: type, default):
    value = raw.get(name, default)
    if not isinstance(value, kind):
        _fail(name, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    raw: Mapping[str, Any]
    digest: str
    source: str = ""

    @property
    def id(self) -> str:
        return self.raw["scenario"]["id"]

    @property
    def version(self) -> str:
        return str(self.raw["scenario"].get("version", "1"))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def runs(self) -> list[dict]:
        return list(self.raw.get("runs", []))

    @property
    def simulation(self) -> dict | None:
        return self.raw.get("simulation")

    def serialize(self) -> str:
        return canonical_json(self.raw)

    def pretty(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    # -------------------------------------------------------- builders

    def registry(self) -> ToolRegistry:
        reg = ToolRegistry()
        for i, d in enumerate(self.raw["tools"]):
            try:
                reg.register(ToolSpec.from_dict(d))
            except (AgentGovError, KeyError, TypeError) as e:
                _fail(f"tools[{i}]", _msg(e))
        return reg

    def principals(self) -> list[Principal]:
        out = []
        for i, d in enumerate(self.raw.get("principals", [])):
            try:
                out.append(Principal.from_dict(d))
            except (AgentGovError, KeyError, TypeError, ValueError) as e:
                _fail(f"principals[{i}]", _msg(e))
        return out

    def gate(self) -> PolicyGate:
        rules = []
        for i, d in enumerate(self.raw.get("policy", {}).get("rules", [])):
            try:
                rules.append(PolicyRule.from_dict(d))
            except (AgentGovError, KeyError, TypeError, ValueError) as e:
                _fail(f"policy.rules[{i}]", _msg(e))
        approvals = []
        for i, d in enumerate(self.raw.get("approvals", [])):
            try:
                approvals.append(StagedApproval.from_dict(d))
            except (KeyError, TypeError, ValueError) as e:
                _fail(f"approvals[{i}]", _msg(e))
        try:
            return PolicyGate(rules, self.principals(), approvals)
        except AgentGovError as e:
            _fail("policy", _msg(e))

    def memory(self) -> MemoryStore:
        sec = self.raw.get("memory", {})
        try:
            return MemoryStore(working_capacity=int(sec.get("capacity", 8)),
                               records=[MemoryRecord.from_dict(r) for r in sec.get("records", [])])
        except (AgentGovError, KeyError, TypeError, ValueError) as e:
            _fail("memory", _msg(e))

    def planner(self, pid: str) -> PlannerScript:
        d = self.raw.get("planners", {}).get(pid)
        if d is None:
            _fail(f"planners.{pid}", "unknown planner")
        where = f"planners.{pid}"
        try:
            steps = {int(k): PlanProposal.from_dict(v) for k, v in d.get("steps", {}).items()}
            default = PlanProposal.from_dict(d["default"]) if d.get("default") else None
            repairs = tuple(RepairEntry(r.get("match", "*"), r.get("rule", "*"),
                                        PlanProposal.from_dict(r["proposal"]))
                            for r in d.get("repairs", ()))
        except (AgentGovError, KeyError, TypeError, ValueError) as e:
            _fail(where, _msg(e))
        return PlannerScript(planner_id=pid, version=str(d.get("version", "1")), steps=steps,
                             default=default, repairs=repairs)

    def budget(self, ref) -> Budget:
        caps = self.raw.get("budgets", {}).get(ref) if isinstance(ref, str) else ref
        if caps is None:
            _fail("budgets", f"unknown budget {ref!r}")
        try:
            return Budget.from_dict(caps)
        except (AgentGovError, TypeError, ValueError) as e:
            _fail("budgets", _msg(e))

    def breaker(self, ref) -> BreakerState:
        if ref is None:
            return BreakerState()
        cfg = self.raw.get("breakers", {}).get(ref) if isinstance(ref, str) else ref
        if cfg is None:
            _fail("breakers", f"unknown breaker {ref!r}")
        return BreakerState.from_dict(cfg)

    def injections(self, include_disabled: bool = False) -> list[FailureInjection]:
        sim = self.simulation or {}
        out = []
        for i, d in enumerate(sim.get("injections", [])):
            if not include_disabled and not d.get("enabled", True):
                continue
            try:
                out.append(FailureInjection.from_dict(d))
            except (AgentGovError, KeyError, TypeError, ValueError) as e:
                _fail(f"simulation.injections[{i}]", _msg(e))
        return out


def _msg(e: Exception) -> str:
    if isinstance(e, KeyError):
        return f"missing field {e.args[0]!r}"
    return str(e)


# ------------------------------------------------------------ parsing

def parse_scenario(text: str, source: str = "") -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"line {e.lineno} column {e.colno}", e.msg) from None
    if not isinstance(raw, dict):
        _fail("document", "top level must be an object")
    cfg = ScenarioConfig(raw=raw, digest=digest(raw), source=source)
    validate_scenario(cfg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), source=str(path))


def serialize_scenario(cfg: ScenarioConfig) -> str:
    return cfg.serialize()


def validate_scenario(cfg: ScenarioConfig) -> None:
    raw = cfg.raw
    for name in REQUIRED:
        if name not in raw:
            _fail(name, "missing required section")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        _fail(sorted(unknown)[0], "unknown section")
    head = _section(raw, "scenario", dict, {})
    if not isinstance(head.get("id"), str) or not head["id"] or "/" in head["id"]:
        _fail("scenario.id", "must be a non-empty string without '/'")
    _section(raw, "tools", list, [])
    _section(raw, "runs", list, [])
    for name in ("seed", "k_max", "t_max"):
        if name in raw and (not isinstance(raw[name], int) or isinstance(raw[name], bool)):
            _fail(name, "must be an integer")
    if not raw.get("runs") and not raw.get("simulation"):
        _fail("runs", "scenario declares neither runs nor a simulation")

    registry = cfg.registry()
    gate = cfg.gate()
    cfg.memory()
    known = set(gate.principals)
    for i, a in enumerate(gate.approvals):
        if a.approver not in known:
            _fail(f"approvals[{i}].approver", f"unknown principal {a.approver!r}")
    for pid in raw.get("planners", {}):
        script = cfg.planner(pid)
        proposals = list(script.steps.values()) + [script.default] + [r.proposal for r in script.repairs]
        for p in proposals:
            if p is not None and p.call is not None:
                _resolve_call(registry, p.call, f"planners.{pid}")
    labels = set()
    for i, run in enumerate(raw.get("runs", [])):
        where = f"runs[{i}]"
        if not isinstance(run, dict):
            _fail(where, "expected object")
        label = run.get("label")
        if not label or not isinstance(label, str) or "/" in label or label == SIM_RUN:
            _fail(f"{where}.label", "must be a non-empty string, not 'sim', without '/'")
        if label in labels:
            _fail(f"{where}.label", f"duplicate label {label!r}")
        labels.add(label)
        try:
            Goal.from_dict(run.get("goal", {}))
        except AgentGovError as e:
            _fail(f"{where}.goal", _msg(e))
        for key in ("principal",):
            if run.get(key) not in known:
                _fail(f"{where}.{key}", f"unknown principal {run.get(key)!r}")
        for j, member in enumerate(run.get("delegation", [])):
            if member not in known:
                _fail(f"{where}.delegation[{j}]", f"unknown principal {member!r}")
        if run.get("planner") not in raw.get("planners", {}):
            _fail(f"{where}.planner", f"unknown planner {run.get('planner')!r}")
        cfg.budget(run.get("budget", {}))
        cfg.breaker(run.get("breaker"))
    if raw.get("simulation") is not None:
        _validate_simulation(cfg, known)


def _resolve_call(registry: ToolRegistry, call, where: str) -> None:
    try:
        registry.resolve(call.name, call.version)
    except AgentGovError as e:
        _fail(where, f"tool call {call.name}@{call.version}: {_msg(e)}")


def _validate_simulation(cfg: ScenarioConfig, principals: set) -> None:
    sim = cfg.simulation
    if not isinstance(sim, dict):
        _fail("simulation", "expected object")
    try:
        topo = build_topology(sim.get("topology", {}))
    except AgentGovError as e:
        _fail("simulation.topology", f"{e.kind}: {e}")
    for nid, node in topo.nodes.items():
        if node.principal != nid and node.principal not in principals:
            _fail(f"simulation.topology.{nid}.principal", f"unknown principal {node.principal!r}")
    caps = set()
    for node in topo.nodes.values():
        caps |= node.capabilities
    ids = set()
    for i, d in enumerate(sim.get("workload", [])):
        try:
            task = Task.from_dict(d)
        except (AgentGovError, KeyError, TypeError, ValueError) as e:
            _fail(f"simulation.workload[{i}]", _msg(e))
        if task.id in ids:
            _fail(f"simulation.workload[{i}].id", f"duplicate task {task.id!r}")
        ids.add(task.id)
        if topo.kind != "Swarm" and not task.required <= caps:
            _fail(f"simulation.workload[{i}].required",
                  f"no node offers {sorted(task.required - caps)}")
        if task.owner is not None and task.owner not in topo.nodes:
            _fail(f"simulation.workload[{i}].owner", f"unknown node {task.owner!r}")
    for i, d in enumerate(sim.get("workload", [])):
        for dep in d.get("deps", ()):
            if dep not in ids:
                _fail(f"simulation.workload[{i}].deps", f"unknown task {dep!r}")
    for i, inj in enumerate(cfg.injections(include_disabled=True)):
        try:
            inj.check(topo)
        except AgentGovError as e:
            _fail(f"simulation.injections[{i}]", _msg(e))
        for tid in inj.params.get("cycle", ()):
            if tid not in ids:
                _fail(f"simulation.injections[{i}].params.cycle", f"unknown task {tid!r}")
    for m in sim.get("mitigations", []):
        if m not in MODES:
            _fail("simulation.mitigations", f"unknown mode {m!r}")
    try:
        DetectorConfig.from_dict(sim.get("detectors"))
    except (AgentGovError, TypeError) as e:
        _fail("simulation.detectors", _msg(e))


# ------------------------------------------------------------ execution

@dataclass(frozen=True)
class Overrides:
    seed: int | None = None
    k_max: int | None = None
    t_max: int | None = None
    inject: Mapping[str, bool] = field(default_factory=dict)
    mitigate: Mapping[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for name in ("seed", "k_max", "t_max"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.inject:
            out["inject"] = dict(sorted(self.inject.items()))
        if self.mitigate:
            out["mitigate"] = dict(sorted(self.mitigate.items()))
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "Overrides":
        d = d or {}
        return cls(seed=d.get("seed"), k_max=d.get("k_max"), t_max=d.get("t_max"),
                   inject=dict(d.get("inject", {})), mitigate=dict(d.get("mitigate", {})))


@dataclass
class RunOutput:
    label: str
    run_id: str
    result: RunResult | None = None
    report: SimReport | None = None
    events: list[TraceEvent] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)


def run_id_for(cfg: ScenarioConfig, label: str) -> str:
    return f"{cfg.id}/{label}"


def _meta(cfg: ScenarioConfig, ov: Overrides) -> dict:
    return {"scenario": cfg.id, "scenario_version": cfg.version,
            "scenario_digest": cfg.digest, "overrides": ov.to_dict()}


def execute(cfg: ScenarioConfig, overrides: Overrides = Overrides(),
            only: Iterable[str] | None = None) -> list[RunOutput]:
    """Run every declared single-agent run, then the simulation if any.

    ``only`` restricts execution to the given labels (``"sim"`` for the
    simulation). Each run gets a fresh memory store, executor and budget.
    """
    only = None if only is None else set(only)
    registry = cfg.registry()
    gate = cfg.gate()
    outputs: list[RunOutput] = []
    for run in cfg.runs:
        label = run["label"]
        if only is not None and label not in only:
            continue
        rid = run_id_for(cfg, label)
        k_max = overrides.k_max or run.get("k_max") or cfg.raw.get("k_max", 8)
        state = init_state(Goal.from_dict(run["goal"]), int(k_max), run_id=rid)
        sink = TraceSink(rid)
        stop = StopConfig(**run["stop"]) if run.get("stop") else StopConfig()
        limits = SandboxLimits(**run["limits"]) if run.get("limits") else SandboxLimits()
        result = run_loop(state, cfg.planner(run["planner"]), registry, gate, cfg.memory(), sink,
                          cfg.budget(run.get("budget", {})), principal=run["principal"],
                          chain=tuple(run.get("delegation", ())), executor=ToolExecutor(),
                          breaker=cfg.breaker(run.get("breaker")), limits=limits, stop=stop,
                          window=int(run.get("window", 8)), run_label=label,
                          meta=_meta(cfg, overrides), context_attrs=run.get("context"),
                          working_retention=run.get("working_retention"))
        outputs.append(RunOutput(label, rid, result=result, events=sink.events(), lines=sink.lines()))
    sim = cfg.simulation
    if sim is not None and (only is None or SIM_RUN in only):
        outputs.append(_execute_sim(cfg, sim, overrides))
    return outputs


def _execute_sim(cfg: ScenarioConfig, sim: Mapping[str, Any], ov: Overrides) -> RunOutput:
    topo = build_topology(sim["topology"])
    workload = [Task.from_dict(d) for d in sim.get("workload", [])]
    injections = []
    for d in sim.get("injections", []):
        on = ov.inject.get(d["mode"], d.get("enabled", True))
        if on:
            injections.append(FailureInjection.from_dict(d))
    mitigations = set(sim.get("mitigations", []))
    for mode, on in ov.mitigate.items():
        (mitigations.add if on else mitigations.discard)(mode)
    seed = ov.seed if ov.seed is not None else cfg.seed
    t_max = ov.t_max or sim.get("t_max") or cfg.raw.get("t_max", 50)
    rid = run_id_for(cfg, SIM_RUN)
    meta = dict(sim.get("params", {}))
    meta.update(_meta(cfg, ov))
    report = simulate(topo, workload, injections, seed=seed, t_max=int(t_max),
                      detectors=DetectorConfig.from_dict(sim.get("detectors")),
                      mitigations=mitigations, classifiers=sim.get("classifiers"),
                      key=sim.get("key", "intent-key"), run_id=rid,
                      planner_version=cfg.version, meta=meta)
    return RunOutput(SIM_RUN, rid, report=report, events=report.sink.events(),
                     lines=report.sink.lines())


def trace_filename(run_id: str) -> str:
    return run_id.replace("/", "__") + ".jsonl"


# ------------------------------------------------------------ replay

def replay(cfg: ScenarioConfig, recorded: list[TraceEvent]) -> Identical | DivergedAt:
    """Re-execute the run a trace came from and compare event by event.

    Raises ``ScenarioMismatch`` when the trace was not produced from a
    scenario with this id, or names a run the scenario does not declare.
    """
    if not recorded or recorded[0].kind != "RunStarted":
        raise ScenarioMismatch("trace does not start with RunStarted")
    head = recorded[0].payload
    if head.get("scenario") != cfg.id:
        raise ScenarioMismatch(f"trace is from scenario {head.get('scenario')!r}, not {cfg.id!r}")
    label = recorded[0].run_id.split("/", 1)[-1]
    labels = {r["label"] for r in cfg.runs} | ({SIM_RUN} if cfg.simulation is not None else set())
    if label not in labels:
        raise ScenarioMismatch(f"scenario {cfg.id!r} declares no run {label!r}")
    ov = Overrides.from_dict(head.get("overrides"))
    fresh = execute(cfg, ov, only=[label])[0]
    return compare_traces(recorded, fresh.events)


# ------------------------------------------------------------ shipped corpus

def shipped_scenarios() -> list[Path]:
    root = resources.files("agentgov") / "scenarios"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))
