"""Lock-step simulator for the four coordination topologies.

Every step runs the same phases in a fixed order:

1. deliver messages sent on the previous step (by message id) and the
   ACK/NACKs those deliveries produced one step earlier
2. release arriving tasks and start injections whose onset is this step
3. the coordinator (orchestrator, router, root manager or market) acts once
4. every other node processes at most one queue item
5. heartbeats
6. detectors, then mitigations for any new alarm
7. deadline revocation

All randomness comes from one ``random.Random(seed)`` and is drawn in node id
order, so a (topology, workload, injections, seed) tuple fixes the trace.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .._canon import digest_text
from ..errors import InvalidArgument
from ..trace import TraceSink
from .mechanisms import (Bid, DistortedAt, MarketConfig, MarketOutcome, Route, admit,
                         check_capability, entropy_bits, extend_chain, gini, market_round,
                         route_task, verify_intent_chain, IntentHop)
from .topology import TERMINAL_TASK, AgentNode, Task, Topology, detect_cycle

MODES = ("SilentWorkerFailure", "CapabilityMismatch", "Misrouting", "SolverOverloadCascade",
         "CommandDistortion", "DelegationDeadlock", "Herding", "StrategicManipulation")

# which node roles an injection may target
TARGET_ROLES = {
    "SilentWorkerFailure": {"Worker", "Solver"},
    "CapabilityMismatch": {"Worker", "Solver"},
    "Misrouting": {"Router"},
    "SolverOverloadCascade": {"Solver"},
    "CommandDistortion": {"Manager"},
    "DelegationDeadlock": {"Worker", "Manager"},
    "Herding": {"SwarmAgent"},
    "StrategicManipulation": {"SwarmAgent"},
}

# alarm kinds that count as detecting each mode
MATCHING = {
    "SilentWorkerFailure": ("missing-heartbeat",),
    "CapabilityMismatch": ("rejection-spike",),
    "Misrouting": ("rerouting-cycle",),
    "SolverOverloadCascade": ("queue-depth",),
    "CommandDistortion": ("intent-divergence",),
    "DelegationDeadlock": ("deadlock",),
    "Herding": ("gini-breach", "solution-collapse"),
    "StrategicManipulation": ("sybil-collusion", "bid-retraction", "reputation-inflation"),
}
DETECTORS = tuple(sorted({d for ds in MATCHING.values() for d in ds}))

MARKET = "market"


@dataclass(frozen=True)
class AgentMessage:
    id: int
    sender: str
    to: str
    kind: str
    task: str = ""
    evidence: tuple = ()
    constraints: Mapping[str, Any] = field(default_factory=dict)
    intent_chain: tuple[IntentHop, ...] = ()
    ack: str = "Pending"
    sent: int = 0

    def to_dict(self) -> dict:
        return {"msg": self.id, "from": self.sender, "to": self.to, "type": self.kind,
                "fields": {"task": self.task, "evidence": list(self.evidence),
                           "constraints": dict(self.constraints)},
                "intent_chain": [h.to_dict() for h in self.intent_chain],
                "ack": self.ack, "sent": self.sent}


@dataclass(frozen=True)
class FailureInjection:
    mode: str
    targets: tuple[str, ...]
    onset: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown failure mode {self.mode!r}")
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise InvalidArgument(f"{self.mode}: no targets")
        if self.onset < 1:
            raise InvalidArgument(f"{self.mode}: onset must be >= 1")

    def check(self, topology: Topology) -> None:
        for t in self.targets:
            node = topology.nodes.get(t)
            if node is None:
                raise InvalidArgument(f"{self.mode}: unknown target {t}")
            if node.role not in TARGET_ROLES[self.mode]:
                raise InvalidArgument(f"{self.mode} cannot target {node.role} {t}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FailureInjection":
        targets = d.get("targets", d.get("target", ()))
        if isinstance(targets, str):
            targets = (targets,)
        return cls(mode=d["mode"], targets=tuple(targets), onset=int(d.get("onset", 1)),
                   params=dict(d.get("params", {})))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "targets": list(self.targets), "onset": self.onset,
                "params": dict(self.params)}


@dataclass(frozen=True)
class DetectorConfig:
    heartbeat_interval: int = 1
    miss_threshold: int = 3
    rejection_threshold: int = 3
    rejection_window: int = 5
    r_max: int = 3
    alert_fraction: float = 0.8
    alignment_period: int = 2
    h_max: int = 3
    g_thresh: float = 0.6
    e_thresh: float = 1.0
    herd_window: int = 8
    herd_min: int = 8
    reputation_window: int = 5
    window: int = 10  # detection bound for modes without a tighter one
    theta: float = 0.6
    anti_correlation: float = 0.5
    exploration: float = 0.25
    market: MarketConfig = MarketConfig()
    enabled: frozenset = frozenset(DETECTORS)

    def __post_init__(self):
        if self.heartbeat_interval < 1 or self.miss_threshold < 1:
            raise InvalidArgument("heartbeat interval and miss threshold must be >= 1")
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(DETECTORS)
        if unknown:
            raise InvalidArgument(f"unknown detectors {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "DetectorConfig":
        d = dict(d or {})
        market = MarketConfig(**d.pop("market", {}))
        enabled = frozenset(d.pop("enabled", DETECTORS))
        return cls(market=market, enabled=enabled, **d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("market", "enabled")}
        out["market"] = dict(vars(self.market))
        out["enabled"] = sorted(self.enabled)
        return out


@dataclass(frozen=True)
class Alarm:
    detector: str
    step: int
    evidence: tuple[int, ...]
    target: str

    def __post_init__(self):
        if not self.evidence:
            raise InvalidArgument("alarm without evidence")

    def to_dict(self) -> dict:
        return {"detector": self.detector, "step": self.step,
                "evidence": list(self.evidence), "target": self.target}


@dataclass
class SimReport:
    seed: int
    steps_run: int
    completed: int
    failed: int
    revoked: int
    pending: int
    hitl: int
    reassigned: int
    alarms: list[Alarm]
    latency: dict[str, int | None]
    market: list[dict]
    max_depth: dict[str, int]
    trace_ref: str
    tasks: dict[str, str] = field(default_factory=dict)
    sink: TraceSink | None = field(default=None, repr=False, compare=False)

    def alarm_kinds(self) -> set[str]:
        return {a.detector for a in self.alarms}

    def to_dict(self) -> dict:
        return {"seed": self.seed, "steps_run": self.steps_run, "completed": self.completed,
                "failed": self.failed, "revoked": self.revoked, "pending": self.pending,
                "hitl": self.hitl, "reassigned": self.reassigned,
                "alarms": [a.to_dict() for a in self.alarms], "latency": dict(self.latency),
                "market": list(self.market), "max_depth": dict(self.max_depth),
                "trace_ref": self.trace_ref, "tasks": dict(self.tasks)}

    def to_text(self) -> str:
        lines = [f"simulation {self.trace_ref}  seed={self.seed}  steps={self.steps_run}",
                 f"  done={self.completed} failed={self.failed} revoked={self.revoked} "
                 f"pending={self.pending} hitl={self.hitl} reassigned={self.reassigned}"]
        for mode, lat in sorted(self.latency.items()):
            lines.append(f"  injection {mode:<24} latency={'none' if lat is None else lat}")
        for a in self.alarms:
            lines.append(f"  alarm step {a.step:>3} {a.detector:<22} {a.target}")
        if self.max_depth:
            depth = ", ".join(f"{k}={v}" for k, v in sorted(self.max_depth.items()))
            lines.append(f"  max queue depth: {depth}")
        return "\n".join(lines) + "\n"


@dataclass
class _Node:
    spec: AgentNode
    queue: deque = field(default_factory=deque)
    current: str | None = None
    remaining: int = 0
    reputation: float = 0.0

    @property
    def id(self) -> str:
        return self.spec.id


class _Sim:
    def __init__(self, topology: Topology, workload: Sequence[Task], injections, seed: int,
                 t_max: int, detectors: DetectorConfig, mitigations, classifiers, key: str,
                 run_id: str, planner_version: str, operator: str, meta):
        self.topo = topology
        self.kind = topology.kind
        self.cfg = detectors
        self.mitigate = frozenset(mitigations)
        self.rng = random.Random(seed)
        self.seed = seed
        self.t_max = t_max
        self.key = key
        self.t = 0
        self.sink = TraceSink(run_id)
        self.planner_version = planner_version
        self.operator = operator
        self.nodes = {nid: _Node(n) for nid, n in sorted(topology.nodes.items())}
        self.root = topology.root if topology.root is not None else MARKET
        self.tasks: dict[str, Task] = {}
        for t in workload:
            task = Task.from_dict(t.to_dict())
            task.status = "Pending"
            task.owner = t.owner
            if task.id in self.tasks:
                raise InvalidArgument(f"duplicate task {task.id}")
            self.tasks[task.id] = task
        self.injections = list(injections)
        for inj in self.injections:
            inj.check(topology)
        self.classifiers = list(classifiers or [{"id": "c1"}])

        self.msg_seq = 0
        self.inbox: dict[int, list[AgentMessage]] = {}
        self.ack_inbox: dict[int, list[tuple[AgentMessage, str, str]]] = {}
        self.hb_last = {nid: 0 for nid in self.nodes if nid != topology.root}
        self.hb_seq: dict[str, int] = {}
        self.pending: deque = deque()  # coordinator queue of task ids
        self.assigned_to: dict[str, str] = {}  # task -> node (planned owner in hierarchies)
        self.sent_seq: dict[str, int] = {}  # task -> seq of last assignment/forward
        self.chains: dict[str, tuple[IntentHop, ...]] = {}
        self.chain_seq: dict[str, int] = {}
        self.hitl: set[str] = set()
        self.excluded: set[str] = set()
        self.reassigned = 0
        self.reroutes: Counter = Counter()
        self.reroute_seqs: dict[str, list[int]] = {}
        self.nacks: list[tuple[int, str, int]] = []  # (step, node, seq)
        self.handoffs: Counter = Counter()
        self.handoff_seqs: dict[str, list[int]] = {}
        self.max_depth: dict[str, int] = {}
        self.alarms: list[Alarm] = []
        self._alarm_keys: set[tuple[str, str]] = set()
        self.new_alarms: list[Alarm] = []
        self.awards: deque = deque(maxlen=detectors.herd_window)
        self.selections: deque = deque(maxlen=detectors.herd_window)
        self.round_seqs: deque = deque(maxlen=detectors.herd_window)
        self.market_history: list[MarketOutcome] = []
        self.stakes = {nid: float(n.spec.stake) for nid, n in self.nodes.items()
                       if n.spec.stake is not None}
        self.rep_events: deque = deque()  # (step, agent, seq, earned)
        self.done_by: list[tuple[int, str]] = []
        self.flagged: set[str] = set()
        self.meta = dict(meta or {})
        self.market_outcomes: list[dict] = []

    # ------------------------------------------------------------ helpers

    def active(self, mode: str) -> FailureInjection | None:
        for inj in self.injections:
            if inj.mode == mode and self.t >= inj.onset:
                return inj
        return None

    def targeted(self, mode: str, nid: str) -> FailureInjection | None:
        inj = self.active(mode)
        return inj if inj is not None and nid in inj.targets else None

    def principal_of(self, nid: str) -> str:
        node = self.nodes.get(nid)
        return node.spec.principal if node else self.operator

    def emit(self, kind: str, payload: Mapping[str, Any], actor: str) -> int:
        prov = {"planner_id": f"sim/{self.kind}", "planner_version": self.planner_version,
                "principal": self.principal_of(actor),
                "budget": {"step": self.t, "t_max": self.t_max}}
        return self.sink.emit(kind, self.t, payload, prov)

    def send(self, sender: str, to: str, kind: str, task: str = "", evidence=(),
             constraints=None, chain=()) -> int:
        self.msg_seq += 1
        msg = AgentMessage(self.msg_seq, sender, to, kind, task, tuple(evidence),
                           dict(constraints or {}), tuple(chain), "Pending", self.t)
        seq = self.emit("MessageSent", msg.to_dict(), sender)
        self.inbox.setdefault(self.t + 1, []).append(msg)
        return seq

    def depth(self, nid: str) -> int:
        return sum(1 for tid, n in self.assigned_to.items()
                   if n == nid and self.tasks[tid].status == "Assigned")

    def note_depth(self, nid: str) -> None:
        self.max_depth[nid] = max(self.max_depth.get(nid, 0), self.depth(nid))

    def raise_alarm(self, detector: str, target: str, evidence: Iterable[int]) -> None:
        if detector not in self.cfg.enabled or (detector, target) in self._alarm_keys:
            return
        ev = tuple(sorted(set(evidence))) or (0,)
        seq = self.emit("AlarmRaised", {"detector": detector, "target": target,
                                        "evidence": list(ev)}, self.root)
        alarm = Alarm(detector, self.t, ev, target)
        self._alarm_keys.add((detector, target))
        self.alarms.append(alarm)
        self.new_alarms.append(alarm)

    def set_status(self, tid: str, status: str) -> None:
        task = self.tasks[tid]
        if task.status != status:
            task.status = status
            self.handoffs.pop(tid, None)

    def live_workers(self, role: str) -> list[_Node]:
        return [n for n in self.nodes.values() if n.spec.role == role and n.id not in self.excluded]

    # ------------------------------------------------------------ delivery

    def deliver(self) -> None:
        for msg, verdict, reason in self.ack_inbox.pop(self.t, []):
            if verdict == "Nacked":
                self.on_nack(msg, reason)
        for msg in sorted(self.inbox.pop(self.t, []), key=lambda m: m.id):
            if msg.kind == "heartbeat":
                continue
            verdict, reason = self.receive(msg)
            seq = self.emit("MessageAcked", {"msg": msg.id, "from": msg.to, "to": msg.sender,
                                             "ack": verdict, "reason": reason}, msg.to)
            if verdict == "Nacked" and reason == "capability-mismatch":
                self.nacks.append((self.t, msg.to, seq))
            self.ack_inbox.setdefault(self.t + 1, []).append((msg, verdict, reason))

    def receive(self, msg: AgentMessage) -> tuple[str, str]:
        node = self.nodes.get(msg.to)
        task = self.tasks.get(msg.task)
        if msg.kind in ("assign", "forward"):
            if task is None or task.status in TERMINAL_TASK or self.assigned_to.get(task.id) is None:
                return "Nacked", "stale"
            if msg.to != self.assigned_to[task.id] and msg.kind == "assign":
                return "Nacked", "stale"
            if node.spec.role in ("Worker", "Solver") and not check_capability(task, node.spec).ok:
                return "Nacked", "capability-mismatch"
            if msg.intent_chain:
                self.chains[task.id] = msg.intent_chain
                self.chain_seq[task.id] = self.sent_seq.get(task.id, 0)
            node.queue.append(task.id)
            return "Acked", ""
        if msg.kind == "result":
            if task is not None and task.status == "Assigned" and self.assigned_to.get(task.id) == msg.sender:
                self.complete(task.id, msg.sender, msg)
            return "Acked", ""
        if msg.kind == "revoke":
            if node is not None and msg.task in node.queue:
                node.queue.remove(msg.task)
            if node is not None and node.current == msg.task:
                node.current, node.remaining = None, 0
            return "Acked", ""
        if msg.kind == "delegate":
            src, dep = msg.constraints["task"], msg.constraints["depends_on"]
            if "DelegationDeadlock" in self.mitigate:
                graph = {tid: list(t.deps) for tid, t in self.tasks.items()}
                graph.setdefault(src, []).append(dep)
                if detect_cycle(graph).has_cycle:
                    return "Nacked", "cycle"
            self.tasks[src].deps = tuple(self.tasks[src].deps) + (dep,)
            return "Acked", ""
        if msg.kind == "handoff":
            return "Acked", ""
        if msg.kind == "endorse":
            if "StrategicManipulation" in self.mitigate and msg.sender in self.flagged:
                return "Nacked", "flagged"
            node.reputation += 1
            self.rep_events.append((self.t, node.id, len(self.sink), False))
            return "Acked", ""
        return "Acked", ""

    def on_nack(self, msg: AgentMessage, reason: str) -> None:
        task = self.tasks.get(msg.task)
        if msg.kind not in ("assign", "forward") or task is None or reason == "stale":
            return
        if task.status != "Assigned" or self.assigned_to.get(task.id) != self._leaf_of(msg):
            return
        self.assigned_to.pop(task.id, None)
        self.set_status(task.id, "Pending")
        if self.kind == "RouterSolver":
            # bounced tasks are re-routed before new arrivals
            self.reroutes[task.id] += 1
            self.reroute_seqs.setdefault(task.id, []).append(self.sent_seq.get(task.id, 0))
            if self.reroutes[task.id] >= self.cfg.r_max:
                self.raise_alarm("rerouting-cycle", task.id, self.reroute_seqs[task.id])
            self.pending.appendleft(task.id)
        else:
            self.pending.append(task.id)

    def _leaf_of(self, msg: AgentMessage) -> str:
        # forwards travel through managers; the NACK that matters comes from the leaf
        return msg.constraints.get("leaf", msg.to)

    def complete(self, tid: str, by: str, msg: AgentMessage) -> None:
        task = self.tasks[tid]
        if self.kind == "Hierarchical" and "CommandDistortion" in self.mitigate:
            chain = msg.intent_chain or self.chains.get(tid, ())
            if chain and not verify_intent_chain(chain, self.goal_digest(task), self.key).ok:
                # misaligned work is not accepted; re-issue on a clean path
                self.assigned_to.pop(tid, None)
                self.set_status(tid, "Pending")
                self.reassigned += 1
                self.pending.append(tid)
                return
        self.set_status(tid, "Done")
        self.done_by.append((self.t, by))
        if by in self.nodes:
            self.nodes[by].reputation += 1
            self.rep_events.append((self.t, by, len(self.sink), True))

    # ------------------------------------------------------------ arrivals and injections

    def arrivals(self) -> None:
        for tid, task in sorted(self.tasks.items()):
            if task.arrival == self.t and task.status == "Pending":
                self.pending.append(tid)

    def start_injections(self) -> None:
        for inj in self.injections:
            if inj.onset != self.t or inj.mode != "DelegationDeadlock":
                continue
            cycle = list(inj.params.get("cycle", ()))
            for i, tid in enumerate(cycle):
                dep = cycle[(i + 1) % len(cycle)]
                src_owner = self.tasks[tid].owner or inj.targets[0]
                dst_owner = self.tasks[dep].owner or inj.targets[-1]
                self.send(src_owner, dst_owner, "delegate", tid,
                          constraints={"task": tid, "depends_on": dep})

    # ------------------------------------------------------------ coordinators

    def coordinate(self) -> None:
        getattr(self, f"_coord_{self.kind}")()

    def _next_pending(self) -> str | None:
        while self.pending:
            tid = self.pending.popleft()
            if self.tasks[tid].status == "Pending" and tid not in self.hitl:
                return tid
        return None

    def _assign(self, tid: str, nid: str, sender: str, kind: str = "assign", chain=()) -> None:
        self.assigned_to[tid] = nid
        self.set_status(tid, "Assigned")
        seq = self.send(sender, nid, kind, tid,
                        constraints={"required": sorted(self.tasks[tid].required),
                                     "depth": self.depth(nid)}, chain=chain)
        self.sent_seq[tid] = seq
        self.note_depth(nid)

    def _coord_OrchestratorWorker(self) -> None:
        tid = self._next_pending()
        if tid is None:
            return
        task = self.tasks[tid]
        validate = "CapabilityMismatch" in self.mitigate
        candidates = []
        for w in self.live_workers("Worker"):
            caps = set(w.spec.capabilities)
            inj = self.targeted("CapabilityMismatch", w.id)
            if inj is not None and not validate:
                caps |= set(inj.params.get("claims", task.required))
            if validate:
                if not check_capability(task, w.spec).ok:
                    continue
            elif not set(task.required) <= caps:
                continue
            candidates.append(w)
        if not candidates:
            self.pending.append(tid)
            return
        inj = self.active("CapabilityMismatch")
        if inj is not None and not validate:
            # the advertised-capability target looks like the best fit
            lured = [w for w in candidates if w.id in inj.targets]
            if lured:
                candidates = lured
        best = min(candidates, key=lambda w: (self.depth(w.id), w.id))
        self._assign(tid, best.id, self.root)

    def _votes(self, task: Task) -> list:
        inj = self.active("Misrouting")
        flipped = set(inj.params.get("classifiers", ())) if inj else set()
        classes = sorted({c for n in self.topo.by_role("Solver") for c in n.capabilities})

        def make(cid):
            def vote(t: Task) -> str:
                if cid in flipped:
                    to = inj.params.get("to", "random")
                    return self.rng.choice(classes) if to == "random" else to
                return t.cls
            return vote
        return [make(c["id"]) for c in self.classifiers]

    def _coord_RouterSolver(self) -> None:
        tid = self._next_pending()
        if tid is None:
            return
        task = self.tasks[tid]
        votes = self._votes(task)
        if "Misrouting" in self.mitigate:
            verdict = route_task(task, votes, self.cfg.theta)
            if not isinstance(verdict, Route):
                self.hitl.add(tid)
                self.emit("Escalation", {"reason": "hitl-fallback", "task": tid,
                                         "confidence": verdict.confidence}, self.root)
                return
            cls = verdict.target
        else:
            cls = votes[0](task)
        solvers = [s for s in self.live_workers("Solver") if cls in s.spec.capabilities]
        solvers.sort(key=lambda s: (self.depth(s.id), s.id))
        inj = self.active("SolverOverloadCascade")
        if inj is not None:
            biased = [s for s in solvers if s.id in inj.targets]
            solvers = biased + [s for s in solvers if s.id not in inj.targets]
        if not solvers:
            self.reroutes[tid] += 1
            self.pending.append(tid)
            return
        if "SolverOverloadCascade" in self.mitigate:
            admitted = [s for s in solvers
                        if admit(_Depth(self.depth(s.id), s.spec.quota), task).ok]
            if not admitted:
                self.pending.appendleft(tid)  # backpressure: hold at the router
                return
            solvers = admitted
        self._assign(tid, solvers[0].id, self.root)

    def goal_digest(self, task: Task) -> str:
        return task.root_goal or digest_text(f"goal:{task.id}")

    def _leaf_for(self, task: Task) -> str | None:
        if task.owner and task.owner not in self.excluded:
            return task.owner
        leaves = [w for w in self.live_workers("Worker") if check_capability(task, w.spec).ok]
        if not leaves:
            return None
        return min(leaves, key=lambda w: (self.depth(w.id), w.id)).id

    def _next_hop(self, at: str, leaf: str) -> str:
        path = self.topo.path(at, leaf) or [at, leaf]
        for hop in path[1:]:
            if hop not in self.excluded or hop == leaf:
                return hop
        return leaf

    def _forward(self, tid: str, at: str, chain) -> None:
        task = self.tasks[tid]
        leaf = self.assigned_to[tid]
        gd = chain[-1].goal_digest if chain else self.goal_digest(task)
        if self.targeted("CommandDistortion", at):
            gd = digest_text(f"distorted:{at}:{gd}")
        chain = extend_chain(chain, at, gd, self.key)
        nxt = self._next_hop(at, leaf)
        seq = self.send(at, nxt, "forward", tid, constraints={"required": sorted(task.required),
                                                                "leaf": leaf}, chain=chain)
        self.sent_seq[tid] = seq
        self.chains[tid] = chain
        self.chain_seq[tid] = seq

    def _coord_Hierarchical(self) -> None:
        tid = self._next_pending()
        if tid is None:
            return
        leaf = self._leaf_for(self.tasks[tid])
        if leaf is None:
            self.pending.append(tid)
            return
        self.assigned_to[tid] = leaf
        self.set_status(tid, "Assigned")
        self._forward(tid, self.root, ())
        self.note_depth(leaf)

    def _coord_Swarm(self) -> None:
        tid = self._next_pending()
        if tid is None:
            return
        task = self.tasks[tid]
        herd = self.active("Herding")
        sybil = self.active("StrategicManipulation")
        leader = herd.params.get("leader") if herd else None
        noise = float(self.meta.get("bid_noise", 0.0))
        bids, seqs = [], []
        for nid, node in self.nodes.items():
            script = node.spec.script
            score = float(script.get("skill", 1.0)) / (1 + self.depth(nid))
            if noise:
                score += noise * self.rng.random()
            option = str(script.get("option", nid))
            fingerprint = str(script.get("fingerprint", nid))
            retract = False
            if herd is not None and nid in herd.targets and nid != leader:
                explore = ("Herding" in self.mitigate
                           and self.rng.random() < self.cfg.exploration)
                if not explore:
                    option = str(self.nodes[leader].spec.script.get("option", leader))
                    score *= float(herd.params.get("deference", 0.1))
            if sybil is not None and nid in sybil.targets:
                score = float(sybil.params.get("bid", 0.99))
                fingerprint = str(sybil.params.get("fingerprint", "ring"))
                retract = bool(sybil.params.get("retract", False))
            bids.append(Bid(nid, score, fingerprint, option, retract))
            seqs.append(self.emit("MessageSent", {"msg": None, "from": nid, "to": MARKET,
                                                  "type": "bid", "fields": {
                                                      "task": tid, "evidence": [],
                                                      "constraints": {"score": round(score, 12),
                                                                      "option": option,
                                                                      "fingerprint": fingerprint}},
                                                  "intent_chain": [], "ack": "Acked",
                                                  "sent": self.t}, nid))
        cfg = self.cfg.market
        if "Herding" in self.mitigate:
            cfg = replace(cfg, anti_correlation=self.cfg.anti_correlation)
        excluded = set(self.excluded)
        if "StrategicManipulation" in self.mitigate:
            excluded |= self.flagged
        outcome = market_round(tid, bids, self.stakes, self.market_history, cfg, excluded)
        self.market_history.append(outcome)
        self.stakes = dict(outcome.stakes)
        self.selections.append([b.option for b in bids])
        self.round_seqs.append(seqs)
        for kind, agents in outcome.alarms:
            if kind == "sybil-collusion":
                self.flagged.update(agents)
            self.raise_alarm(kind, ",".join(agents), seqs)
        if outcome.winner is None:
            self.pending.append(tid)
            return
        self.awards.append(outcome.winner)
        self._assign(tid, outcome.winner, MARKET)
        self.market_outcomes.append(outcome.to_dict())

    # ------------------------------------------------------------ node work

    def work(self) -> None:
        for nid, node in self.nodes.items():
            if nid == self.topo.root:
                continue
            if node.spec.role == "Manager":
                self._manager_step(node)
            else:
                self._worker_step(node)
            if self.kind == "Swarm" and self.targeted("StrategicManipulation", nid):
                inj = self.active("StrategicManipulation")
                if inj.params.get("endorse", True):
                    ring = list(inj.targets)
                    peer = ring[(ring.index(nid) + 1) % len(ring)]
                    self.send(nid, peer, "endorse", "")

    def _manager_step(self, node: _Node) -> None:
        while node.queue:
            tid = node.queue.popleft()
            if self.tasks[tid].status == "Assigned" and self.assigned_to.get(tid):
                self._forward(tid, node.id, self.chains.get(tid, ()))
                return

    def _runnable(self, tid: str) -> bool:
        return all(self.tasks[d].status == "Done" for d in self.tasks[tid].deps if d in self.tasks)

    def _worker_step(self, node: _Node) -> None:
        if self.targeted("SilentWorkerFailure", node.id):
            return
        if node.current is None:
            # drop stale entries, then take the first task whose deps are done
            node.queue = deque(t for t in node.queue
                               if self.tasks[t].status == "Assigned" and self.assigned_to.get(t) == node.id)
            ready = [t for t in node.queue if self._runnable(t)]
            if not ready:
                if node.queue:
                    self._handoff(node, node.queue[0])
                return
            node.queue.remove(ready[0])
            node.current, node.remaining = ready[0], self.tasks[ready[0]].duration
        node.remaining -= 1
        if node.remaining <= 0:
            tid, node.current = node.current, None
            to = self.root if self.topo.root is not None else MARKET
            self.send(node.id, to, "result", tid, evidence=(self.sent_seq.get(tid, 0),),
                      chain=self.chains.get(tid, ()))

    def _handoff(self, node: _Node, tid: str) -> None:
        blocking = [d for d in self.tasks[tid].deps if d in self.tasks and self.tasks[d].status != "Done"]
        dep = blocking[0]
        to = self.assigned_to.get(dep) or self.tasks[dep].owner or self.root
        seq = self.send(node.id, to, "handoff", tid, constraints={"waiting_on": dep})
        self.handoffs[tid] += 1
        self.handoff_seqs.setdefault(tid, []).append(seq)
        if self.handoffs[tid] >= self.cfg.h_max:
            self.raise_alarm("deadlock", tid, self.handoff_seqs[tid][-self.cfg.h_max:])

    def heartbeats(self) -> None:
        if self.t % self.cfg.heartbeat_interval:
            return
        to = self.topo.root if self.topo.root is not None else MARKET
        for nid in self.nodes:
            if nid == self.topo.root or self.targeted("SilentWorkerFailure", nid):
                continue
            seq = self.emit("HeartbeatSent", {"from": nid, "to": to, "sent": self.t}, nid)
            self.inbox.setdefault(self.t + 1, []).append(
                AgentMessage(0, nid, to, "heartbeat", sent=self.t))
            self.hb_seq[nid] = seq

    # ------------------------------------------------------------ detectors

    def detect(self) -> None:
        cfg = self.cfg
        for nid, last in sorted(self.hb_last.items()):
            i = cfg.heartbeat_interval
            missed = (self.t - 1) // i - last // i
            if missed >= cfg.miss_threshold:
                self.raise_alarm("missing-heartbeat", nid, (self.hb_seq.get(nid, 0),))
        recent = [(node, seq) for step, node, seq in self.nacks if step > self.t - cfg.rejection_window]
        for nid in sorted({n for n, _ in recent}):
            seqs = [s for n, s in recent if n == nid]
            if len(seqs) >= cfg.rejection_threshold:
                self.raise_alarm("rejection-spike", nid, seqs)
        for nid, node in self.nodes.items():
            if node.spec.role in ("Worker", "Solver"):
                d = self.depth(nid)
                if d >= cfg.alert_fraction * node.spec.quota:
                    seqs = [self.sent_seq[t] for t, n in self.assigned_to.items()
                            if n == nid and self.tasks[t].status == "Assigned"]
                    self.raise_alarm("queue-depth", nid, seqs)
        if self.kind == "Hierarchical" and self.t % cfg.alignment_period == 0:
            for tid in sorted(self.chains):
                task = self.tasks[tid]
                if task.status != "Assigned" or not self.chains[tid]:
                    continue
                verdict = verify_intent_chain(self.chains[tid], self.goal_digest(task), self.key)
                if isinstance(verdict, DistortedAt):
                    culprit = self.chains[tid][verdict.hop - 1].agent
                    self.raise_alarm("intent-divergence", culprit, (self.chain_seq.get(tid, 0),))
        if self.kind == "Swarm":
            self._detect_market()

    def _detect_market(self) -> None:
        cfg = self.cfg
        if len(self.awards) >= cfg.herd_min:
            counts = Counter(self.awards)
            alloc = [counts.get(n, 0) for n in self.nodes]
            ev = [s for seqs in self.round_seqs for s in seqs[:1]]
            if gini(alloc) > cfg.g_thresh:
                self.raise_alarm("gini-breach", MARKET, ev)
            opts = Counter(o for sel in self.selections for o in sel)
            total = sum(opts.values())
            if entropy_bits([c / total for _, c in sorted(opts.items())]) < cfg.e_thresh:
                self.raise_alarm("solution-collapse", MARKET, ev)
        while self.rep_events and self.rep_events[0][0] <= self.t - cfg.reputation_window:
            self.rep_events.popleft()
        gained = Counter(a for _, a, _, _ in self.rep_events)
        earned = Counter(a for _, a, _, e in self.rep_events if e)
        for a in sorted(gained):
            if gained[a] > earned[a]:
                seqs = [s for _, b, s, e in self.rep_events if b == a and not e]
                self.raise_alarm("reputation-inflation", a, seqs)

    # ------------------------------------------------------------ mitigations

    def mitigate_alarms(self) -> None:
        alarms, self.new_alarms = self.new_alarms, []
        for a in alarms:
            if a.detector == "missing-heartbeat" and "SilentWorkerFailure" in self.mitigate:
                self._evict(a.target)
            elif a.detector == "intent-divergence" and "CommandDistortion" in self.mitigate:
                if self.nodes.get(a.target) and a.target != self.topo.root:
                    self.excluded.add(a.target)

    def _evict(self, nid: str) -> None:
        self.excluded.add(nid)
        for tid, owner in sorted(self.assigned_to.items()):
            if owner == nid and self.tasks[tid].status == "Assigned":
                self.send(self.root, nid, "revoke", tid, constraints={"reason": "missing-heartbeat"})
                self.assigned_to.pop(tid)
                self.set_status(tid, "Pending")
                self.reassigned += 1
                self.pending.append(tid)

    def revoke_overdue(self) -> None:
        for tid, task in sorted(self.tasks.items()):
            if task.status in TERMINAL_TASK or task.deadline is None or self.t <= task.deadline:
                continue
            owner = self.assigned_to.get(tid)
            if owner is not None:
                self.send(self.root, owner, "revoke", tid, constraints={"reason": "timeout"})
            self.set_status(tid, "Revoked")
            self.hitl.discard(tid)

    # ------------------------------------------------------------ main loop

    def finished(self) -> bool:
        return all(t.status in TERMINAL_TASK or tid in self.hitl for tid, t in self.tasks.items())

    def run(self) -> SimReport:
        self.emit("RunStarted", {"topology": self.kind, "root": self.topo.root,
                                 "nodes": sorted(self.nodes), "tasks": sorted(self.tasks),
                                 "seed": self.seed, "t_max": self.t_max,
                                 "injections": [i.to_dict() for i in self.injections],
                                 "mitigations": sorted(self.mitigate), **self.meta}, self.root)
        while self.t < self.t_max:
            self.t += 1
            self._deliver_heartbeats()
            self.deliver()
            self.arrivals()
            self.start_injections()
            self.coordinate()
            self.work()
            self.heartbeats()
            self.detect()
            self.mitigate_alarms()
            self.revoke_overdue()
            if self.finished():
                break
        return self.report()

    def _deliver_heartbeats(self) -> None:
        for msg in self.inbox.get(self.t, []):
            if msg.kind == "heartbeat" and msg.sender in self.hb_last:
                self.hb_last[msg.sender] = max(self.hb_last[msg.sender], msg.sent)

    def report(self) -> SimReport:
        status = Counter(t.status for t in self.tasks.values())
        latency: dict[str, int | None] = {}
        for inj in self.injections:
            hits = [a.step - inj.onset for a in self.alarms
                    if a.detector in MATCHING[inj.mode] and a.step >= inj.onset]
            latency[inj.mode] = min(hits) if hits else None
        summary = {"status": "Completed" if self.finished() else "StepLimit",
                   "steps_run": self.t, "done": status["Done"], "failed": status["Failed"],
                   "revoked": status["Revoked"], "hitl": len(self.hitl),
                   "alarms": [a.to_dict() for a in self.alarms], "latency": latency}
        self.emit("RunTerminated", summary, self.root)
        pending = sum(1 for tid, t in self.tasks.items()
                      if t.status not in TERMINAL_TASK and tid not in self.hitl)
        return SimReport(seed=self.seed, steps_run=self.t, completed=status["Done"],
                         failed=status["Failed"], revoked=status["Revoked"], pending=pending,
                         hitl=len(self.hitl), reassigned=self.reassigned, alarms=list(self.alarms),
                         latency=latency, market=self.market_outcomes, max_depth=dict(self.max_depth),
                         trace_ref=self.sink.run_id,
                         tasks={tid: t.status for tid, t in sorted(self.tasks.items())},
                         sink=self.sink)


@dataclass(frozen=True)
class _Depth:
    depth: int
    quota: int


def simulate(topology: Topology, workload: Sequence[Task], injections: Sequence[FailureInjection] = (),
             seed: int = 0, t_max: int = 50, *, detectors: DetectorConfig | None = None,
             mitigations: Iterable[str] = (), classifiers: Sequence[Mapping[str, Any]] | None = None,
             key: str = "intent-key", run_id: str = "sim", planner_version: str = "1",
             operator: str = "sim-operator", meta: Mapping[str, Any] | None = None) -> SimReport:
    """Run one simulation to ``t_max`` or until every task is terminal.

    ``mitigations`` names the failure modes whose countermeasure is active.
    The returned report carries the trace sink in ``report.sink``.
    """
    if t_max < 1:
        raise InvalidArgument("t_max must be >= 1")
    unknown = set(mitigations) - set(MODES)
    if unknown:
        raise InvalidArgument(f"unknown mitigation modes {sorted(unknown)}")
    sim = _Sim(topology, workload, injections, seed, t_max, detectors or DetectorConfig(),
               mitigations, classifiers, key, run_id, planner_version, operator, meta)
    return sim.run()
