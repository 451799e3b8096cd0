"""Multi-agent structure: nodes, topologies, tasks, and cycle detection."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from ..errors import CycleDetected, InvalidArgument, MissingStake, UnknownNode

ROLES = ("Orchestrator", "Manager", "Worker", "Router", "Solver", "SwarmAgent")
KINDS = ("OrchestratorWorker", "RouterSolver", "Hierarchical", "Swarm")
TASK_STATUSES = ("Pending", "Assigned", "Done", "Revoked", "Failed")
TERMINAL_TASK = frozenset({"Done", "Revoked", "Failed"})


@dataclass(frozen=True)
class AgentNode:
    """Static description of one agent.

    Runtime queues live in the simulator; ``quota`` is the max queue depth the
    node accepts when admission control is on. ``script`` holds scripted
    behaviour parameters (bid skill, preferred option, solver rank, ...).
    """

    id: str
    role: str
    capabilities: frozenset = frozenset()
    privilege_level: int = 0
    principal: str = ""
    stake: float | None = None
    script: Mapping[str, Any] = field(default_factory=dict)
    quota: int = 5

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("node id empty")
        if self.role not in ROLES:
            raise InvalidArgument(f"{self.id}: unknown role {self.role!r}")
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        object.__setattr__(self, "script", MappingProxyType(dict(self.script)))
        if self.role in ("Worker", "Solver") and not self.capabilities:
            raise InvalidArgument(f"{self.id}: {self.role} needs capabilities")
        if self.stake is not None and self.stake < 0:
            raise InvalidArgument(f"{self.id}: negative stake")
        if self.quota < 1:
            raise InvalidArgument(f"{self.id}: quota must be >= 1")
        if not self.principal:
            object.__setattr__(self, "principal", self.id)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgentNode":
        return cls(id=d["id"], role=d["role"], capabilities=frozenset(d.get("capabilities", ())),
                   privilege_level=int(d.get("privilege_level", 0)),
                   principal=d.get("principal", ""), stake=d.get("stake"),
                   script=dict(d.get("script", {})), quota=int(d.get("quota", 5)))

    def to_dict(self) -> dict:
        return {"id": self.id, "role": self.role, "capabilities": sorted(self.capabilities),
                "privilege_level": self.privilege_level, "principal": self.principal,
                "stake": self.stake, "script": dict(self.script), "quota": self.quota}


@dataclass(frozen=True)
class Topology:
    kind: str
    nodes: Mapping[str, AgentNode]
    edges: tuple[tuple[str, str], ...] = ()
    root: str | None = None

    def children(self, nid: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == nid)

    def parent(self, nid: str) -> str | None:
        for a, b in self.edges:
            if b == nid:
                return a
        return None

    def by_role(self, *roles: str) -> list[AgentNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.role in roles]

    def path(self, src: str, dst: str) -> list[str] | None:
        """Delegation path from ``src`` down to ``dst`` (inclusive), BFS order."""
        frontier = [[src]]
        seen = {src}
        while frontier:
            nxt = []
            for p in frontier:
                if p[-1] == dst:
                    return p
                for c in self.children(p[-1]):
                    if c not in seen:
                        seen.add(c)
                        nxt.append(p + [c])
            frontier = nxt
        return None


@dataclass(frozen=True)
class Acyclic:
    @property
    def has_cycle(self) -> bool:
        return False


@dataclass(frozen=True)
class Cycle:
    nodes: tuple[str, ...]

    @property
    def has_cycle(self) -> bool:
        return True


def _adjacency(graph) -> dict[str, list[str]]:
    adj: dict[str, set] = {}
    if isinstance(graph, Mapping):
        for a, succ in graph.items():
            adj.setdefault(a, set()).update(succ)
            for b in succ:
                adj.setdefault(b, set())
    else:
        for a, b in graph:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set())
    return {k: sorted(v) for k, v in adj.items()}


def detect_cycle(graph) -> Acyclic | Cycle:
    """Iterative three-colour DFS; returns a witness cycle if there is one.

    ``graph`` is either a mapping node -> successors or an iterable of edges.
    Traversal order is sorted, so the witness is deterministic.
    """
    adj = _adjacency(graph)
    WHITE, GREY, BLACK = 0, 1, 2
    colour = dict.fromkeys(adj, WHITE)
    for start in sorted(adj):
        if colour[start] != WHITE:
            continue
        path = [start]
        iters = [iter(adj[start])]
        colour[start] = GREY
        while path:
            nxt = next(iters[-1], None)
            if nxt is None:
                colour[path.pop()] = BLACK
                iters.pop()
            elif colour[nxt] == GREY:
                return Cycle(tuple(path[path.index(nxt):]))
            elif colour[nxt] == WHITE:
                colour[nxt] = GREY
                path.append(nxt)
                iters.append(iter(adj[nxt]))
    return Acyclic()


def build_topology(config: Mapping[str, Any]) -> Topology:
    kind = config.get("kind")
    if kind not in KINDS:
        raise InvalidArgument(f"unknown topology kind {kind!r}")
    nodes: dict[str, AgentNode] = {}
    for nd in config.get("nodes", ()):
        node = nd if isinstance(nd, AgentNode) else AgentNode.from_dict(nd)
        if node.id in nodes:
            raise InvalidArgument(f"duplicate node {node.id}")
        nodes[node.id] = node
    edges = tuple((a, b) for a, b in config.get("edges", ()))
    for a, b in edges:
        for n in (a, b):
            if n not in nodes:
                raise UnknownNode(f"edge {a}->{b} names unknown node {n}", node=n)
    root = config.get("root")
    if kind in ("Hierarchical", "OrchestratorWorker"):
        verdict = detect_cycle({n: [b for a, b in edges if a == n] for n in nodes})
        if verdict.has_cycle:
            raise CycleDetected(list(verdict.nodes))
        roots = [n for n in nodes if not any(b == n for _, b in edges)]
        if root is None:
            if len(roots) != 1:
                raise InvalidArgument(f"{kind} needs exactly one root, found {sorted(roots)}")
            root = roots[0]
        elif root not in nodes:
            raise UnknownNode(f"root {root} not a node", node=root)
    elif kind == "RouterSolver":
        if root is None:
            routers = [n.id for n in nodes.values() if n.role == "Router"]
            if len(routers) != 1:
                raise InvalidArgument("RouterSolver needs exactly one Router")
            root = routers[0]
    if kind == "Swarm":
        for n in nodes.values():
            if n.stake is None:
                raise MissingStake(f"swarm agent {n.id} has no stake", node=n.id)
    return Topology(kind=kind, nodes=MappingProxyType(nodes), edges=edges, root=root)


@dataclass
class Task:
    id: str
    required: frozenset = frozenset()
    root_goal: str = ""
    deps: tuple[str, ...] = ()
    deadline: int | None = None
    status: str = "Pending"
    created: int = 0
    arrival: int = 1
    duration: int = 1
    klass: str | None = None
    owner: str | None = None

    def __post_init__(self):
        self.required = frozenset(self.required)
        self.deps = tuple(self.deps)
        if self.deadline is not None and self.deadline < self.created:
            raise InvalidArgument(f"task {self.id}: deadline before creation")
        if self.duration < 1:
            raise InvalidArgument(f"task {self.id}: duration must be >= 1")

    @property
    def cls(self) -> str:
        if self.klass:
            return self.klass
        return sorted(self.required)[0] if self.required else ""

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Task":
        return cls(id=d["id"], required=frozenset(d.get("required", ())),
                   root_goal=d.get("root_goal", ""), deps=tuple(d.get("deps", ())),
                   deadline=d.get("deadline"), created=int(d.get("created", 0)),
                   arrival=int(d.get("arrival", 1)), duration=int(d.get("duration", 1)),
                   klass=d.get("class"), owner=d.get("owner"))

    def to_dict(self) -> dict:
        return {"id": self.id, "required": sorted(self.required), "root_goal": self.root_goal,
                "deps": list(self.deps), "deadline": self.deadline, "status": self.status,
                "created": self.created, "arrival": self.arrival, "duration": self.duration,
                "class": self.klass, "owner": self.owner}


def check_dag(tasks: Iterable[Task]) -> Acyclic | Cycle:
    return detect_cycle({t.id: list(t.deps) for t in tasks})
