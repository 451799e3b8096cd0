"""Typed, versioned tool registry with schema validation and stubbed execution.

Tools have no real connectors. Each one is backed by a deterministic
in-process stub (``StubBehavior``) that declares its latency, its output and,
for side-effecting tools, a committed-effect counter. That is enough to
exercise validation, idempotency, sandboxing and cost accounting end to end.
"""

from __future__ import annotations

import copy
import math
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping

from ._canon import canonical_json, digest
from .errors import DuplicateVersion, InvalidSpec, NotFound, ValidationError

FIELD_TYPES = ("int", "real", "text", "bool", "enum")
RISK_TIERS = ("Low", "High")
MODES = ("Commit", "Simulate")
STUB_KINDS = ("echo", "counter", "lookup", "fail", "flaky")


def parse_version(text: str) -> tuple[int, int, int]:
    parts = str(text).split(".")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise InvalidSpec(f"bad semantic version {text!r}")
    return int(parts[0]), int(parts[1]), int(parts[2])


@dataclass(frozen=True)
class VersionReq:
    """Either an exact ``1.2.0`` or a compatible-major ``1.x`` (also ``^1``)."""

    major: int
    exact: tuple[int, int, int] | None = None

    @classmethod
    def parse(cls, text: str) -> "VersionReq":
        text = str(text).strip()
        if text.startswith("^"):
            text = text[1:] + ".x"
        if text.endswith(".x"):
            head = text[:-2].split(".")[0]
            if not head.isdigit():
                raise InvalidSpec(f"bad version requirement {text!r}")
            return cls(major=int(head))
        v = parse_version(text)
        return cls(major=v[0], exact=v)

    def matches(self, version: tuple[int, int, int]) -> bool:
        if self.exact is not None:
            return version == self.exact
        return version[0] == self.major

    def __str__(self) -> str:
        if self.exact is not None:
            return ".".join(map(str, self.exact))
        return f"{self.major}.x"


@dataclass(frozen=True)
class FieldSpec:
    type: str
    required: bool = True
    min: float | None = None
    max: float | None = None
    values: tuple = ()

    def __post_init__(self):
        if self.type not in FIELD_TYPES:
            raise InvalidSpec(f"unknown field type {self.type!r}")
        if self.type == "enum" and not self.values:
            raise InvalidSpec("enum field needs values")
        if self.min is not None and self.max is not None and self.min > self.max:
            raise InvalidSpec("min > max")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FieldSpec":
        return cls(
            type=d["type"],
            required=bool(d.get("required", True)),
            min=d.get("min"),
            max=d.get("max"),
            values=tuple(d.get("values", ())),
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.type, "required": self.required}
        if self.min is not None:
            out["min"] = self.min
        if self.max is not None:
            out["max"] = self.max
        if self.values:
            out["values"] = list(self.values)
        return out

    def type_ok(self, value: Any) -> bool:
        if self.type == "int":
            return isinstance(value, int) and not isinstance(value, bool)
        if self.type == "real":
            return (isinstance(value, (int, float)) and not isinstance(value, bool)
                    and math.isfinite(value))
        if self.type == "text":
            return isinstance(value, str)
        if self.type == "bool":
            return isinstance(value, bool)
        return value in self.values

    def range_ok(self, value: Any) -> bool:
        if self.type not in ("int", "real"):
            return True
        if self.min is not None and value < self.min:
            return False
        if self.max is not None and value > self.max:
            return False
        return True


_OPS = {
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    "<": lambda a, b: a < b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "in": lambda a, b: a in b,
    "nonempty": lambda a, b: a is not None and len(a) > 0,
}


@dataclass(frozen=True)
class Precondition:
    """Predicate over one input field, e.g. ``Precondition("n", ">=", 0)``."""

    field: str
    op: str
    value: Any = None

    def __post_init__(self):
        if self.op not in _OPS:
            raise InvalidSpec(f"unknown precondition operator {self.op!r}")

    def holds(self, args: Mapping[str, Any]) -> bool:
        if self.field not in args:
            # optional field left out: nothing to check
            return True
        try:
            return bool(_OPS[self.op](args[self.field], self.value))
        except TypeError:
            return False

    def __str__(self) -> str:
        if self.op == "nonempty":
            return f"{self.field} nonempty"
        return f"{self.field} {self.op} {self.value!r}"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Precondition":
        value = d.get("value")
        if isinstance(value, list):
            value = tuple(value)
        return cls(field=d["field"], op=d["op"], value=value)

    def to_dict(self) -> dict:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"field": self.field, "op": self.op, "value": value}


@dataclass(frozen=True)
class StubBehavior:
    """Deterministic stand-in for a real connector.

    kinds:
      echo     output = the input args (restricted to output_schema fields)
      counter  side effect adds ``args[amount_field]`` (default 1) to a counter;
               output ``{output_field: new value}``
      lookup   output ``{output_field: table[str(args[key_field])]}``
      fail     always a tool-error
      flaky    like echo, but the n-th committed invocation fails for n in fail_on
    """

    kind: str = "echo"
    latency: int = 1
    output_field: str = "value"
    amount_field: str | None = None
    key_field: str | None = None
    table: Mapping[str, Any] = field(default_factory=dict)
    fail_on: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in STUB_KINDS:
            raise InvalidSpec(f"unknown stub kind {self.kind!r}")
        if self.latency < 0:
            raise InvalidSpec("negative latency")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "StubBehavior":
        d = d or {}
        return cls(
            kind=d.get("kind", "echo"),
            latency=int(d.get("latency", 1)),
            output_field=d.get("output_field", "value"),
            amount_field=d.get("amount_field"),
            key_field=d.get("key_field"),
            table=dict(d.get("table", {})),
            fail_on=tuple(d.get("fail_on", ())),
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "latency": self.latency,
                               "output_field": self.output_field}
        if self.amount_field is not None:
            out["amount_field"] = self.amount_field
        if self.key_field is not None:
            out["key_field"] = self.key_field
        if self.table:
            out["table"] = dict(self.table)
        if self.fail_on:
            out["fail_on"] = list(self.fail_on)
        return out


@dataclass(frozen=True)
class ToolSpec:
    name: str
    version: str
    input_schema: Mapping[str, FieldSpec]
    output_schema: Mapping[str, FieldSpec]
    preconditions: tuple[Precondition, ...] = ()
    side_effecting: bool = False
    risk_tier: str = "Low"
    cost: float = 0.0
    idempotent: bool = False
    access_tags: tuple[str, ...] = ()
    stub: StubBehavior = field(default_factory=StubBehavior)

    def __post_init__(self):
        if not self.name:
            raise InvalidSpec("tool name empty")
        parse_version(self.version)
        if not self.input_schema:
            raise InvalidSpec(f"{self.name}: empty input_schema")
        if not self.output_schema:
            raise InvalidSpec(f"{self.name}: empty output_schema")
        if self.risk_tier not in RISK_TIERS:
            raise InvalidSpec(f"{self.name}: risk_tier must be Low or High")
        if not (isinstance(self.cost, (int, float)) and self.cost >= 0):
            raise InvalidSpec(f"{self.name}: cost must be >= 0")
        for pre in self.preconditions:
            if pre.field not in self.input_schema:
                raise InvalidSpec(f"{self.name}: precondition on unknown field {pre.field!r}")
        object.__setattr__(self, "input_schema", MappingProxyType(dict(self.input_schema)))
        object.__setattr__(self, "output_schema", MappingProxyType(dict(self.output_schema)))

    @property
    def version_tuple(self) -> tuple[int, int, int]:
        return parse_version(self.version)

    @property
    def tool_id(self) -> str:
        return f"{self.name}@{self.version}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "input_schema": {k: v.to_dict() for k, v in self.input_schema.items()},
            "output_schema": {k: v.to_dict() for k, v in self.output_schema.items()},
            "preconditions": [p.to_dict() for p in self.preconditions],
            "side_effecting": self.side_effecting,
            "risk_tier": self.risk_tier,
            "cost": self.cost,
            "idempotent": self.idempotent,
            "access_tags": list(self.access_tags),
            "stub": self.stub.to_dict(),
        }

    @property
    def digest(self) -> str:
        return digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ToolSpec":
        try:
            return cls(
                name=d["name"],
                version=d["version"],
                input_schema={k: FieldSpec.from_dict(v) for k, v in d.get("input_schema", {}).items()},
                output_schema={k: FieldSpec.from_dict(v) for k, v in d.get("output_schema", {}).items()},
                preconditions=tuple(Precondition.from_dict(p) for p in d.get("preconditions", ())),
                side_effecting=bool(d.get("side_effecting", False)),
                risk_tier=d.get("risk_tier", "Low"),
                cost=d.get("cost", 0.0),
                idempotent=bool(d.get("idempotent", False)),
                access_tags=tuple(d.get("access_tags", ())),
                stub=StubBehavior.from_dict(d.get("stub")),
            )
        except KeyError as e:
            raise InvalidSpec(f"tool spec missing {e.args[0]!r}") from None


@dataclass(frozen=True)
class ToolCall:
    name: str
    version: str
    args: Mapping[str, Any] = field(default_factory=dict)
    idempotency_key: str = ""
    mode: str = "Commit"
    principal: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "args": dict(self.args),
            "idempotency_key": self.idempotency_key,
            "mode": self.mode,
            "principal": self.principal,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ToolCall":
        return cls(
            name=d["name"],
            version=str(d.get("version", "")),
            args=dict(d.get("args", {})),
            idempotency_key=d.get("idempotency_key", ""),
            mode=d.get("mode", "Commit"),
            principal=d.get("principal", ""),
        )


@dataclass(frozen=True)
class ValidatedCall:
    """A call that passed ``validate``; args are read-only from here on."""

    spec: ToolSpec
    call: ToolCall
    args: Mapping[str, Any]


@dataclass(frozen=True)
class ToolResult:
    status: str  # "Ok" | "Error"
    output: Mapping[str, Any] = field(default_factory=dict)
    error: str | None = None
    latency: int = 0
    cost_charged: float = 0.0
    deduped: bool = False
    side_effect_committed: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "Ok"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "error": self.error,
            "output": dict(self.output),
            "latency": self.latency,
            "cost_charged": self.cost_charged,
            "deduped": self.deduped,
            "side_effect_committed": self.side_effect_committed,
        }

    @classmethod
    def failure(cls, kind: str, latency: int = 0) -> "ToolResult":
        return cls(status="Error", error=kind, latency=latency)


class ToolRegistry:
    """Append-only registry keyed by (name, version)."""

    def __init__(self, specs=()):
        self._specs: dict[tuple[str, str], ToolSpec] = {}
        self._lock = threading.Lock()
        for spec in specs:
            self.register(spec)

    def register(self, spec: ToolSpec) -> str:
        if not isinstance(spec, ToolSpec):
            raise InvalidSpec("expected a ToolSpec")
        key = (spec.name, spec.version)
        with self._lock:
            if key in self._specs:
                raise DuplicateVersion(f"{spec.tool_id} already registered")
            self._specs[key] = spec
        return spec.tool_id

    def resolve(self, name: str, req: str | VersionReq) -> ToolSpec:
        if not isinstance(req, VersionReq):
            try:
                req = VersionReq.parse(req)
            except InvalidSpec:
                raise NotFound(f"{name}: unparseable version requirement {req!r}") from None
        candidates = [s for (n, _), s in self._specs.items()
                      if n == name and req.matches(s.version_tuple)]
        if not candidates:
            raise NotFound(f"no tool {name} matching {req}")
        return max(candidates, key=lambda s: s.version_tuple)

    def __contains__(self, key) -> bool:
        return key in self._specs

    def __iter__(self):
        return iter(sorted(self._specs.values(), key=lambda s: (s.name, s.version_tuple)))

    def __len__(self) -> int:
        return len(self._specs)

    def digests(self) -> dict[tuple[str, str], str]:
        return {k: s.digest for k, s in self._specs.items()}


def validate(call: ToolCall, spec: ToolSpec) -> ValidatedCall:
    """Check a call against its spec; raise ``ValidationError`` naming the culprit."""
    if call.name != spec.name:
        raise ValidationError("name-mismatch", call.name)
    if call.mode not in MODES:
        raise ValidationError("type-mismatch", "mode")
    args = dict(call.args)
    for name in sorted(args):
        if name not in spec.input_schema:
            raise ValidationError("unknown-field", name)
    for name, fs in spec.input_schema.items():
        if name not in args:
            if fs.required:
                raise ValidationError("missing-field", name)
            continue
        if not fs.type_ok(args[name]):
            raise ValidationError("type-mismatch", name)
        if not fs.range_ok(args[name]):
            raise ValidationError("out-of-range", name)
    for pre in spec.preconditions:
        if not pre.holds(args):
            raise ValidationError("precondition-failed", str(pre))
    if spec.side_effecting and not call.idempotency_key:
        raise ValidationError("missing-field", "idempotency_key")
    frozen = MappingProxyType(copy.deepcopy(args))
    return ValidatedCall(spec=spec, call=call, args=frozen)


@dataclass(frozen=True)
class SandboxLimits:
    max_latency: int = 100
    max_output_bytes: int = 4096


class ToolExecutor:
    """Runs validated calls against stubs and owns the stub state.

    ``effects`` counts committed side effects per tool name; ``counters`` holds
    the value of counter stubs. The idempotency cache is keyed by
    (tool name, major version, key) and only remembers successful commits, so
    a failed attempt can be retried with the same key.
    """

    def __init__(self):
        self.effects: dict[str, int] = {}
        self.counters: dict[str, float] = {}
        self.commits: dict[str, int] = {}
        self._cache: dict[tuple[str, int, str], ToolResult] = {}
        self._lock = threading.Lock()

    def clear_cache(self) -> None:
        with self._lock:
            self._cache.clear()

    def state(self) -> dict:
        return {"effects": dict(self.effects), "counters": dict(self.counters),
                "commits": dict(self.commits)}

    def _cache_key(self, v: ValidatedCall):
        return (v.spec.name, v.spec.version_tuple[0], v.call.idempotency_key)

    def would_dedupe(self, v: ValidatedCall) -> bool:
        return (v.spec.side_effecting and v.call.mode == "Commit"
                and self._cache_key(v) in self._cache)

    def _predict(self, v: ValidatedCall, ordinal: int) -> tuple[dict | None, str | None]:
        stub, args = v.spec.stub, v.args
        if stub.kind == "fail":
            return None, "tool-error"
        if stub.kind == "flaky" and ordinal in stub.fail_on:
            return None, "tool-error"
        if stub.kind in ("echo", "flaky"):
            out = {k: args[k] for k in v.spec.output_schema if k in args}
        elif stub.kind == "counter":
            amount = args.get(stub.amount_field, 1) if stub.amount_field else 1
            out = {stub.output_field: self.counters.get(v.spec.name, 0) + amount}
        else:  # lookup
            key = str(args.get(stub.key_field)) if stub.key_field else ""
            if key not in stub.table:
                return None, "tool-error"
            out = {stub.output_field: stub.table[key]}
        for name, fs in v.spec.output_schema.items():
            if name not in out:
                if fs.required:
                    return None, "tool-error"
                continue
            if not fs.type_ok(out[name]) or not fs.range_ok(out[name]):
                return None, "tool-error"
        return out, None

    def execute(self, v: ValidatedCall, limits: SandboxLimits = SandboxLimits()) -> ToolResult:
        spec, stub = v.spec, v.spec.stub
        with self._lock:
            if v.call.mode == "Commit" and spec.side_effecting:
                cached = self._cache.get(self._cache_key(v))
                if cached is not None:
                    return ToolResult(status=cached.status, output=cached.output,
                                      latency=cached.latency, cost_charged=0.0,
                                      deduped=True, side_effect_committed=False)
            if stub.latency > limits.max_latency:
                return ToolResult.failure("limit-exceeded", latency=stub.latency)
            ordinal = self.commits.get(spec.name, 0) + 1
            out, err = self._predict(v, ordinal)
            if v.call.mode == "Simulate":
                if err:
                    return ToolResult.failure(err, latency=stub.latency)
                if len(canonical_json(out).encode()) > limits.max_output_bytes:
                    return ToolResult.failure("limit-exceeded", latency=stub.latency)
                return ToolResult(status="Ok", output=MappingProxyType(out), latency=stub.latency)
            self.commits[spec.name] = ordinal
            if err:
                return ToolResult.failure(err, latency=stub.latency)
            if len(canonical_json(out).encode()) > limits.max_output_bytes:
                return ToolResult.failure("limit-exceeded", latency=stub.latency)
            committed = False
            if spec.side_effecting:
                self.effects[spec.name] = self.effects.get(spec.name, 0) + 1
                committed = True
                if stub.kind == "counter":
                    self.counters[spec.name] = out[stub.output_field]
            result = ToolResult(status="Ok", output=MappingProxyType(out), latency=stub.latency,
                                cost_charged=float(spec.cost), side_effect_committed=committed)
            if spec.side_effecting:
                self._cache[self._cache_key(v)] = result
            return result
