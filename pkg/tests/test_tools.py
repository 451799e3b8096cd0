import pytest
from hypothesis import given, strategies as st

from agentgov.errors import DuplicateVersion, InvalidSpec, NotFound, ValidationError
from agentgov.tools import (FieldSpec, Precondition, SandboxLimits, StubBehavior, ToolCall,
                            ToolExecutor, ToolRegistry, ToolSpec, VersionReq, validate)

from conftest import counter_tool, echo_tool


def test_register_and_resolve_latest_compatible():
    reg = ToolRegistry([echo_tool(version="1.0.0"), echo_tool(version="1.4.2"),
                        echo_tool(version="2.0.0")])
    assert reg.resolve("echo", "1.x").version == "1.4.2"
    assert reg.resolve("echo", "^2").version == "2.0.0"
    assert reg.resolve("echo", "1.0.0").version == "1.0.0"
    with pytest.raises(NotFound):
        reg.resolve("echo", "3.x")
    with pytest.raises(NotFound):
        reg.resolve("missing", "1.x")


def test_duplicate_version_rejected():
    reg = ToolRegistry([echo_tool()])
    with pytest.raises(DuplicateVersion):
        reg.register(echo_tool())


@pytest.mark.parametrize("kw", [
    {"input_schema": {}},
    {"risk_tier": "Medium"},
    {"cost": -1},
    {"version": "1.0"},
    {"preconditions": (Precondition("nope", ">=", 0),)},
])
def test_invalid_specs(kw):
    base = dict(name="t", version="1.0.0", input_schema={"x": FieldSpec("int")},
                output_schema={"x": FieldSpec("int")})
    base.update(kw)
    with pytest.raises(InvalidSpec):
        ToolSpec(**base)


def test_spec_roundtrip_keeps_digest():
    spec = counter_tool(preconditions=(Precondition("amount", "<=", 50),))
    again = ToolSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.digest == spec.digest


@pytest.fixture
def transfer():
    return ToolSpec(
        name="transfer", version="1.0.0",
        input_schema={"amount": FieldSpec("int", min=1, max=100),
                      "currency": FieldSpec("enum", values=("EUR", "USD")),
                      "memo": FieldSpec("text", required=False)},
        output_schema={"amount": FieldSpec("int")},
        preconditions=(Precondition("amount", "!=", 13),),
        side_effecting=True)


@pytest.mark.parametrize("args,kind,element", [
    ({"currency": "EUR"}, "missing-field", "amount"),
    ({"amount": 5, "currency": "EUR", "extra": 1}, "unknown-field", "extra"),
    ({"amount": "5", "currency": "EUR"}, "type-mismatch", "amount"),
    ({"amount": True, "currency": "EUR"}, "type-mismatch", "amount"),
    ({"amount": 500, "currency": "EUR"}, "out-of-range", "amount"),
    ({"amount": 5, "currency": "GBP"}, "type-mismatch", "currency"),
    ({"amount": 13, "currency": "EUR"}, "precondition-failed", "amount != 13"),
])
def test_validation_names_the_offending_element(transfer, args, kind, element):
    with pytest.raises(ValidationError) as info:
        validate(ToolCall("transfer", "1.0.0", args, idempotency_key="k"), transfer)
    assert info.value.kind == kind
    assert info.value.element == element


def test_side_effecting_call_needs_a_key(transfer):
    with pytest.raises(ValidationError) as info:
        validate(ToolCall("transfer", "1.0.0", {"amount": 5, "currency": "EUR"}), transfer)
    assert info.value.element == "idempotency_key"


def test_validated_args_are_frozen_copies(transfer):
    args = {"amount": 5, "currency": "EUR"}
    v = validate(ToolCall("transfer", "1.0.0", args, idempotency_key="k"), transfer)
    args["amount"] = 99
    assert v.args["amount"] == 5
    with pytest.raises(TypeError):
        v.args["amount"] = 7


def test_commit_is_idempotent_per_key():
    ex = ToolExecutor()
    spec = counter_tool()
    first = ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 3}, "k1"), spec))
    again = ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 3}, "k1"), spec))
    other = ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 3}, "k2"), spec))
    assert first.side_effect_committed and not first.deduped
    assert again.deduped and not again.side_effect_committed
    assert again.output == first.output and again.cost_charged == 0.0
    assert other.output["balance"] == 6
    assert ex.effects[spec.name] == 2


def test_minor_version_shares_cache_major_does_not():
    ex = ToolExecutor()
    v1, v11, v2 = counter_tool(version="1.0.0"), counter_tool(version="1.1.0"), counter_tool(version="2.0.0")
    for spec in (v1, v11, v2):
        ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 1}, "same"), spec))
    assert ex.effects["ledger.append"] == 2


def test_simulate_has_no_side_effect():
    ex = ToolExecutor()
    spec = counter_tool()
    res = ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 4}, "k", mode="Simulate"), spec))
    assert res.ok and res.output["balance"] == 4
    assert ex.effects == {} and ex.counters == {}
    assert res.cost_charged == 0.0


def test_failed_commit_can_be_retried_with_same_key():
    spec = ToolSpec(name="flaky", version="1.0.0", input_schema={"text": FieldSpec("text")},
                    output_schema={"text": FieldSpec("text")}, side_effecting=True,
                    stub=StubBehavior(kind="flaky", fail_on=(1,)))
    ex = ToolExecutor()
    call = validate(ToolCall("flaky", "1.0.0", {"text": "x"}, "k"), spec)
    assert ex.execute(call).error == "tool-error"
    second = ex.execute(call)
    assert second.ok and second.side_effect_committed
    assert ex.effects["flaky"] == 1


def test_sandbox_limits():
    slow = echo_tool(name="slow", stub=StubBehavior(latency=50))
    ex = ToolExecutor()
    v = validate(ToolCall("slow", "1.0.0", {"text": "hi"}), slow)
    assert ex.execute(v, SandboxLimits(max_latency=10)).error == "limit-exceeded"
    big = validate(ToolCall("echo", "1.0.0", {"text": "x" * 100}), echo_tool())
    assert ex.execute(big, SandboxLimits(max_output_bytes=20)).error == "limit-exceeded"


def test_lookup_stub_unknown_key_is_tool_error():
    spec = ToolSpec(name="kb", version="1.0.0", input_schema={"q": FieldSpec("text")},
                    output_schema={"a": FieldSpec("text")},
                    stub=StubBehavior(kind="lookup", key_field="q", output_field="a",
                                      table={"hello": "world"}))
    ex = ToolExecutor()
    assert ex.execute(validate(ToolCall("kb", "1.0.0", {"q": "hello"}), spec)).output == {"a": "world"}
    assert ex.execute(validate(ToolCall("kb", "1.0.0", {"q": "other"}), spec)).error == "tool-error"


def test_version_req_parse():
    assert VersionReq.parse("1.x").matches((1, 9, 0))
    assert not VersionReq.parse("1.2.0").matches((1, 2, 1))
    with pytest.raises(InvalidSpec):
        VersionReq.parse("x.x")


@given(st.integers(min_value=-1000, max_value=1000))
def test_int_range_validation_matches_bounds(n):
    spec = counter_tool()
    call = ToolCall(spec.name, spec.version, {"amount": n}, idempotency_key="k")
    if 1 <= n <= 100:
        assert validate(call, spec).args["amount"] == n
    else:
        with pytest.raises(ValidationError):
            validate(call, spec)


@given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=30))
def test_effects_equal_distinct_keys(keys):
    spec = counter_tool()
    ex = ToolExecutor()
    for k in keys:
        ex.execute(validate(ToolCall(spec.name, spec.version, {"amount": 1}, k), spec))
    assert ex.effects[spec.name] == len(set(keys))
    assert ex.counters[spec.name] == len(set(keys))
