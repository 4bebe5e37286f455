from __future__ import annotations

import asyncio
import random

import pytest

from transduct import (
    ExecutionPolicy,
    MockBackend,
    MockRule,
    define_record,
    envelope,
    list_of,
    make_transduction,
    slot,
    validate,
)
from transduct import mapreduce as mr
from transduct.errors import (
    CompositionTypeMismatch,
    EmptyCollection,
    SchemaViolation,
    TypeMismatch,
)
from transduct.mapreduce import MapItemFailure

NUMBER = define_record("Number", [slot("value", "integer")])
TEXTS = define_record("Texts", [slot("text", "text")])


def _numbers(values):
    return [validate({"value": v}, NUMBER) for v in values]


def sum_rule():
    return MockRule(
        target="Number",
        produce=lambda xs: envelope(
            value={"value": sum(s["value"] for s in xs)},
            explanation="summed batch",
            attrs=["value"],
            confidence=1.0,
            provenance={"value": ["value"]},
        ),
    )


def echo_rule(latency_by_index=None, fail_at=(), gauge=None, limit=None, calls=None):
    """Copy rule for single states, with optional latency/fault/gauge hooks."""

    async def produce(state):
        if calls is not None:
            calls.append(state["value"])
        if gauge is not None:
            gauge["current"] += 1
            gauge["high"] = max(gauge["high"], gauge["current"])
            if limit is not None:
                assert gauge["current"] <= limit
        try:
            if latency_by_index is not None:
                await asyncio.sleep(latency_by_index[state["value"]])
            if state["value"] in fail_at:
                return envelope({"value": "broken"}, "bad", ["value"], 1.0)
            return envelope(
                {"value": state["value"]}, "echoed", ["value"], 1.0,
                provenance={"value": ["value"]},
            )
        finally:
            if gauge is not None:
                gauge["current"] -= 1

    return MockRule(produce=produce)


def test_map_preserves_order_simple(question_type, answer_type):
    copy = MockRule(
        target="Answer",
        produce=lambda s: envelope(
            value={"options": s["options"], "choice": s["options"][0]},
            explanation="copied",
            attrs=["options"],
            confidence=1.0,
        ),
    )
    decide = make_transduction(answer_type, question_type, backend=MockBackend([copy]))
    questions = [
        validate({"prompt": f"q{i}", "options": [f"o{i}"]}, question_type) for i in range(5)
    ]
    result = asyncio.run(mr.map(decide, questions))
    assert len(result) == 5
    assert [s["choice"] for s in result.states()] == [f"o{i}" for i in range(5)]


def test_map_empty_input():
    fn = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    result = asyncio.run(mr.map(fn, []))
    assert len(result) == 0 and result.ok


def test_map_collect_mode_isolates_failures():
    fn = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule(fail_at={2})]))
    result = asyncio.run(
        mr.map(fn, _numbers(range(5)), ExecutionPolicy(failure_mode="collect"))
    )
    assert len(result) == 5
    failures = result.failures
    assert len(failures) == 1
    assert failures[0].index == 2
    assert isinstance(failures[0].error, SchemaViolation)
    ok_values = [
        item.state["value"] for item in result.items if not isinstance(item, MapItemFailure)
    ]
    assert ok_values == [0, 1, 3, 4]


def test_map_fail_fast_raises():
    latencies = {i: 0.002 for i in range(6)}
    latencies[0] = 0.0
    fn = make_transduction(
        NUMBER, NUMBER,
        backend=MockBackend([echo_rule(latency_by_index=latencies, fail_at={0})]),
    )
    with pytest.raises(SchemaViolation):
        asyncio.run(
            mr.map(fn, _numbers(range(6)), ExecutionPolicy(failure_mode="fail_fast"))
        )


def test_map_order_with_random_latencies():
    rng = random.Random(11)
    fn_values = list(range(12))
    latencies = {i: rng.choice([0.0, 0.001, 0.002]) for i in fn_values}
    fn = make_transduction(
        NUMBER, NUMBER, backend=MockBackend([echo_rule(latency_by_index=latencies)])
    )
    for _ in range(10):
        result = asyncio.run(
            mr.map(fn, _numbers(fn_values), ExecutionPolicy(max_concurrency=4))
        )
        assert [s["value"] for s in result.states()] == fn_values


def test_map_respects_concurrency_bound():
    gauge = {"current": 0, "high": 0}
    latencies = {i: 0.001 for i in range(20)}
    fn = make_transduction(
        NUMBER,
        NUMBER,
        backend=MockBackend(
            [echo_rule(latency_by_index=latencies, gauge=gauge, limit=3)]
        ),
    )
    asyncio.run(mr.map(fn, _numbers(range(20)), ExecutionPolicy(max_concurrency=3)))
    assert 1 <= gauge["high"] <= 3


def test_map_precondition_type_check(question_type):
    fn = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    with pytest.raises(TypeMismatch):
        asyncio.run(mr.map(fn, [validate({"prompt": "p", "options": []}, question_type)]))


# --- reduce ---------------------------------------------------------------------


def test_reduce_sum_staged_equals_single_shot():
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    xs = _numbers(range(1, 11))
    staged = asyncio.run(mr.reduce(reducer, xs, ExecutionPolicy(batch_size=3)))
    single = asyncio.run(mr.reduce(reducer, xs, ExecutionPolicy(batch_size=50)))
    assert staged.state["value"] == single.state["value"] == 55


def test_reduce_singleton_one_kernel_call(sink):
    calls = []

    async def produce(xs):
        calls.append(len(xs))
        return envelope(
            {"value": sum(s["value"] for s in xs)}, "sum", ["value"], 1.0
        )

    reducer = make_transduction(
        NUMBER, NUMBER, backend=MockBackend([MockRule(produce=produce)])
    )
    result = asyncio.run(mr.reduce(reducer, _numbers([7])))
    assert result.state["value"] == 7
    assert calls == [1]


def test_reduce_empty_collection():
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    with pytest.raises(EmptyCollection):
        asyncio.run(mr.reduce(reducer, []))


def test_reduce_contiguous_batching_preserves_order():
    concat = MockRule(
        produce=lambda xs: envelope(
            value={"text": "".join(s["text"] for s in xs)},
            explanation="joined",
            attrs=["text"],
            confidence=1.0,
            provenance={"text": ["text"]},
        ),
    )
    reducer = make_transduction(TEXTS, TEXTS, backend=MockBackend([concat]))
    xs = [validate({"text": c}, TEXTS) for c in "abcd"]
    result = asyncio.run(mr.reduce(reducer, xs, ExecutionPolicy(batch_size=2)))
    assert result.state["text"] == "abcd"


def test_reduce_retypes_internal_stages():
    """A reducer with distinct source/target: internal stages consume the
    aggregate type, matched by target-only mock rules."""
    total = define_record("Total", [slot("total", "integer")])

    def produce(xs):
        amount = sum(s.values.get("value") or s.values.get("total") or 0 for s in xs)
        return envelope({"total": amount}, "partial", list(xs[0].record_type.slot_names), 1.0)

    reducer = make_transduction(
        total, NUMBER, backend=MockBackend([MockRule(target="Total", produce=produce)])
    )
    result = asyncio.run(
        mr.reduce(reducer, _numbers(range(1, 11)), ExecutionPolicy(batch_size=3))
    )
    assert result.state["total"] == 55


def test_reduce_assembles_explanation_and_provenance():
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    result = asyncio.run(
        mr.reduce(reducer, _numbers(range(1, 11)), ExecutionPolicy(batch_size=5))
    )
    lines = result.explanation.explanation.splitlines()
    assert lines[0].startswith("[stage 0 batch 0]")
    assert any(line.startswith("[stage 1 batch 0]") for line in lines)
    assert dict(result.provenance.entries) == {"value": frozenset({"value"})}


# --- map_reduce ------------------------------------------------------------------


def test_map_reduce_identity_map_plus_sum():
    mapper = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    result = asyncio.run(
        mr.map_reduce(mapper, reducer, _numbers(range(1, 11)), ExecutionPolicy(batch_size=4))
    )
    assert result.state["value"] == 55


def test_map_reduce_single_element():
    mapper = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    result = asyncio.run(mr.map_reduce(mapper, reducer, _numbers([9])))
    assert result.state["value"] == 9


def test_map_reduce_aborts_before_reduce_on_map_failure():
    reduce_calls = []

    async def reduce_produce(xs):
        reduce_calls.append(len(xs))
        return envelope({"value": 0}, "sum", ["value"], 1.0)

    mapper = make_transduction(
        NUMBER, NUMBER, backend=MockBackend([echo_rule(fail_at={3})])
    )
    reducer = make_transduction(
        NUMBER, NUMBER, backend=MockBackend([MockRule(produce=reduce_produce)])
    )
    for mode in ("fail_fast", "collect"):
        with pytest.raises(SchemaViolation):
            asyncio.run(
                mr.map_reduce(
                    mapper, reducer, _numbers(range(6)), ExecutionPolicy(failure_mode=mode)
                )
            )
    assert reduce_calls == []


def test_map_reduce_type_mismatch(question_type):
    mapper = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    other = make_transduction(question_type, question_type)
    with pytest.raises(CompositionTypeMismatch):
        mr.as_function(mapper, other)


def test_packaged_map_reduce_is_transducible():
    mapper = make_transduction(NUMBER, NUMBER, backend=MockBackend([echo_rule()]))
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    packaged = mr.as_function(mapper, reducer, ExecutionPolicy(batch_size=3))
    result = asyncio.run(packaged.invoke(_numbers(range(1, 11))))
    assert result.state["value"] == 55
    assert result.state.record_type is NUMBER
    for deps in result.provenance.entries.values():
        assert deps and deps <= set(NUMBER.slot_names)


def test_staging_invariance_for_associative_reducer():
    reducer = make_transduction(NUMBER, NUMBER, backend=MockBackend([sum_rule()]))
    xs = _numbers(range(1, 21))
    single = asyncio.run(mr.reduce(reducer, xs, ExecutionPolicy(batch_size=20)))
    for batch_size in range(2, 21):
        staged = asyncio.run(mr.reduce(reducer, xs, ExecutionPolicy(batch_size=batch_size)))
        assert staged.state == single.state


def test_policy_validation():
    with pytest.raises(ValueError):
        ExecutionPolicy(batch_size=1)
    with pytest.raises(ValueError):
        ExecutionPolicy(max_concurrency=0)
    with pytest.raises(ValueError):
        ExecutionPolicy(failure_mode="explode")
