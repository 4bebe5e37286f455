from __future__ import annotations

import asyncio
import json
from pathlib import Path

import pytest

from transduct import (
    BackendConfig,
    ChatBackend,
    MockBackend,
    MockRule,
    build_prompt,
    decode_and_validate,
    define_record,
    envelope,
    list_of,
    make_transduction,
    mock_invoke,
    rules_from_spec,
    slot,
    to_json,
    validate,
)
from transduct import INTEGER, TEXT
from transduct.backend import RETRY_PREFIX, HttpTransport, call_with_retry
from transduct.errors import (
    BackendUnavailable,
    InvalidConfidence,
    InvalidProvenance,
    NoMatchingRule,
    ParseError,
    SchemaViolation,
    TransportError,
    WorkflowError,
)
from transduct.transduction import TransductionConfig

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_prompt.json").read_text())


@pytest.fixture
def q(question_type):
    return validate({"prompt": "which sensor?", "options": ["vibration", "voltage"]}, question_type)


# --- prompt assembly --------------------------------------------------------------


def test_build_prompt_matches_golden(question_type, answer_type, q):
    cfg = TransductionConfig(instructions="Pick the best option.", model="gpt-4.1")
    bundle = build_prompt(question_type, answer_type, cfg, q)
    assert bundle.system == GOLDEN["single"]["system"]
    assert bundle.user == GOLDEN["single"]["user"]
    assert bundle.response_schema == GOLDEN["single"]["response_schema"]


def test_build_prompt_list_input_matches_golden(question_type, answer_type, q):
    cfg = TransductionConfig(instructions="Pick the best option.", model="gpt-4.1")
    others = [
        validate({"prompt": "p2", "options": ["a"]}, question_type),
        validate({"prompt": "p3", "options": []}, question_type),
    ]
    bundle = build_prompt(question_type, answer_type, cfg, [q, *others])
    assert bundle.user == GOLDEN["many"]["user"]
    assert bundle.system == GOLDEN["many"]["system"]
    parsed = json.loads(bundle.user)
    assert [p["prompt"] for p in parsed] == ["which sensor?", "p2", "p3"]


def test_build_prompt_is_deterministic(question_type, answer_type, q):
    cfg = TransductionConfig(instructions="x")
    assert build_prompt(question_type, answer_type, cfg, q) == build_prompt(
        question_type, answer_type, cfg, q
    )


def test_response_schema_requires_choice(question_type, answer_type, q):
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    assert "choice" in bundle.response_schema["properties"]["value"]["required"]


# --- decoding -------------------------------------------------------------------------


def _y_envelope(**overrides):
    base = {
        "value": {"risk_score": 62, "risk_class": "medium"},
        "explanation": "moderate debt-to-income ratio with one late payment",
        "relevant_source_attributes": ["income", "debt", "credit_history"],
        "confidence": 0.9,
        "provenance": {
            "risk_score": ["income", "debt", "credit_history"],
            "risk_class": ["income", "debt", "credit_history"],
        },
    }
    base.update(overrides)
    return base


def test_decode_well_formed(loan_application, credit_evaluation):
    state, explanation, provenance = decode_and_validate(
        json.dumps(_y_envelope()), loan_application, credit_evaluation
    )
    assert state["risk_score"] == 62
    assert "last_name" not in provenance.evidence_union()


def test_decode_missing_slot_names_it(loan_application, credit_evaluation):
    env = _y_envelope(value={"risk_score": 62})
    with pytest.raises(SchemaViolation) as err:
        decode_and_validate(json.dumps(env), loan_application, credit_evaluation)
    assert "risk_class" in str(err.value)


def test_decode_out_of_vocabulary_provenance(loan_application, credit_evaluation):
    env = _y_envelope(
        provenance={"risk_score": ["zip_code"], "risk_class": ["income"]}
    )
    with pytest.raises(InvalidProvenance):
        decode_and_validate(json.dumps(env), loan_application, credit_evaluation)


def test_decode_confidence_out_of_range(loan_application, credit_evaluation):
    with pytest.raises(InvalidConfidence):
        decode_and_validate(
            json.dumps(_y_envelope(confidence=1.2)), loan_application, credit_evaluation
        )


def test_decode_non_json(loan_application, credit_evaluation):
    with pytest.raises(ParseError):
        decode_and_validate("not json", loan_application, credit_evaluation)


def test_decode_unknown_envelope_field(loan_application, credit_evaluation):
    env = _y_envelope()
    env["extra"] = 1
    with pytest.raises(SchemaViolation):
        decode_and_validate(json.dumps(env), loan_application, credit_evaluation)


def test_decode_defaults_provenance_to_attrs(loan_application, credit_evaluation):
    env = _y_envelope()
    del env["provenance"]
    _, _, provenance = decode_and_validate(
        json.dumps(env), loan_application, credit_evaluation
    )
    assert provenance.entries["risk_score"] == frozenset(
        {"income", "debt", "credit_history"}
    )


# --- retry ------------------------------------------------------------------------------


class ScriptedTransport:
    """Yields scripted raw outputs (or transport errors); records every call."""

    def __init__(self, script):
        self.script = list(script)
        self.calls: list[list[dict]] = []

    async def __call__(self, messages, response_schema, cfg):
        self.calls.append([dict(m) for m in messages])
        action = self.script[min(len(self.calls) - 1, len(self.script) - 1)]
        if action == "transport_error":
            raise TransportError("scripted failure")
        return action


def _ok_raw(question_type):
    return json.dumps(
        envelope(
            value={"options": ["a"], "choice": "a"},
            explanation="ok",
            attrs=["prompt"],
            confidence=1.0,
        )
    )


def test_retry_then_success(question_type, answer_type, q):
    transport = ScriptedTransport(["garbage", _ok_raw(question_type)])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    cfg = BackendConfig(max_retries=2)
    state, _, _, retries = asyncio.run(
        call_with_retry(transport, bundle, cfg, question_type, answer_type)
    )
    assert retries == 1
    assert len(transport.calls) == 2


def test_retry_feedback_message(question_type, answer_type, q):
    transport = ScriptedTransport(['{"value": {}}', _ok_raw(question_type)])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    asyncio.run(call_with_retry(transport, bundle, BackendConfig(max_retries=1), question_type, answer_type))
    second_call = transport.calls[1]
    assert second_call[-2]["role"] == "assistant"
    assert second_call[-2]["content"] == '{"value": {}}'
    assert second_call[-1]["role"] == "user"
    assert second_call[-1]["content"].startswith(RETRY_PREFIX)


def test_retry_exhaustion(question_type, answer_type, q):
    transport = ScriptedTransport(["garbage"])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    with pytest.raises(ParseError):
        asyncio.run(
            call_with_retry(transport, bundle, BackendConfig(max_retries=2), question_type, answer_type)
        )
    assert len(transport.calls) == 3


def test_persistent_schema_violation_reports_attempts(question_type, answer_type, q):
    transport = ScriptedTransport(['{"value": {}}'])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    with pytest.raises(SchemaViolation) as err:
        asyncio.run(
            call_with_retry(transport, bundle, BackendConfig(max_retries=2), question_type, answer_type)
        )
    assert err.value.attempts == 3


def test_zero_retries_first_try_success(question_type, answer_type, q):
    transport = ScriptedTransport([_ok_raw(question_type)])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    *_, retries = asyncio.run(
        call_with_retry(transport, bundle, BackendConfig(max_retries=0), question_type, answer_type)
    )
    assert retries == 0 and len(transport.calls) == 1


def test_transport_error_retried(question_type, answer_type, q):
    transport = ScriptedTransport(["transport_error", _ok_raw(question_type)])
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    *_, retries = asyncio.run(
        call_with_retry(transport, bundle, BackendConfig(max_retries=2), question_type, answer_type)
    )
    assert retries == 1


def test_http_transport_requires_api_key(monkeypatch, question_type, answer_type, q):
    monkeypatch.delenv("TRANSDUCT_API_KEY", raising=False)
    transport = HttpTransport()
    bundle = build_prompt(question_type, answer_type, TransductionConfig(), q)
    with pytest.raises(BackendUnavailable):
        asyncio.run(transport(bundle.messages(), bundle.response_schema, BackendConfig()))


def test_api_key_never_reaches_traces(monkeypatch, sink, question_type, answer_type, q):
    secret = "sk-super-secret-sentinel"
    monkeypatch.setenv("TRANSDUCT_API_KEY", secret)
    transport = ScriptedTransport([_ok_raw(question_type)])
    client = ChatBackend(BackendConfig(model="m"), transport=transport)
    decide = make_transduction(answer_type, question_type, backend=client)
    asyncio.run(decide.invoke(q))
    dumped = json.dumps([r.to_obj() for r in sink.records])
    assert secret not in dumped


def test_chat_backend_function_config_wins(question_type, answer_type, q):
    transport = ScriptedTransport(["garbage"])
    client = ChatBackend(BackendConfig(model="default-model", max_retries=5), transport=transport)
    decide = make_transduction(
        answer_type, question_type, TransductionConfig(model="override", max_retries=0),
        backend=client,
    )
    with pytest.raises(ParseError):
        asyncio.run(decide.invoke(q))
    assert len(transport.calls) == 1  # function-level max_retries=0 won


# --- mock backend -----------------------------------------------------------------------


def test_mock_slot_copy_rule(question_type, q):
    rule = MockRule(
        produce=lambda s: envelope(
            value=dict(s.values),
            explanation="copied",
            attrs=list(s.record_type.slot_names),
            confidence=1.0,
        )
    )
    state, _, _ = asyncio.run(
        mock_invoke([rule], question_type, question_type, TransductionConfig(), q)
    )
    assert state == q


def test_mock_sum_rule_over_list():
    number = define_record("Number", [slot("n", "integer")])
    total = define_record("Total", [slot("total", "integer")])
    rule = MockRule(
        produce=lambda xs: envelope(
            value={"total": sum(s["n"] for s in xs)},
            explanation="summed",
            attrs=["n"],
            confidence=1.0,
            provenance={"total": ["n"]},
        )
    )
    xs = [validate({"n": i}, number) for i in range(1, 11)]
    state, _, _ = asyncio.run(
        mock_invoke([rule], number, total, TransductionConfig(), xs)
    )
    assert state["total"] == sum(range(1, 11)) == 55


def test_mock_no_matching_rule(question_type, answer_type, q):
    rule = MockRule(target="SomethingElse", produce=lambda s: {})
    with pytest.raises(NoMatchingRule):
        asyncio.run(mock_invoke([rule], question_type, answer_type, TransductionConfig(), q))


def test_mock_first_match_wins(question_type, q):
    first = MockRule(
        produce=lambda s: envelope(dict(s.values), "first", ["prompt"], 1.0)
    )
    second = MockRule(
        produce=lambda s: envelope(dict(s.values), "second", ["prompt"], 1.0)
    )
    _, explanation, _ = asyncio.run(
        mock_invoke([first, second], question_type, question_type, TransductionConfig(), q)
    )
    assert explanation.explanation == "first"


def test_mock_output_validated_like_real_backend(question_type, answer_type, q):
    rule = MockRule(produce=lambda s: envelope({"choice": "a"}, "bad", ["prompt"], 1.0))
    with pytest.raises(SchemaViolation):
        asyncio.run(mock_invoke([rule], question_type, answer_type, TransductionConfig(), q))


# --- declarative rules ------------------------------------------------------------------


def _run_template_rule(entry, source_type, target_type, payload):
    rules = rules_from_spec({"rules": [entry]})
    return asyncio.run(
        mock_invoke(rules, source_type, target_type, TransductionConfig(), payload)
    )


def test_template_aggregates():
    row = define_record("Row", [slot("label", "text"), slot("value", "integer")])
    summary = define_record(
        "Summary",
        [
            slot("total", "integer"),
            slot("labels", "text"),
            slot("head", "text"),
            slot("count", "integer"),
        ],
    )
    xs = [validate({"label": l, "value": v}, row) for l, v in [("a", 1), ("b", 2), ("c", 3)]]
    entry = {
        "match": {"target": "Summary"},
        "output": {
            "total": "{sum:value}",
            "labels": "{join:label:-}",
            "head": "{first:label}",
            "count": "{count}",
        },
    }
    state, explanation, provenance = _run_template_rule(entry, row, summary, xs)
    assert dict(state.values) == {"total": 6, "labels": "a-b-c", "head": "a", "count": 3}
    assert provenance.entries["total"] == frozenset({"value"})
    assert provenance.entries["labels"] == frozenset({"label"})
    # count references no slot: provenance falls back to all source slots
    assert provenance.entries["count"] == frozenset({"label", "value"})


def test_template_collect_and_literals():
    item = define_record("Item", [slot("name", "text")])
    box = define_record(
        "Box", [slot("packed", "boolean"), slot("contents", list_of(item))]
    )
    xs = [validate({"name": n}, item) for n in ["x", "y"]]
    entry = {
        "match": {},
        "output": {"packed": True, "contents": "{collect}"},
        "explanation": "boxed {count} items",
        "confidence": 0.5,
    }
    state, explanation, _ = _run_template_rule(entry, item, box, xs)
    assert state["packed"] is True
    assert state["contents"] == [{"name": "x"}, {"name": "y"}]
    assert explanation.explanation == "boxed 2 items"
    assert explanation.confidence == 0.5


def test_template_single_state_slot_reference():
    row = define_record("Row", [slot("a", "text"), slot("b", "text")])
    out = define_record("Out", [slot("c", "text")])
    x = validate({"a": "left", "b": "right"}, row)
    entry = {"match": {}, "output": {"c": "{a}+{b}"}}
    state, _, provenance = _run_template_rule(entry, row, out, x)
    assert state["c"] == "left+right"
    assert provenance.entries["c"] == frozenset({"a", "b"})


def test_template_provenance_override():
    row = define_record("Row", [slot("a", "text"), slot("b", "text")])
    out = define_record("Out", [slot("c", "text")])
    entry = {"match": {}, "output": {"c": "{a}"}, "provenance": {"c": ["b"]}}
    _, _, provenance = _run_template_rule(
        entry, row, out, validate({"a": "v", "b": "w"}, row)
    )
    assert provenance.entries["c"] == frozenset({"b"})


def test_rules_from_spec_rejects_bad_shapes():
    with pytest.raises(WorkflowError):
        rules_from_spec({"rules": [{"match": {}}]})
    with pytest.raises(WorkflowError):
        rules_from_spec({})
    with pytest.raises(WorkflowError):
        rules_from_spec({"rules": [{"output": {}, "confidence": "high"}]})


def test_unknown_template_function():
    row = define_record("Row", [slot("a", "text")])
    out = define_record("Out", [slot("c", "text")])
    entry = {"match": {}, "output": {"c": "{median:a:x}"}}
    with pytest.raises(WorkflowError):
        _run_template_rule(entry, row, out, validate({"a": "v"}, row))
