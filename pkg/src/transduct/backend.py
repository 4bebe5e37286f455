"""LLM-backed kernels: prompt assembly, schema-constrained decoding, retry.

The wire protocol is OpenAI-compatible chat completions with a JSON-schema
response format. Model output is expected to be a single JSON envelope::

    {"value": <target record>, "explanation": "...",
     "relevant_source_attributes": [...], "confidence": 0.96,
     "provenance": {"slot": ["input", "slots"]}}

``provenance`` may be omitted; it then defaults to mapping every output slot
to the relevant source attributes. Every envelope, whether from a real model
or the mock backend, goes through :func:`decode_and_validate`; nothing
reaches callers unvalidated.

The mock backend is a deterministic rule table for offline runs and tests.
Rules can be authored in Python (a producer returning an envelope dict) or
loaded from a JSON file using a small template language over the input
state(s): ``{slot}``, ``{count}``, ``{sum:slot}``, ``{mean:slot}``,
``{min:slot}``, ``{max:slot}``, ``{first:slot}``, ``{last:slot}``,
``{join:slot:sep}``, and ``{collect}`` (the input states as a list).
"""

from __future__ import annotations

import inspect
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import httpx

from .errors import (
    BackendUnavailable,
    InvalidConfidence,
    InvalidProvenance,
    NoMatchingRule,
    ParseError,
    SchemaViolation,
    Timeout,
    TransportError,
    ValidationError,
    WorkflowError,
)
from .schema import RecordType, State, canonical_json, json_schema_of, to_json, validate
from .transduction import Explanation, ProvenanceMap, TransductionConfig

__all__ = [
    "BackendConfig",
    "PromptBundle",
    "build_prompt",
    "envelope_schema",
    "decode_and_validate",
    "call_with_retry",
    "HttpTransport",
    "ChatBackend",
    "MockRule",
    "MockBackend",
    "mock_invoke",
    "envelope",
    "rules_from_spec",
    "rules_from_file",
    "resolve_api_key",
    "RETRY_PREFIX",
]

RETRY_PREFIX = "Your previous output was invalid: "

ENVELOPE_FIELDS = ("value", "explanation", "relevant_source_attributes", "confidence", "provenance")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = ""
    temperature: float = 0.0
    timeout: float = 60.0
    api_key_env: str = "TRANSDUCT_API_KEY"
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


def resolve_api_key(cfg: BackendConfig) -> str:
    key = os.environ.get(cfg.api_key_env, "")
    if not key:
        raise BackendUnavailable(
            f"API key environment variable {cfg.api_key_env} is not set"
        )
    return key


@dataclass(frozen=True)
class PromptBundle:
    """Deterministic function of (types, config, input); safe to golden-test."""

    system: str
    user: str
    response_schema: dict[str, Any]

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user},
        ]


def _describe_slots(rtype: RecordType, indent: str = "") -> list[str]:
    lines = []
    for spec in rtype.slots:
        kind = spec.slot_type.describe()
        extras = []
        if spec.enum_values:
            extras.append("one of: " + ", ".join(spec.enum_values))
        if spec.optional:
            extras.append("optional")
        detail = "; ".join(x for x in [spec.description, *extras] if x)
        lines.append(f"{indent}- {spec.name} ({kind})" + (f": {detail}" if detail else ""))
        if isinstance(spec.slot_type, RecordType):
            lines.extend(_describe_slots(spec.slot_type, indent + "  "))
    return lines


def envelope_schema(source: RecordType, target: RecordType) -> dict[str, Any]:
    """The response schema: target schema wrapped in the explanation envelope."""
    value_schema = json_schema_of(target)
    value_schema.pop("$schema", None)
    attr_item: dict[str, Any] = {"type": "string"}
    if source.slots:
        attr_item["enum"] = list(source.slot_names)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"{target.name}_envelope",
        "type": "object",
        "properties": {
            "value": value_schema,
            "explanation": {"type": "string"},
            "relevant_source_attributes": {"type": "array", "items": attr_item},
            "confidence": {"type": "number", "minimum": 0, "maximum": 1},
            "provenance": {
                "type": "object",
                "properties": {
                    name: {"type": "array", "items": dict(attr_item)}
                    for name in target.slot_names
                },
                "additionalProperties": False,
            },
        },
        "required": ["value", "explanation", "relevant_source_attributes", "confidence"],
        "additionalProperties": False,
    }


def build_prompt(
    source: RecordType,
    target: RecordType,
    config: TransductionConfig,
    payload: State | Sequence[State],
) -> PromptBundle:
    """Assemble the system/user texts and response schema for one call."""
    many = not isinstance(payload, State)
    parts = []
    if config.instructions:
        parts.append(config.instructions)
    if many:
        parts.append(
            f"The user message holds a JSON array of {source.name} records; "
            f"aggregate them into a single {target.name} record."
        )
    else:
        parts.append(
            f"Turn the {source.name} record in the user message into one {target.name} record."
        )
    target_lines = _describe_slots(target)
    if target_lines:
        parts.append(f"Slots of {target.name}:\n" + "\n".join(target_lines))
    parts.append(
        "Respond with one JSON object of the form "
        '{"value": <the ' + target.name + ' record>, "explanation": <your reasoning>, '
        '"relevant_source_attributes": [<input slot names used>], '
        '"confidence": <number between 0 and 1>, '
        '"provenance": {<output slot>: [<input slots used as evidence>]}}. '
        "Evidence lists must name input slots only and must not be empty."
    )
    if many:
        user = "[" + ",".join(to_json(s) for s in payload) + "]"
    else:
        user = to_json(payload)
    return PromptBundle(
        system="\n\n".join(parts),
        user=user,
        response_schema=envelope_schema(source, target),
    )


# --- decoding ---------------------------------------------------------------------


def decode_and_validate(
    raw: str, source: RecordType, target: RecordType
) -> tuple[State, Explanation, ProvenanceMap]:
    """Parse and fully validate one model envelope.

    Raises ParseError for non-JSON, SchemaViolation for shape/typing problems
    (naming the offending slot), InvalidProvenance for empty or
    out-of-vocabulary evidence, InvalidConfidence for out-of-range confidence.
    """
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if not isinstance(data, dict):
        raise SchemaViolation("envelope is not a JSON object")
    for key in data:
        if key not in ENVELOPE_FIELDS:
            raise SchemaViolation(f"unexpected envelope field {key!r}")
    if "value" not in data:
        raise SchemaViolation("envelope is missing the 'value' field")
    try:
        state = validate(data["value"], target)
    except ValidationError as exc:
        raise SchemaViolation(str(exc), slot=exc.slot) from exc

    text = data.get("explanation")
    if not isinstance(text, str):
        raise SchemaViolation("envelope field 'explanation' must be a string")
    attrs = data.get("relevant_source_attributes")
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise SchemaViolation(
            "envelope field 'relevant_source_attributes' must be a list of slot names"
        )
    confidence = data.get("confidence")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise InvalidConfidence(confidence)
    explanation = Explanation(
        explanation=text,
        relevant_source_attributes=tuple(attrs),
        confidence=float(confidence),
    )
    explanation.validate_against(source, target)

    prov_obj = data.get("provenance")
    if prov_obj is None:
        # stated fallback: every output slot is evidenced by the relevant attrs
        prov_obj = {name: list(attrs) for name in target.slot_names}
    if not isinstance(prov_obj, dict):
        raise SchemaViolation("envelope field 'provenance' must be an object")
    entries: dict[str, frozenset[str]] = {}
    for name, deps in prov_obj.items():
        if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
            raise SchemaViolation(f"provenance entry {name!r} must be a list of slot names")
        entries[name] = frozenset(deps)
    provenance = ProvenanceMap(entries)
    provenance.validate_against(source, target)
    return state, explanation, provenance


# --- retrying transport ---------------------------------------------------------------


async def call_with_retry(
    transport: Callable[..., Any],
    bundle: PromptBundle,
    cfg: BackendConfig,
    source: RecordType,
    target: RecordType,
) -> tuple[State, Explanation, ProvenanceMap, int]:
    """Call the transport, validating output; resend with feedback on failure.

    Decode failures append the assistant's previous output and the exact
    validation error (prefixed with ``RETRY_PREFIX``) to the conversation;
    transport failures retry the unchanged conversation. At most
    ``cfg.max_retries`` retries, i.e. max_retries + 1 attempts.
    """
    messages = bundle.messages()
    attempt = 0
    while True:
        attempt += 1
        raw: str | None = None
        try:
            raw = await transport(messages, bundle.response_schema, cfg)
            state, explanation, provenance = decode_and_validate(raw, source, target)
            return state, explanation, provenance, attempt - 1
        except (ParseError, SchemaViolation, InvalidProvenance, InvalidConfidence) as exc:
            if attempt > cfg.max_retries:
                if isinstance(exc, SchemaViolation):
                    exc.attempts = attempt
                raise
            messages = messages + [
                {"role": "assistant", "content": raw if raw is not None else ""},
                {"role": "user", "content": RETRY_PREFIX + str(exc)},
            ]
        except TransportError:
            if attempt > cfg.max_retries:
                raise


class HttpTransport:
    """POSTs OpenAI-style chat completions; returns the assistant text."""

    async def __call__(
        self, messages: list[dict[str, str]], response_schema: dict[str, Any], cfg: BackendConfig
    ) -> str:
        key = resolve_api_key(cfg)
        payload = {
            "model": cfg.model,
            "messages": messages,
            "temperature": cfg.temperature,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": "transduction_envelope",
                    "schema": response_schema,
                    "strict": True,
                },
            },
        }
        try:
            async with httpx.AsyncClient(timeout=cfg.timeout) as client:
                response = await client.post(
                    cfg.endpoint,
                    json=payload,
                    headers={"Authorization": f"Bearer {key}"},
                )
        except httpx.TimeoutException as exc:
            raise Timeout(f"backend call timed out after {cfg.timeout}s") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"backend call failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(
                f"backend returned HTTP {response.status_code}: {response.text[:500]}"
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc


@dataclass
class ChatBackend:
    """A shareable client realizing backend kernels over a transport.

    Per-function configuration wins over the backend defaults for model,
    temperature and retry budget; the endpoint, timeout, and key come from
    the backend config.
    """

    cfg: BackendConfig
    transport: Callable[..., Any] = field(default_factory=HttpTransport)

    async def complete(
        self,
        source: RecordType,
        target: RecordType,
        config: TransductionConfig,
        payload: State | Sequence[State],
    ) -> tuple[State, Explanation, ProvenanceMap, int]:
        effective = replace(
            self.cfg,
            model=config.model or self.cfg.model,
            temperature=config.temperature,
            max_retries=config.max_retries,
        )
        bundle = build_prompt(source, target, replace(config, model=effective.model), payload)
        return await call_with_retry(self.transport, bundle, effective, source, target)


# --- mock backend -----------------------------------------------------------------------


@dataclass(frozen=True)
class MockRule:
    """First-match rule: a matcher over (source, target, instructions) plus a
    deterministic producer returning an envelope dict."""

    produce: Callable[[State | list[State]], dict[str, Any]]
    source: str | None = None
    target: str | None = None
    instructions_contain: str | None = None
    name: str = ""

    def matches(self, source_name: str, target_name: str, instructions: str) -> bool:
        if self.source is not None and self.source != source_name:
            return False
        if self.target is not None and self.target != target_name:
            return False
        if self.instructions_contain is not None and self.instructions_contain not in instructions:
            return False
        return True


def envelope(
    value: dict[str, Any],
    explanation: str = "mock transduction",
    attrs: Iterable[str] = (),
    confidence: float = 1.0,
    provenance: dict[str, list[str]] | None = None,
) -> dict[str, Any]:
    """Assemble a producer envelope dict."""
    out: dict[str, Any] = {
        "value": value,
        "explanation": explanation,
        "relevant_source_attributes": list(attrs),
        "confidence": confidence,
    }
    if provenance is not None:
        out["provenance"] = provenance
    return out


class MockBackend:
    """Deterministic rule-table backend; output is validated exactly like
    real backend output (same decode path)."""

    def __init__(self, rules: Iterable[MockRule]):
        self.rules = list(rules)

    def find_rule(self, source: RecordType, target: RecordType, instructions: str) -> MockRule:
        for rule in self.rules:
            if rule.matches(source.name, target.name, instructions):
                return rule
        raise NoMatchingRule(source.name, target.name)

    async def complete(
        self,
        source: RecordType,
        target: RecordType,
        config: TransductionConfig,
        payload: State | Sequence[State],
    ) -> tuple[State, Explanation, ProvenanceMap, int]:
        rule = self.find_rule(source, target, config.instructions)
        produced = rule.produce(payload if isinstance(payload, State) else list(payload))
        if inspect.isawaitable(produced):
            produced = await produced
        raw = canonical_json(produced)
        state, explanation, provenance = decode_and_validate(raw, source, target)
        return state, explanation, provenance, 0


async def mock_invoke(
    rules: Iterable[MockRule],
    source: RecordType,
    target: RecordType,
    config: TransductionConfig,
    payload: State | Sequence[State],
) -> tuple[State, Explanation, ProvenanceMap]:
    state, explanation, provenance, _ = await MockBackend(rules).complete(
        source, target, config, payload
    )
    return state, explanation, provenance


# --- declarative mock rules ----------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([^{}]+)\}")
_AGGREGATES = ("sum", "mean", "min", "max", "first", "last", "join")


def _stringify(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _slot_values(elements: list[State], name: str) -> list[Any]:
    return [el.values.get(name) for el in elements if el.values.get(name) is not None]


def _eval_placeholder(body: str, elements: list[State]) -> tuple[Any, set[str]]:
    head, sep, rest = body.partition(":")
    if not sep:
        if head == "count":
            return len(elements), set()
        if head == "collect":
            return [el.to_plain() for el in elements], set()
        # bare slot reference, equivalent to first:slot
        head, rest = "first", head
    if head not in _AGGREGATES:
        raise WorkflowError(f"unknown template function {head!r}")
    slot_name, _, arg = rest.partition(":")
    refs = {slot_name}
    values = _slot_values(elements, slot_name)
    if head == "first":
        return (values[0] if values else None), refs
    if head == "last":
        return (values[-1] if values else None), refs
    if head == "sum":
        return sum(values) if values else 0, refs
    if head == "mean":
        return (sum(values) / len(values)) if values else None, refs
    if head == "min":
        return (min(values) if values else None), refs
    if head == "max":
        return (max(values) if values else None), refs
    sep_arg = arg if arg else ","
    return sep_arg.join(_stringify(v) for v in values), refs


def _render(template: Any, elements: list[State]) -> tuple[Any, set[str]]:
    """Render a rule template; non-strings pass through as literals."""
    if not isinstance(template, str):
        return template, set()
    exact = _PLACEHOLDER.fullmatch(template)
    if exact:
        return _eval_placeholder(exact.group(1), elements)
    refs: set[str] = set()

    def sub(match: re.Match) -> str:
        value, used = _eval_placeholder(match.group(1), elements)
        refs.update(used)
        return _stringify(value)

    return _PLACEHOLDER.sub(sub, template), refs


def _template_producer(
    output: dict[str, Any],
    explanation: str,
    confidence: float,
    provenance_override: dict[str, list[str]] | None,
) -> Callable[[State | list[State]], dict[str, Any]]:
    def produce(payload: State | list[State]) -> dict[str, Any]:
        elements = [payload] if isinstance(payload, State) else list(payload)
        source_names: tuple[str, ...] = (
            elements[0].record_type.slot_names if elements else ()
        )
        value: dict[str, Any] = {}
        prov: dict[str, list[str]] = {}
        for slot_name, template in output.items():
            rendered, refs = _render(template, elements)
            value[slot_name] = rendered
            if provenance_override and slot_name in provenance_override:
                prov[slot_name] = list(provenance_override[slot_name])
            else:
                known = [n for n in source_names if n in refs]
                prov[slot_name] = known if known else list(source_names)
        expl_text, _ = _render(explanation, elements)
        attr_union = {n for deps in prov.values() for n in deps}
        return envelope(
            value=value,
            explanation=_stringify(expl_text),
            attrs=[n for n in source_names if n in attr_union],
            confidence=confidence,
            provenance=prov,
        )

    return produce


def rules_from_spec(spec: dict[str, Any]) -> list[MockRule]:
    """Build mock rules from a parsed rules document (see the demo for shape)."""
    if not isinstance(spec, dict) or not isinstance(spec.get("rules"), list):
        raise WorkflowError("rules document must be an object with a 'rules' array")
    rules = []
    for i, entry in enumerate(spec["rules"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("output"), dict):
            raise WorkflowError(f"rule {i}: must be an object with an 'output' mapping")
        match = entry.get("match", {})
        if not isinstance(match, dict):
            raise WorkflowError(f"rule {i}: 'match' must be an object")
        confidence = entry.get("confidence", 1.0)
        if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
            raise WorkflowError(f"rule {i}: 'confidence' must be a number")
        rules.append(
            MockRule(
                name=entry.get("name", f"rule{i}"),
                source=match.get("source"),
                target=match.get("target"),
                instructions_contain=match.get("instructions_contain"),
                produce=_template_producer(
                    output=entry["output"],
                    explanation=entry.get("explanation", "mock rule applied"),
                    confidence=float(confidence),
                    provenance_override=entry.get("provenance"),
                ),
            )
        )
    return rules


def rules_from_file(path: str | Path) -> list[MockRule]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise WorkflowError(f"cannot read rules file {path}: {exc}") from exc
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkflowError(f"rules file {path} is not valid JSON: {exc}") from exc
    return rules_from_spec(spec)
