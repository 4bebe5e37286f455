"""Transducible functions: typed transformations with an evidence contract.

Every function carries a source and target record type and, when invoked,
returns a target-typed state together with an explanation (free text, the
relevant source slots, a confidence in [0, 1]) and a provenance map from each
output slot to the non-empty set of input slots used as evidence. Kernels
realize the transformation: an LLM backend, a wrapped deterministic
procedure, the identity, or a composed chain.

Functions are immutable and stateless; invocation never mutates them, so a
single function value can be shared across concurrent tasks.
"""

from __future__ import annotations

import inspect
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Any, Iterator, Mapping, Sequence

from . import trace
from .errors import (
    BackendUnavailable,
    CompositionTypeMismatch,
    InvalidConfidence,
    InvalidProvenance,
    KernelOutputInvalid,
    TypeMismatch,
    UnsupportedFeature,
    ValidationError,
)
from .schema import RecordType, State, to_json, validate

__all__ = [
    "Explanation",
    "ProvenanceMap",
    "TransductionConfig",
    "TransducibleFunction",
    "TransductionResult",
    "With",
    "make_transduction",
    "identity",
    "compose",
    "lift_deterministic",
    "invoke",
    "use_backend",
]


@dataclass(frozen=True)
class Explanation:
    """Why an output came out the way it did.

    ``relevant_source_attributes`` must name source slots and be non-empty
    whenever there is evidence to name (both types have slots); producing an
    empty record, or producing from one, needs no evidence.
    """

    explanation: str
    relevant_source_attributes: tuple[str, ...]
    confidence: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "relevant_source_attributes", tuple(self.relevant_source_attributes)
        )

    def validate_against(self, source: RecordType, target: RecordType) -> None:
        if isinstance(self.confidence, bool) or not isinstance(self.confidence, (int, float)):
            raise InvalidConfidence(self.confidence)
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidConfidence(self.confidence)
        names = set(source.slot_names)
        for attr in self.relevant_source_attributes:
            if attr not in names:
                raise InvalidProvenance(f"{attr!r} is not a slot of {source.name}")
        if not self.relevant_source_attributes and source.slots and target.slots:
            raise InvalidProvenance("relevant_source_attributes must be non-empty")

    def to_payload(self) -> dict[str, Any]:
        """The caller-facing payload; exactly these three fields."""
        return {
            "explanation": self.explanation,
            "relevant_source_attributes": list(self.relevant_source_attributes),
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class ProvenanceMap:
    """Per output slot, the set of input slots used as evidence."""

    entries: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "entries",
            MappingProxyType({k: frozenset(v) for k, v in dict(self.entries).items()}),
        )

    @classmethod
    def full(cls, source: RecordType, target: RecordType) -> "ProvenanceMap":
        everything = frozenset(source.slot_names)
        return cls({name: everything for name in target.slot_names})

    def validate_against(self, source: RecordType, target: RecordType) -> None:
        target_names = set(target.slot_names)
        source_names = set(source.slot_names)
        for name in target_names:
            if name not in self.entries:
                raise InvalidProvenance(f"no entry for output slot {name!r}")
        for name, deps in self.entries.items():
            if name not in target_names:
                raise InvalidProvenance(f"{name!r} is not a slot of {target.name}")
            if not deps:
                raise InvalidProvenance(f"evidence set for {name!r} is empty")
            for dep in deps:
                if dep not in source_names:
                    raise InvalidProvenance(
                        f"evidence {dep!r} for {name!r} is not a slot of {source.name}"
                    )

    def compose_with_inner(self, inner: "ProvenanceMap") -> "ProvenanceMap":
        """Relational composition: route each evidence slot through ``inner``."""
        return ProvenanceMap(
            {
                name: frozenset().union(
                    *(inner.entries.get(dep, frozenset()) for dep in deps)
                )
                for name, deps in self.entries.items()
            }
        )

    def evidence_union(self) -> frozenset[str]:
        if not self.entries:
            return frozenset()
        return frozenset().union(*self.entries.values())

    def to_obj(self, source: RecordType, target: RecordType) -> dict[str, list[str]]:
        """Serialize in declaration order (targets as keys, sources in lists)."""
        source_order = {name: i for i, name in enumerate(source.slot_names)}
        return {
            name: sorted(self.entries[name], key=lambda d: source_order.get(d, len(source_order)))
            for name in target.slot_names
            if name in self.entries
        }


@dataclass(frozen=True)
class TransductionConfig:
    """Per-function configuration, the ``With(...)`` refinement parameters."""

    instructions: str = ""
    model: str = ""
    temperature: float = 0.0
    explanation_requested: bool = False
    max_retries: int = 2
    batch_size: int = 20
    tools: tuple = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tools:
            raise UnsupportedFeature(
                "tool invocation is not supported; compose lifted procedures instead"
            )


@dataclass(frozen=True)
class With:
    """Source type plus configuration, for the ``target << With(source, ...)`` form."""

    source: RecordType
    config: TransductionConfig

    def __init__(self, source: RecordType, **kwargs: Any):
        object.__setattr__(self, "source", source)
        if "explanation" in kwargs:
            kwargs["explanation_requested"] = kwargs.pop("explanation")
        object.__setattr__(self, "config", TransductionConfig(**kwargs))


@dataclass(frozen=True)
class TransductionResult:
    state: State
    explanation: Explanation
    provenance: ProvenanceMap
    retry_count: int = 0

    def __iter__(self) -> Iterator[Any]:
        return iter((self.state, self.explanation, self.provenance))


# --- ambient backend ------------------------------------------------------------

_ambient_backend: ContextVar[Any] = ContextVar("transduct_backend", default=None)


@contextmanager
def use_backend(client: Any) -> Iterator[Any]:
    """Bind a backend client for functions built without an explicit one."""
    token = _ambient_backend.set(client)
    try:
        yield client
    finally:
        _ambient_backend.reset(token)


# --- kernels ----------------------------------------------------------------------


class IdentityKernel:
    kind = "identity"

    async def run(self, fn: "TransducibleFunction", payload: State | list[State]):
        if not isinstance(payload, State):
            raise TypeMismatch(None, fn.source.name, "collection")
        source = fn.source
        explanation = Explanation(
            explanation="identity transduction; input returned unchanged",
            relevant_source_attributes=source.slot_names,
            confidence=1.0,
        )
        return payload, explanation, ProvenanceMap.full(source, source), 0


@dataclass(frozen=True)
class DeterministicKernel:
    kind = "deterministic"

    proc: Any
    provenance: ProvenanceMap

    async def run(self, fn: "TransducibleFunction", payload: State | list[State]):
        if not isinstance(payload, State):
            raise TypeMismatch(None, fn.source.name, "collection")
        result = self.proc(payload)
        if inspect.isawaitable(result):
            result = await result
        values = result.values if isinstance(result, State) else result
        try:
            state = validate(values, fn.target)
        except ValidationError as exc:
            raise KernelOutputInvalid(exc) from exc
        name = getattr(self.proc, "__name__", "procedure")
        explanation = Explanation(
            explanation=f"deterministic procedure {name} applied",
            relevant_source_attributes=_ordered(self.provenance.evidence_union(), fn.source),
            confidence=1.0,
        )
        return state, explanation, self.provenance, 0


@dataclass(frozen=True)
class BackendKernel:
    kind = "backend"

    client: Any = None

    async def run(self, fn: "TransducibleFunction", payload: State | list[State]):
        client = self.client or _ambient_backend.get()
        if client is None:
            raise BackendUnavailable(
                "no backend bound; pass one to make_transduction or use use_backend()"
            )
        return await client.complete(fn.source, fn.target, fn.config, payload)


@dataclass(frozen=True)
class ComposedKernel:
    kind = "composed"

    stages: tuple["TransducibleFunction", ...]

    async def run(self, fn: "TransducibleFunction", payload: State | list[State]):
        value: Any = payload
        results: list[TransductionResult] = []
        for index, stage in enumerate(self.stages):
            result = await stage.invoke(value, _trace_stage=index)
            results.append(result)
            value = result.state
        provenance = results[-1].provenance
        for earlier in reversed(results[:-1]):
            provenance = provenance.compose_with_inner(earlier.provenance)
        confidence = 1.0
        for result in results:
            confidence *= result.explanation.confidence
        explanation = Explanation(
            explanation="\n".join(
                f"[stage {i}] {r.explanation.explanation}" for i, r in enumerate(results)
            ),
            relevant_source_attributes=_ordered(provenance.evidence_union(), fn.source),
            confidence=min(max(confidence, 0.0), 1.0),
        )
        retries = sum(r.retry_count for r in results)
        return results[-1].state, explanation, provenance, retries


def _ordered(names: frozenset[str], rtype: RecordType) -> tuple[str, ...]:
    return tuple(n for n in rtype.slot_names if n in names)


# --- the function itself -----------------------------------------------------------


@dataclass(frozen=True)
class TransducibleFunction:
    """A typed, stateless, async-callable transformation.

    ``invoke`` returns the full :class:`TransductionResult`; calling the
    function returns the state alone, or ``(state, explanation)`` when the
    config requests explanations.
    """

    source: RecordType
    target: RecordType
    config: TransductionConfig
    kernel: Any

    def descriptor(self) -> dict[str, Any]:
        return {
            "name": f"{self.target.name}<<{self.source.name}",
            "source": self.source.name,
            "target": self.target.name,
            "kernel": self.kernel.kind,
            "model": self.config.model,
            "instructions_digest": trace.digest(self.config.instructions),
        }

    def configured(self, **overrides: Any) -> "TransducibleFunction":
        """Refined copy; the typed interface stays the same."""
        if "explanation" in overrides:
            overrides["explanation_requested"] = overrides.pop("explanation")
        return replace(self, config=replace(self.config, **overrides))

    def _check_input(self, payload: Any) -> State | list[State]:
        if isinstance(payload, State):
            if payload.record_type != self.source:
                raise TypeMismatch(None, self.source.name, payload.record_type.name)
            return payload
        if isinstance(payload, Sequence) and not isinstance(payload, (str, bytes)):
            items = list(payload)
            for item in items:
                if not isinstance(item, State) or item.record_type != self.source:
                    found = item.record_type.name if isinstance(item, State) else type(item).__name__
                    raise TypeMismatch(None, self.source.name, found)
            return items
        raise TypeMismatch(None, self.source.name, type(payload).__name__)

    async def invoke(
        self,
        payload: State | Sequence[State],
        *,
        _trace_stage: int | None = None,
        _trace_elements: list[int] | None = None,
        _trace_order: tuple = (),
    ) -> TransductionResult:
        """Run the kernel and return (state, explanation, provenance).

        The input is type-checked before any kernel work, the output contract
        (target-typed state, valid explanation and provenance) is enforced on
        every invocation, and one trace record is emitted per kernel call.
        """
        checked = self._check_input(payload)
        if isinstance(checked, State):
            input_json = to_json(checked)
        else:
            input_json = "[" + ",".join(to_json(s) for s in checked) + "]"
        ctx = trace.invocation(
            kind=self.kernel.kind,
            function=self.descriptor(),
            input_json=input_json,
            stage_index=_trace_stage,
            element_indices=_trace_elements,
            order_key=_trace_order if _trace_order else ((_trace_stage,) if _trace_stage is not None else ()),
        )
        with ctx as node:
            state, explanation, provenance, retries = await self.kernel.run(self, checked)
            if state.record_type != self.target:
                raise KernelOutputInvalid(
                    TypeMismatch(None, self.target.name, state.record_type.name)
                )
            explanation.validate_against(self.source, self.target)
            provenance.validate_against(self.source, self.target)
            node.finish(
                output_json=to_json(state),
                explanation=explanation.to_payload(),
                provenance=provenance.to_obj(self.source, self.target),
                retry_count=retries,
            )
        return TransductionResult(state, explanation, provenance, retry_count=retries)

    async def __call__(self, payload: State | Sequence[State]) -> Any:
        result = await self.invoke(payload)
        if self.config.explanation_requested:
            return result.state, result.explanation
        return result.state


# --- constructors --------------------------------------------------------------------


def make_transduction(
    target: RecordType,
    source: RecordType,
    config: TransductionConfig | None = None,
    backend: Any = None,
) -> TransducibleFunction:
    """The canonical backend-realized function of type ``target << source``."""
    return TransducibleFunction(
        source=source,
        target=target,
        config=config or TransductionConfig(),
        kernel=BackendKernel(client=backend),
    )


def identity(rtype: RecordType) -> TransducibleFunction:
    """The identity transduction; uses all slots as evidence, confidence 1."""
    return TransducibleFunction(
        source=rtype,
        target=rtype,
        config=TransductionConfig(),
        kernel=IdentityKernel(),
    )


def _stages_of(fn: TransducibleFunction) -> tuple[TransducibleFunction, ...]:
    if isinstance(fn.kernel, ComposedKernel):
        return fn.kernel.stages
    if isinstance(fn.kernel, IdentityKernel):
        # Identity is the neutral element; it contributes nothing to a chain.
        return ()
    return (fn,)


def compose(f2: TransducibleFunction, f1: TransducibleFunction) -> TransducibleFunction:
    """Sequential composition: ``compose(f2, f1)`` runs f1 first, then f2.

    Provenance chains relationally, explanations concatenate stage by stage,
    confidence multiplies. Identity stages are absorbed, so the identity laws
    and associativity hold exactly for every kernel kind.
    """
    if f1.target != f2.source:
        raise CompositionTypeMismatch(f1.target.name, f2.source.name)
    stages = _stages_of(f1) + _stages_of(f2)
    if not stages:
        return identity(f1.source)
    if len(stages) == 1:
        return stages[0]
    return TransducibleFunction(
        source=f1.source,
        target=f2.target,
        config=TransductionConfig(),
        kernel=ComposedKernel(stages=stages),
    )


def lift_deterministic(
    proc: Any,
    source: RecordType,
    target: RecordType,
    declared_provenance: ProvenanceMap | Mapping[str, Any],
) -> TransducibleFunction:
    """Wrap a deterministic (optionally async) procedure as a transducible function.

    The procedure receives a source-typed State and must return a mapping or
    State that validates against the target; its output is checked on every
    call. The declared provenance must cover all target slots.
    """
    if not isinstance(declared_provenance, ProvenanceMap):
        declared_provenance = ProvenanceMap(
            {k: frozenset(v) for k, v in dict(declared_provenance).items()}
        )
    declared_provenance.validate_against(source, target)
    return TransducibleFunction(
        source=source,
        target=target,
        config=TransductionConfig(),
        kernel=DeterministicKernel(proc=proc, provenance=declared_provenance),
    )


async def invoke(fn: TransducibleFunction, payload: State | Sequence[State]) -> TransductionResult:
    return await fn.invoke(payload)
