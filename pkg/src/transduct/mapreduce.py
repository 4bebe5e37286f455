"""Collection execution: order-preserving parallel map and staged reduce.

``map`` applies a function pointwise with bounded concurrency; output order
always matches input order. ``reduce`` aggregates a collection into one
state: a single kernel call when the collection fits in one batch, otherwise
contiguous batches reduced concurrently and their partials reduced again,
stage by stage, until one remains. ``map_reduce`` composes the two and is
itself packageable as a transducible function over collections.

Internal reduce stages feed the reducer its own outputs, so a staged reduce
re-types the reducer with source = target for those stages; backend and mock
kernels handle this naturally (prompts and rule matching are shape-driven),
deterministic reducers must already be same-typed to be staged.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass, replace
from typing import Any, Iterator, Sequence

from . import trace
from .errors import (
    CompositionTypeMismatch,
    EmptyCollection,
    TransductError,
    TypeMismatch,
)
from .schema import State, canonical_json, to_json
from .transduction import (
    Explanation,
    ProvenanceMap,
    TransducibleFunction,
    TransductionResult,
)

__all__ = [
    "ExecutionPolicy",
    "MapItemFailure",
    "MapResult",
    "map",
    "reduce",
    "map_reduce",
    "as_function",
    "MapReduceKernel",
]


@dataclass(frozen=True)
class ExecutionPolicy:
    max_concurrency: int = 8
    failure_mode: str = "collect"
    batch_size: int = 20

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.failure_mode not in ("collect", "fail_fast"):
            raise ValueError("failure_mode must be 'collect' or 'fail_fast'")


@dataclass(frozen=True)
class MapItemFailure:
    index: int
    error: TransductError


@dataclass(frozen=True)
class MapResult:
    """Per-element outcomes; index i corresponds to input i."""

    items: tuple[Any, ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def failures(self) -> list[MapItemFailure]:
        return [item for item in self.items if isinstance(item, MapItemFailure)]

    @property
    def ok(self) -> bool:
        return not self.failures

    def states(self) -> list[State]:
        """All output states, in order; raises the first failure if any."""
        failures = self.failures
        if failures:
            raise failures[0].error
        return [item.state for item in self.items]


def _array_json(states: Sequence[State]) -> str:
    return "[" + ",".join(to_json(s) for s in states) + "]"


def _check_elements(fn: TransducibleFunction, items: list[State]) -> None:
    for item in items:
        if not isinstance(item, State) or item.record_type != fn.source:
            found = item.record_type.name if isinstance(item, State) else type(item).__name__
            raise TypeMismatch(None, fn.source.name, found)


async def _cancel_all(tasks: Sequence[asyncio.Task]) -> None:
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)


async def map(
    fn: TransducibleFunction,
    xs: Sequence[State],
    policy: ExecutionPolicy | None = None,
) -> MapResult:
    """Apply ``fn`` pointwise, at most ``max_concurrency`` in flight.

    In collect mode failures occupy their index without aborting siblings;
    in fail_fast mode the first failure cancels pending work and is raised.
    """
    policy = policy or ExecutionPolicy()
    items = list(xs)
    _check_elements(fn, items)
    descriptor = dict(fn.descriptor(), kernel="map")
    with trace.invocation(
        kind="map", function=descriptor, input_json=_array_json(items)
    ) as node:
        semaphore = asyncio.Semaphore(policy.max_concurrency)

        async def run_one(index: int, state: State) -> TransductionResult:
            async with semaphore:
                return await fn.invoke(
                    state, _trace_elements=[index], _trace_order=(0, index)
                )

        tasks = [asyncio.create_task(run_one(i, x)) for i, x in enumerate(items)]
        if policy.failure_mode == "fail_fast":
            try:
                outputs: list[Any] = list(await asyncio.gather(*tasks))
            except BaseException:
                await _cancel_all(tasks)
                raise
        else:
            gathered = await asyncio.gather(*tasks, return_exceptions=True)
            outputs = []
            for index, result in enumerate(gathered):
                if isinstance(result, TransductionResult):
                    outputs.append(result)
                elif isinstance(result, TransductError):
                    outputs.append(MapItemFailure(index, result))
                else:
                    await _cancel_all(tasks)
                    raise result
        node.finish(
            output_json="["
            + ",".join(
                to_json(o.state)
                if isinstance(o, TransductionResult)
                else canonical_json({"error": {"type": type(o.error).__name__, "message": str(o.error)}})
                for o in outputs
            )
            + "]",
        )
    return MapResult(tuple(outputs))


def _batches(level: list[Any], size: int) -> Iterator[list[Any]]:
    for start in range(0, len(level), size):
        yield level[start : start + size]


async def reduce(
    fn: TransducibleFunction,
    xs: Sequence[State],
    policy: ExecutionPolicy | None = None,
) -> TransductionResult:
    """Aggregate a non-empty collection into a single target-typed state.

    At most ``batch_size`` elements go into one kernel call; larger
    collections are reduced in contiguous batches, left-leaning, stage by
    stage. The returned explanation and provenance are assembled by the
    composition rules (stage-labelled concatenation, confidence product,
    relational provenance chaining); each batch's trace record carries the
    original element indices it covers.
    """
    policy = policy or ExecutionPolicy()
    items = list(xs)
    if not items:
        raise EmptyCollection()
    _check_elements(fn, items)
    descriptor = dict(fn.descriptor(), kernel="reduce")
    with trace.invocation(
        kind="reduce",
        function=descriptor,
        input_json=_array_json(items),
        element_indices=list(range(len(items))),
    ) as node:
        semaphore = asyncio.Semaphore(policy.max_concurrency)
        level: list[State] = items
        coverage: list[list[int]] = [[i] for i in range(len(items))]
        stage_fn = fn
        stage = 0
        stage_results: list[list[TransductionResult]] = []
        while True:
            batches = list(_batches(level, policy.batch_size))
            batch_coverage = [
                sorted({i for member in batch_cov for i in member})
                for batch_cov in _batches(coverage, policy.batch_size)
            ]

            async def run_batch(
                index: int, batch: list[State], covered: list[int], active: TransducibleFunction, at_stage: int
            ) -> TransductionResult:
                async with semaphore:
                    return await active.invoke(
                        batch,
                        _trace_stage=at_stage,
                        _trace_elements=covered,
                        _trace_order=(at_stage, index),
                    )

            tasks = [
                asyncio.create_task(run_batch(i, batch, batch_coverage[i], stage_fn, stage))
                for i, batch in enumerate(batches)
            ]
            if policy.failure_mode == "fail_fast":
                try:
                    results = list(await asyncio.gather(*tasks))
                except BaseException:
                    await _cancel_all(tasks)
                    raise
            else:
                gathered = await asyncio.gather(*tasks, return_exceptions=True)
                errors = [g for g in gathered if isinstance(g, BaseException)]
                if errors:
                    raise errors[0]
                results = list(gathered)
            stage_results.append(results)
            if len(results) == 1:
                break
            level = [result.state for result in results]
            coverage = batch_coverage
            if stage_fn.source != fn.target:
                stage_fn = replace(fn, source=fn.target)
            stage += 1

        final = stage_results[-1][0]
        provenance = final.provenance
        for earlier in reversed(stage_results[:-1]):
            union: dict[str, frozenset[str]] = {}
            for result in earlier:
                for name, deps in result.provenance.entries.items():
                    union[name] = union.get(name, frozenset()) | deps
            provenance = provenance.compose_with_inner(ProvenanceMap(union))
        confidence = 1.0
        lines = []
        retries = 0
        for stage_index, results in enumerate(stage_results):
            for batch_index, result in enumerate(results):
                confidence *= result.explanation.confidence
                retries += result.retry_count
                lines.append(
                    f"[stage {stage_index} batch {batch_index}] {result.explanation.explanation}"
                )
        explanation = Explanation(
            explanation="\n".join(lines),
            relevant_source_attributes=tuple(
                n for n in fn.source.slot_names if n in provenance.evidence_union()
            ),
            confidence=min(max(confidence, 0.0), 1.0),
        )
        explanation.validate_against(fn.source, fn.target)
        provenance.validate_against(fn.source, fn.target)
        node.finish(
            output_json=to_json(final.state),
            explanation=explanation.to_payload(),
            provenance=provenance.to_obj(fn.source, fn.target),
            retry_count=retries,
        )
    return TransductionResult(final.state, explanation, provenance, retry_count=retries)


@dataclass(frozen=True)
class MapReduceKernel:
    kind = "map_reduce"

    mapper: TransducibleFunction
    reducer: TransducibleFunction
    policy: ExecutionPolicy

    async def run(self, fn: TransducibleFunction, payload: State | list[State]):
        if isinstance(payload, State):
            raise TypeMismatch(None, f"collection of {fn.source.name}", fn.source.name)
        mapped = await map(self.mapper, payload, self.policy)
        if not mapped.ok:
            # collect-then-fail: every element ran, but nothing is reduced
            raise mapped.failures[0].error
        states = mapped.states()
        reduced = await reduce(self.reducer, states, self.policy)

        element_union: dict[str, frozenset[str]] = {}
        for item in mapped.items:
            for name, deps in item.provenance.entries.items():
                element_union[name] = element_union.get(name, frozenset()) | deps
        provenance = reduced.provenance.compose_with_inner(ProvenanceMap(element_union))
        confidence = reduced.explanation.confidence
        retries = reduced.retry_count
        for item in mapped.items:
            confidence *= item.explanation.confidence
            retries += item.retry_count
        explanation = Explanation(
            explanation=(
                f"[map] applied {self.mapper.descriptor()['name']} to {len(states)} elements\n"
                f"[reduce] {reduced.explanation.explanation}"
            ),
            relevant_source_attributes=tuple(
                n for n in fn.source.slot_names if n in provenance.evidence_union()
            ),
            confidence=min(max(confidence, 0.0), 1.0),
        )
        return reduced.state, explanation, provenance, retries


def as_function(
    mapper: TransducibleFunction,
    reducer: TransducibleFunction,
    policy: ExecutionPolicy | None = None,
) -> TransducibleFunction:
    """Package map-then-reduce as one transducible function over collections."""
    if mapper.target != reducer.source:
        raise CompositionTypeMismatch(mapper.target.name, reducer.source.name)
    return TransducibleFunction(
        source=mapper.source,
        target=reducer.target,
        config=mapper.config,
        kernel=MapReduceKernel(mapper=mapper, reducer=reducer, policy=policy or ExecutionPolicy()),
    )


async def map_reduce(
    fn: TransducibleFunction,
    reducer: TransducibleFunction,
    xs: Sequence[State],
    policy: ExecutionPolicy | None = None,
) -> TransductionResult:
    """Map then reduce; equivalent to invoking :func:`as_function` on ``xs``."""
    return await as_function(fn, reducer, policy).invoke(list(xs))
