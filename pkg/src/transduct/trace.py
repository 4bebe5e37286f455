"""Semantic observability: an append-only record of every invocation.

Each kernel call and each composition/staging envelope becomes one
:class:`TraceRecord` holding the function descriptor, canonical input/output
JSON with digests, the explanation and provenance payloads, retry count, and
timing. Records form a forest: composed stages and reduce batches hang off
their envelope record.

Records are buffered per top-level invocation and flushed to the active sink
in structural (pre-order, stage/index-sorted) order before that invocation
returns, so ids and record order are deterministic for deterministic
pipelines regardless of task interleaving. Timestamps are the only
intentionally nondeterministic fields.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import time
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import SinkUnavailable, UnknownRecord
from .schema import canonical_json

__all__ = [
    "TraceRecord",
    "TraceSink",
    "InMemorySink",
    "JsonlSink",
    "TraceStore",
    "invocation",
    "use_sink",
    "current_sink",
    "set_default_sink",
    "record",
    "export_jsonl",
    "load_jsonl",
    "lineage",
    "Lineage",
    "digest",
]

logger = logging.getLogger(__name__)

_FIELDS = (
    "id",
    "parent_id",
    "kind",
    "function",
    "stage_index",
    "element_indices",
    "input_digest",
    "input",
    "output",
    "error",
    "explanation",
    "provenance",
    "retry_count",
    "status",
    "started",
    "ended",
)


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class TraceRecord:
    id: int
    parent_id: int | None
    kind: str
    function: dict[str, Any]
    input_digest: str
    input: str
    output: str | None
    error: dict[str, Any] | None
    explanation: dict[str, Any] | None
    provenance: dict[str, list[str]] | None
    retry_count: int
    status: str
    started: float
    ended: float
    stage_index: int | None = None
    element_indices: list[int] | None = None

    def to_obj(self) -> dict[str, Any]:
        data = {name: getattr(self, name) for name in _FIELDS}
        return data

    @classmethod
    def from_obj(cls, data: dict[str, Any]) -> "TraceRecord":
        return cls(**{name: data.get(name) for name in _FIELDS})


class TraceSink:
    """Append-only sink; assigns monotonically increasing ids per run."""

    def __init__(self) -> None:
        self._next_id = 1

    def append(self, rec: TraceRecord) -> int:
        rec.id = self._next_id
        self._next_id += 1
        self._write(rec)
        return rec.id

    def _write(self, rec: TraceRecord) -> None:
        raise NotImplementedError


class InMemorySink(TraceSink):
    """Keeps records in memory; doubles as a queryable store."""

    def __init__(self) -> None:
        super().__init__()
        self.records: list[TraceRecord] = []
        self._by_id: dict[int, TraceRecord] = {}

    def _write(self, rec: TraceRecord) -> None:
        self.records.append(rec)
        self._by_id[rec.id] = rec

    # store interface
    def get(self, record_id: int) -> TraceRecord | None:
        return self._by_id.get(record_id)

    def children(self, record_id: int) -> list[TraceRecord]:
        return [r for r in self.records if r.parent_id == record_id]


class JsonlSink(TraceSink):
    """Streams records to a JSONL file, one canonical-JSON record per line.

    ``on_error`` selects what an append failure does: ``"fail"`` raises
    SinkUnavailable and fails the originating invocation, ``"drop"`` logs a
    warning and keeps going.
    """

    def __init__(self, path: str | Path, on_error: str = "fail") -> None:
        super().__init__()
        if on_error not in ("fail", "drop"):
            raise ValueError("on_error must be 'fail' or 'drop'")
        self.path = Path(path)
        self.on_error = on_error
        try:
            self._handle: io.TextIOBase | None = open(self.path, "w", encoding="utf-8")
        except OSError as exc:
            raise SinkUnavailable(f"cannot open trace sink {self.path}: {exc}") from exc

    def _write(self, rec: TraceRecord) -> None:
        try:
            if self._handle is None:
                raise OSError("sink closed")
            self._handle.write(canonical_json(rec.to_obj()) + "\n")
            self._handle.flush()
        except (OSError, ValueError) as exc:
            if self.on_error == "drop":
                logger.warning("dropping trace record %s: %s", rec.id, exc)
                return
            raise SinkUnavailable(f"trace sink write failed: {exc}") from exc

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "JsonlSink":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


_active_sink: ContextVar[TraceSink | None] = ContextVar("transduct_trace_sink", default=None)
_module_default: TraceSink | None = None


def set_default_sink(sink: TraceSink | None) -> None:
    global _module_default
    _module_default = sink


def current_sink() -> TraceSink:
    sink = _active_sink.get()
    if sink is not None:
        return sink
    global _module_default
    if _module_default is None:
        _module_default = InMemorySink()
    return _module_default


@contextlib.contextmanager
def use_sink(sink: TraceSink) -> Iterator[TraceSink]:
    token = _active_sink.set(sink)
    try:
        yield sink
    finally:
        _active_sink.reset(token)


def record(rec: TraceRecord, sink: TraceSink | None = None) -> int:
    """Append one record to the sink, returning its assigned id."""
    return (sink or current_sink()).append(rec)


# --- invocation node tree -------------------------------------------------------


@dataclass
class InvocationNode:
    kind: str
    function: dict[str, Any]
    input_json: str
    order_key: tuple = ()
    stage_index: int | None = None
    element_indices: list[int] | None = None
    started: float = field(default_factory=time.time)
    ended: float = 0.0
    output_json: str | None = None
    error: dict[str, Any] | None = None
    explanation: dict[str, Any] | None = None
    provenance: dict[str, list[str]] | None = None
    retry_count: int = 0
    status: str = "ok"
    children: list["InvocationNode"] = field(default_factory=list)
    _seq: int = 0

    def finish(
        self,
        output_json: str | None = None,
        explanation: dict[str, Any] | None = None,
        provenance: dict[str, list[str]] | None = None,
        retry_count: int = 0,
    ) -> None:
        self.output_json = output_json
        self.explanation = explanation
        self.provenance = provenance
        self.retry_count = retry_count

    def to_record(self, parent_id: int | None) -> TraceRecord:
        return TraceRecord(
            id=0,
            parent_id=parent_id,
            kind=self.kind,
            function=self.function,
            stage_index=self.stage_index,
            element_indices=self.element_indices,
            input_digest=digest(self.input_json),
            input=self.input_json,
            output=self.output_json,
            error=self.error,
            explanation=self.explanation,
            provenance=self.provenance,
            retry_count=self.retry_count,
            status=self.status,
            started=self.started,
            ended=self.ended,
        )


_current_node: ContextVar[InvocationNode | None] = ContextVar(
    "transduct_trace_node", default=None
)


class _InvocationCtx:
    def __init__(self, node: InvocationNode):
        self.node = node
        self._token = None
        self._parent: InvocationNode | None = None

    def __enter__(self) -> InvocationNode:
        self._parent = _current_node.get()
        if self._parent is not None:
            self.node._seq = len(self._parent.children)
            self._parent.children.append(self.node)
        self._token = _current_node.set(self.node)
        return self.node

    def __exit__(self, exc_type, exc, tb) -> bool:
        _current_node.reset(self._token)
        node = self.node
        node.ended = time.time()
        if exc is not None:
            if isinstance(exc, BaseException) and exc_type is not None and issubclass(
                exc_type, (KeyboardInterrupt, SystemExit)
            ):
                node.status = "error"
            elif exc_type is not None and exc_type.__name__ == "CancelledError":
                node.status = "cancelled"
            else:
                node.status = "error"
            node.error = {"type": exc_type.__name__, "message": str(exc)}
        if self._parent is None:
            _flush_tree(node, current_sink())
        return False


def invocation(
    kind: str,
    function: dict[str, Any],
    input_json: str,
    stage_index: int | None = None,
    element_indices: list[int] | None = None,
    order_key: tuple = (),
) -> _InvocationCtx:
    """Open one trace node; nested invocations become children.

    The outermost node flushes the whole tree to the active sink on exit, in
    pre-order with children sorted by (order_key, creation sequence).
    """
    node = InvocationNode(
        kind=kind,
        function=function,
        input_json=input_json,
        stage_index=stage_index,
        element_indices=element_indices,
        order_key=order_key,
    )
    return _InvocationCtx(node)


def _flush_tree(root: InvocationNode, sink: TraceSink) -> int:
    def walk(node: InvocationNode, parent_id: int | None) -> int:
        rid = sink.append(node.to_record(parent_id))
        for child in sorted(node.children, key=lambda c: (c.order_key, c._seq)):
            walk(child, rid)
        return rid

    return walk(root, None)


# --- export / import ---------------------------------------------------------------


def export_jsonl(records: Iterable[TraceRecord], target: str | Path | io.TextIOBase) -> None:
    """Write records as newline-delimited canonical JSON, in id order."""
    lines = [canonical_json(r.to_obj()) for r in sorted(records, key=lambda r: r.id)]
    text = "".join(line + "\n" for line in lines)
    if isinstance(target, (str, Path)):
        Path(target).write_text(text, encoding="utf-8")
    else:
        target.write(text)


class TraceStore:
    """Queryable set of trace records, indexable by id and parent."""

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self.records = sorted(records, key=lambda r: r.id)
        self._by_id = {r.id: r for r in self.records}

    def get(self, record_id: int) -> TraceRecord | None:
        return self._by_id.get(record_id)

    def children(self, record_id: int) -> list[TraceRecord]:
        return [r for r in self.records if r.parent_id == record_id]

    def roots(self) -> list[TraceRecord]:
        return [r for r in self.records if r.parent_id is None]


def load_jsonl(source: str | Path | io.TextIOBase) -> TraceStore:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    records = [
        TraceRecord.from_obj(json.loads(line)) for line in text.splitlines() if line.strip()
    ]
    return TraceStore(records)


# --- lineage ------------------------------------------------------------------------


@dataclass
class Lineage:
    chain: list[TraceRecord]
    slot_closure: dict[str, list[str]]


def _compose_maps(
    outer: dict[str, set[str]], inner: dict[str, set[str]]
) -> dict[str, set[str]]:
    return {
        slot_name: set().union(*(inner.get(dep, set()) for dep in deps)) if deps else set()
        for slot_name, deps in outer.items()
    }


def _stage_union(records: list[TraceRecord]) -> dict[str, set[str]]:
    union: dict[str, set[str]] = {}
    for rec in records:
        for slot_name, deps in (rec.provenance or {}).items():
            union.setdefault(slot_name, set()).update(deps)
    return union


def lineage(store: TraceStore | InMemorySink, record_id: int) -> Lineage:
    """Ancestor chain plus the transitive input-slot evidence per output slot.

    The closure relationally composes the provenance maps of earlier stages
    found along the chain (composed chains and staged reduces); for a root
    record it is the record's own provenance.
    """
    rec = store.get(record_id)
    if rec is None:
        raise UnknownRecord(record_id)
    chain = [rec]
    closure = {name: set(deps) for name, deps in (rec.provenance or {}).items()}
    current = rec
    while current.parent_id is not None:
        parent = store.get(current.parent_id)
        if parent is None:
            break
        if parent.kind in ("composed", "reduce") and current.stage_index is not None:
            siblings = store.children(parent.id)
            for stage in range(current.stage_index - 1, -1, -1):
                stage_map = _stage_union(
                    [s for s in siblings if s.stage_index == stage]
                )
                if stage_map:
                    closure = _compose_maps(closure, stage_map)
        chain.append(parent)
        current = parent
    return Lineage(
        chain=chain,
        slot_closure={name: sorted(deps) for name, deps in closure.items()},
    )
