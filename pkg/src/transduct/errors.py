"""Exception taxonomy shared across the engine.

Every failure surfaces as a subclass of :class:`TransductError` carrying the
structured detail (slot name, row/column, attempt count) the failure is about,
so callers can dispatch without parsing messages.
"""

from __future__ import annotations


class TransductError(Exception):
    """Base class for all engine errors."""


# --- record types and validation -------------------------------------------

class SchemaError(TransductError):
    """Malformed type definition."""


class DuplicateSlot(SchemaError):
    def __init__(self, record: str, slot: str):
        super().__init__(f"record type {record!r} declares slot {slot!r} more than once")
        self.record = record
        self.slot = slot


class CyclicType(SchemaError):
    def __init__(self, names: list[str]):
        super().__init__(f"record type references form a cycle: {' -> '.join(names)}")
        self.names = names


class ValidationError(TransductError):
    """A candidate value does not fit its declared record type."""

    slot: str | None = None


class MissingSlot(ValidationError):
    def __init__(self, slot: str):
        super().__init__(f"required slot {slot!r} is missing or null")
        self.slot = slot


class TypeMismatch(ValidationError):
    def __init__(self, slot: str | None, expected: str, found: str):
        where = f"slot {slot!r}" if slot is not None else "input state"
        super().__init__(f"{where}: expected {expected}, found {found}")
        self.slot = slot
        self.expected = expected
        self.found = found


class UnknownSlot(ValidationError):
    def __init__(self, slot: str):
        super().__init__(f"slot {slot!r} is not declared by the record type")
        self.slot = slot


class ParseError(TransductError):
    def __init__(self, detail: str):
        super().__init__(f"cannot parse input: {detail}")
        self.detail = detail


# --- type algebra -----------------------------------------------------------

class SlotTypeConflict(TransductError):
    def __init__(self, slot: str):
        super().__init__(f"slot {slot!r} has conflicting types across the merged records")
        self.slot = slot


class EmptyProjection(TransductError):
    def __init__(self):
        super().__init__("projection slot set must be non-empty")


# --- transducible functions --------------------------------------------------

class CompositionTypeMismatch(TransductError):
    def __init__(self, produced: str, expected: str):
        super().__init__(
            f"cannot chain: first function produces {produced!r}, second consumes {expected!r}"
        )
        self.produced = produced
        self.expected = expected


class KernelOutputInvalid(TransductError):
    def __init__(self, cause: Exception):
        super().__init__(f"kernel produced an invalid output state: {cause}")
        self.cause = cause


class UnsupportedFeature(TransductError):
    pass


# --- backend ------------------------------------------------------------------

class BackendError(TransductError):
    pass


class SchemaViolation(BackendError):
    """Backend output failed validation against the target type."""

    def __init__(self, detail: str, slot: str | None = None, attempts: int = 1):
        super().__init__(f"backend output invalid: {detail}")
        self.detail = detail
        self.slot = slot
        self.attempts = attempts


class InvalidProvenance(BackendError):
    def __init__(self, detail: str):
        super().__init__(f"invalid provenance: {detail}")
        self.detail = detail


class InvalidConfidence(BackendError):
    def __init__(self, value: object):
        super().__init__(f"confidence must be a number in [0, 1], got {value!r}")
        self.value = value


class TransportError(BackendError):
    pass


class Timeout(TransportError):
    pass


class BackendUnavailable(BackendError):
    pass


class NoMatchingRule(BackendError):
    def __init__(self, source: str, target: str):
        super().__init__(f"no mock rule matches {target!r} << {source!r}")
        self.source = source
        self.target = target


# --- map-reduce ----------------------------------------------------------------

class EmptyCollection(TransductError):
    def __init__(self):
        super().__init__("reduce requires a non-empty collection")


# --- ingestion -------------------------------------------------------------------

class IngestError(TransductError):
    pass


class HeaderBindingFailure(IngestError):
    def __init__(self, slot: str):
        super().__init__(f"no CSV column binds to required slot {slot!r}")
        self.slot = slot


class RowCoercionError(IngestError):
    def __init__(self, row: int, column: str, expected: str, cell: str):
        super().__init__(
            f"row {row}, column {column!r}: cannot coerce {cell!r} to {expected}"
        )
        self.row = row
        self.column = column
        self.expected = expected
        self.cell = cell


class CsvParseError(IngestError):
    pass


class ElementValidationError(IngestError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"element at index {index} is invalid: {cause}")
        self.index = index
        self.cause = cause


# --- tracing ----------------------------------------------------------------------

class SinkUnavailable(TransductError):
    pass


class UnknownRecord(TransductError):
    def __init__(self, record_id: int):
        super().__init__(f"no trace record with id {record_id}")
        self.record_id = record_id


# --- workflows ---------------------------------------------------------------------

class WorkflowError(TransductError):
    pass
