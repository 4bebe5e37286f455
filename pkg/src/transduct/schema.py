"""Recursive record types, validated states, and JSON (Schema) emission.

A record type is a named, ordered set of described slots. Slot types are
built from four basic kinds (text, integer, real, boolean), lists, and nested
record types. States are validated instances; construction through
:func:`validate` is the only way to obtain one, so a ``State`` in hand is
always well-typed.

Canonical JSON is UTF-8, slot-declaration key order, no insignificant
whitespace. All serialization in the engine goes through it so digests are
stable.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Union

from .errors import (
    DuplicateSlot,
    MissingSlot,
    ParseError,
    SchemaError,
    TypeMismatch,
    UnknownSlot,
)

__all__ = [
    "BasicKind",
    "BasicType",
    "ListType",
    "SlotSpec",
    "RecordType",
    "State",
    "TypeExpr",
    "TEXT",
    "INTEGER",
    "REAL",
    "BOOLEAN",
    "list_of",
    "slot",
    "define_record",
    "validate",
    "to_json",
    "from_json",
    "json_schema_of",
    "canonical_json",
]


class BasicKind(enum.Enum):
    TEXT = "text"
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"


@dataclass(frozen=True)
class BasicType:
    kind: BasicKind

    def describe(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class ListType:
    element: "TypeExpr"

    def describe(self) -> str:
        return f"list of {self.element.describe()}"


TypeExpr = Union[BasicType, ListType, "RecordType"]

TEXT = BasicType(BasicKind.TEXT)
INTEGER = BasicType(BasicKind.INTEGER)
REAL = BasicType(BasicKind.REAL)
BOOLEAN = BasicType(BasicKind.BOOLEAN)

_KIND_SHORTHAND = {
    "text": TEXT,
    "integer": INTEGER,
    "real": REAL,
    "boolean": BOOLEAN,
}

_NAME_RE = re.compile(r"^[^\s]+$")


def list_of(element: TypeExpr) -> ListType:
    return ListType(element)


@dataclass(frozen=True)
class SlotSpec:
    """One named, described slot of a record type.

    ``enum_values`` constrains a text slot to a closed vocabulary; the
    constraint is enforced by :func:`validate` and emitted as a JSON Schema
    ``enum``, so the two stay in agreement.
    """

    name: str
    slot_type: TypeExpr
    description: str = ""
    optional: bool = False
    enum_values: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.name or not _NAME_RE.match(self.name):
            raise SchemaError(f"slot name {self.name!r} is not a valid identifier")
        if self.enum_values is not None:
            object.__setattr__(self, "enum_values", tuple(self.enum_values))
            if self.slot_type != TEXT:
                raise SchemaError(
                    f"slot {self.name!r}: enum constraint requires a text slot"
                )
            if not self.enum_values:
                raise SchemaError(f"slot {self.name!r}: enum constraint must be non-empty")


def slot(
    name: str,
    slot_type: TypeExpr | str,
    description: str = "",
    optional: bool = False,
    enum: Iterable[str] | None = None,
) -> SlotSpec:
    """Convenience constructor; accepts ``"text"`` etc. as kind shorthand."""
    if isinstance(slot_type, str):
        try:
            slot_type = _KIND_SHORTHAND[slot_type]
        except KeyError:
            raise SchemaError(f"unknown basic kind {slot_type!r}") from None
    return SlotSpec(
        name=name,
        slot_type=slot_type,
        description=description,
        optional=optional,
        enum_values=tuple(enum) if enum is not None else None,
    )


@dataclass(frozen=True)
class RecordType:
    """A named, finite, ordered record of slots. Immutable once built."""

    name: str
    slots: tuple[SlotSpec, ...]

    def __post_init__(self) -> None:
        if not self.name or not _NAME_RE.match(self.name):
            raise SchemaError(f"record type name {self.name!r} is not valid")
        object.__setattr__(self, "slots", tuple(self.slots))
        seen: set[str] = set()
        for spec in self.slots:
            if spec.name in seen:
                raise DuplicateSlot(self.name, spec.name)
            seen.add(spec.name)

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.slots)

    def slot(self, name: str) -> SlotSpec:
        for spec in self.slots:
            if spec.name == name:
                return spec
        raise UnknownSlot(name)

    def has_slot(self, name: str) -> bool:
        return any(spec.name == name for spec in self.slots)

    def structure(self) -> tuple:
        """Name-independent shape: slot names, order, types, constraints."""
        return tuple(
            (s.name, s.slot_type, s.optional, s.enum_values) for s in self.slots
        )

    def describe(self) -> str:
        return self.name

    # Operator sugar; the named functions in transduct.algebra / transduct
    # .transduction are the primary API. Imports are deferred to avoid cycles.
    def __and__(self, other: "RecordType") -> "RecordType":
        from .algebra import merge_types

        return merge_types(self, other)

    def __matmul__(self, other: "RecordType") -> "RecordType":
        # A @ B keeps B under `left` and A under `right`.
        from .algebra import compose_types

        return compose_types(other, self)

    def __lshift__(self, other) -> Any:
        from .transduction import With, make_transduction

        if isinstance(other, With):
            return make_transduction(self, other.source, other.config)
        if isinstance(other, RecordType):
            return make_transduction(self, other)
        return NotImplemented


def define_record(name: str, slots: Iterable[SlotSpec]) -> RecordType:
    """Build an immutable record type; duplicate slot names are rejected.

    Equal inputs produce equal values, so repeated definition is idempotent.
    """
    return RecordType(name=name, slots=tuple(slots))


@dataclass(frozen=True)
class State:
    """A validated instance of a record type.

    ``values`` holds every declared slot (absent optional slots as ``None``)
    with normalized representations: reals are floats, nested records are
    plain dicts in declaration order. Do not construct directly; use
    :func:`validate` or :func:`from_json`.
    """

    record_type: RecordType
    values: Mapping[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", MappingProxyType(dict(self.values)))

    def __getitem__(self, name: str) -> Any:
        if not self.record_type.has_slot(name):
            raise UnknownSlot(name)
        return self.values[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self.values.get(name, default)

    def to_plain(self) -> dict[str, Any]:
        """Deep copy of the values as plain JSON-compatible data."""
        return json.loads(to_json(self))

    def __and__(self, other: "State") -> "State":
        from .algebra import merge_states

        return merge_states(self, other)

    def __matmul__(self, other: "State") -> "State":
        from .algebra import compose_states

        return compose_states(other, self)

    def __repr__(self) -> str:
        return f"State({self.record_type.name}, {dict(self.values)!r})"


# --- validation ---------------------------------------------------------------


def _kind_name(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "real"
    if isinstance(value, str):
        return "text"
    if isinstance(value, list):
        return "list"
    if isinstance(value, Mapping):
        return "record"
    return type(value).__name__


def _check_value(value: Any, expr: TypeExpr, spec: SlotSpec | None, path: str) -> Any:
    """Validate one value against a type expression, returning the normalized form."""
    if isinstance(expr, BasicType):
        kind = expr.kind
        if kind is BasicKind.TEXT:
            if not isinstance(value, str):
                raise TypeMismatch(path, "text", _kind_name(value))
            if spec is not None and spec.enum_values is not None and value not in spec.enum_values:
                raise TypeMismatch(
                    path, "one of " + ", ".join(spec.enum_values), repr(value)
                )
            return value
        if kind is BasicKind.INTEGER:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeMismatch(path, "integer", _kind_name(value))
            return value
        if kind is BasicKind.REAL:
            # integer -> real is the one permitted coercion
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeMismatch(path, "real", _kind_name(value))
            out = float(value)
            if not math.isfinite(out):
                raise TypeMismatch(path, "finite real", repr(value))
            return out
        if not isinstance(value, bool):
            raise TypeMismatch(path, "boolean", _kind_name(value))
        return value
    if isinstance(expr, ListType):
        if not isinstance(value, list):
            raise TypeMismatch(path, "list", _kind_name(value))
        return [
            _check_value(item, expr.element, None, f"{path}[{i}]")
            for i, item in enumerate(value)
        ]
    # nested record
    if not isinstance(value, Mapping):
        raise TypeMismatch(path, f"record {expr.name}", _kind_name(value))
    return dict(_validate_mapping(value, expr, path))


def _validate_mapping(
    candidate: Mapping[str, Any], rtype: RecordType, prefix: str = ""
) -> dict[str, Any]:
    def at(name: str) -> str:
        return f"{prefix}.{name}" if prefix else name

    for key in candidate:
        if not rtype.has_slot(key):
            raise UnknownSlot(at(str(key)))
    normalized: dict[str, Any] = {}
    for spec in rtype.slots:
        value = candidate.get(spec.name)
        if value is None:
            # explicit null and absence are treated alike
            if not spec.optional:
                raise MissingSlot(at(spec.name))
            normalized[spec.name] = None
            continue
        normalized[spec.name] = _check_value(value, spec.slot_type, spec, at(spec.name))
    return normalized


def validate(candidate: Mapping[str, Any], rtype: RecordType) -> State:
    """Check a mapping against a record type and return the typed state.

    Raises exactly one of MissingSlot / TypeMismatch / UnknownSlot, naming the
    offending slot. The only value coercion applied is integer -> real.
    """
    if not isinstance(candidate, Mapping):
        raise TypeMismatch(None, f"record {rtype.name}", _kind_name(candidate))
    return State(record_type=rtype, values=_validate_mapping(candidate, rtype))


# --- canonical JSON -------------------------------------------------------------


def canonical_json(value: Any) -> str:
    """Compact, non-ASCII-preserving JSON with the dict order given."""
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def to_json(state: State) -> str:
    """Canonical JSON of a state: declaration-order keys, nulls kept."""
    return canonical_json(dict(state.values))


def from_json(text: str, rtype: RecordType) -> State:
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if not isinstance(parsed, dict):
        raise ParseError(f"top-level JSON value is {_kind_name(parsed)}, expected an object")
    return validate(parsed, rtype)


# --- JSON Schema emission ---------------------------------------------------------


def _schema_of_expr(expr: TypeExpr) -> dict[str, Any]:
    if isinstance(expr, BasicType):
        return {
            BasicKind.TEXT: {"type": "string"},
            BasicKind.INTEGER: {"type": "integer"},
            BasicKind.REAL: {"type": "number"},
            BasicKind.BOOLEAN: {"type": "boolean"},
        }[expr.kind].copy()
    if isinstance(expr, ListType):
        return {"type": "array", "items": _schema_of_expr(expr.element)}
    return _object_schema(expr)


def _object_schema(rtype: RecordType) -> dict[str, Any]:
    properties: dict[str, Any] = {}
    required: list[str] = []
    for spec in rtype.slots:
        prop = _schema_of_expr(spec.slot_type)
        if spec.enum_values is not None:
            prop["enum"] = list(spec.enum_values)
        if spec.optional:
            prop = {"anyOf": [prop, {"type": "null"}]}
        else:
            required.append(spec.name)
        if spec.description:
            prop["description"] = spec.description
        properties[spec.name] = prop
    schema: dict[str, Any] = {
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": False,
    }
    return schema


def json_schema_of(rtype: RecordType) -> dict[str, Any]:
    """JSON Schema accepting exactly the objects :func:`validate` accepts.

    Slot descriptions are embedded so schema-constrained decoders see them.
    (One draft-semantics corner: JSON Schema treats integral floats such as
    2.0 as valid integers; validate() does not.)
    """
    schema = {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": rtype.name}
    schema.update(_object_schema(rtype))
    return schema
