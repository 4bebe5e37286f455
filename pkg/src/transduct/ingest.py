"""Canonical constructors: parse generic inputs into lists of typed states.

CSV and JSON-array ingestion are pure (same bytes, same states); free-text
ingestion delegates to a backend transduction from the built-in one-slot
``GenericInput`` record. Every state produced here has passed validation.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from pathlib import Path
from typing import Any, IO, Mapping

from .errors import (
    CsvParseError,
    ElementValidationError,
    HeaderBindingFailure,
    ParseError,
    RowCoercionError,
    ValidationError,
)
from .schema import (
    BasicKind,
    BasicType,
    RecordType,
    State,
    TEXT,
    define_record,
    slot,
    validate,
)
from .transduction import TransductionConfig, TransductionResult, make_transduction

__all__ = ["GENERIC_INPUT", "from_csv", "from_json_array", "from_text"]

# G, the generic input type: free text lands here before typing.
GENERIC_INPUT = define_record(
    "GenericInput", [slot("content", TEXT, "unstructured input text")]
)


def _normalize_header(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def _coerce_cell(cell: str, spec) -> Any:
    expr = spec.slot_type
    if isinstance(expr, BasicType):
        if expr.kind is BasicKind.TEXT:
            return cell
        if expr.kind is BasicKind.INTEGER:
            return int(cell.strip())
        if expr.kind is BasicKind.REAL:
            value = float(cell.strip())
            if not math.isfinite(value):
                raise ValueError("non-finite real")
            return value
        lowered = cell.strip().lower()
        if lowered == "true":
            return True
        if lowered == "false":
            return False
        raise ValueError("expected true or false")
    # lists and nested records ride in cells as JSON
    return json.loads(cell)


def from_csv(
    source: str | Path | IO[str],
    rtype: RecordType,
    header_map: Mapping[str, str] | None = None,
) -> list[State]:
    """One state per data row, in row order.

    Columns bind to slots by case-insensitive, punctuation-stripped name
    equality unless ``header_map`` (column name -> slot name) is given.
    Unmatched non-optional slots fail the binding; extra columns are ignored.
    Empty cells become null, which only optional slots accept.
    """
    if isinstance(source, (str, Path)):
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise CsvParseError(f"cannot read {source}: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise CsvParseError(f"{source} is not UTF-8: {exc}") from exc
        handle: IO[str] = io.StringIO(text)
    else:
        handle = source
    try:
        rows = list(csv.reader(handle))
    except csv.Error as exc:
        raise CsvParseError(f"malformed CSV: {exc}") from exc
    if not rows:
        raise CsvParseError("missing header row")
    header = rows[0]

    column_of: dict[str, int] = {}
    if header_map is not None:
        for column, slot_name in header_map.items():
            if column not in header:
                raise HeaderBindingFailure(slot_name)
            column_of[slot_name] = header.index(column)
    else:
        normalized = {_normalize_header(name): i for i, name in enumerate(header)}
        for spec in rtype.slots:
            index = normalized.get(_normalize_header(spec.name))
            if index is not None:
                column_of[spec.name] = index
    for spec in rtype.slots:
        if spec.name not in column_of and not spec.optional:
            raise HeaderBindingFailure(spec.name)

    states = []
    for row_number, row in enumerate(rows[1:], start=1):
        candidate: dict[str, Any] = {}
        for spec in rtype.slots:
            index = column_of.get(spec.name)
            cell = row[index] if index is not None and index < len(row) else ""
            if cell == "":
                candidate[spec.name] = None
                continue
            try:
                candidate[spec.name] = _coerce_cell(cell, spec)
            except (ValueError, json.JSONDecodeError) as exc:
                raise RowCoercionError(
                    row_number, header[index], spec.slot_type.describe(), cell
                ) from exc
        try:
            states.append(validate(candidate, rtype))
        except ValidationError as exc:
            offending = exc.slot or ""
            column = header[column_of[offending]] if offending in column_of else offending
            raise RowCoercionError(
                row_number, column, getattr(exc, "expected", "valid value"), str(candidate.get(offending))
            ) from exc
    return states


def from_json_array(text: str, rtype: RecordType) -> list[State]:
    """Validate each element of a JSON array, preserving order."""
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if not isinstance(parsed, list):
        raise ParseError("top-level JSON value is not an array")
    states = []
    for index, element in enumerate(parsed):
        try:
            if not isinstance(element, dict):
                raise ValidationError(f"element is not an object")
            states.append(validate(element, rtype))
        except ValidationError as exc:
            raise ElementValidationError(index, exc) from exc
    return states


async def from_text(
    text: str,
    rtype: RecordType,
    backend: Any,
    config: TransductionConfig | None = None,
) -> TransductionResult:
    """Type free text by transducing ``GenericInput`` into ``rtype``."""
    fn = make_transduction(rtype, GENERIC_INPUT, config, backend=backend)
    state = validate({"content": text}, GENERIC_INPUT)
    return await fn.invoke(state)
