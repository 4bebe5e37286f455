"""Type operators: merge, projection, composition, on types and on states.

All three are pure functions over immutable inputs. Value-level conflict
resolution in merge is fixed to the LEFT operand: where both states define a
slot non-null, the left value wins; a null on the left is filled from the
right.
"""

from __future__ import annotations

import weakref
from typing import Iterable

from .errors import EmptyProjection, SlotTypeConflict, UnknownSlot
from .schema import RecordType, SlotSpec, State, define_record, validate

# Remembers which record a projection came from, so projecting a projection
# names (and equals) the direct projection of the original: the law
# project(project(x, S1), S2) == project(x, S2) holds exactly.
_projection_base: "weakref.WeakKeyDictionary[RecordType, str]" = weakref.WeakKeyDictionary()

__all__ = [
    "merge_types",
    "merge_states",
    "project_type",
    "project_state",
    "compose_types",
    "compose_states",
    "decompose_state",
]


def merge_types(x: RecordType, y: RecordType) -> RecordType:
    """All slots of both records: x's slots in order, then y's new ones.

    Shared names must agree on type; x's description and flags win. Returns x
    itself when y adds nothing, so ``merge_types(x, x) is x``.
    """
    by_name = {spec.name: spec for spec in x.slots}
    for spec in y.slots:
        if spec.name in by_name and by_name[spec.name].slot_type != spec.slot_type:
            raise SlotTypeConflict(spec.name)
    merged = list(x.slots) + [spec for spec in y.slots if spec.name not in by_name]
    if tuple(merged) == x.slots:
        return x
    return define_record(f"({x.name}&{y.name})", merged)


def merge_states(x: State, y: State) -> State:
    """Merge two states under merge_types; left value wins on shared slots.

    A slot null on the left and defined on the right takes the right's value.
    """
    merged_type = merge_types(x.record_type, y.record_type)
    values = {}
    for spec in merged_type.slots:
        if x.record_type.has_slot(spec.name):
            value = x.values[spec.name]
            if value is None and y.record_type.has_slot(spec.name):
                value = y.values[spec.name]
        else:
            value = y.values[spec.name]
        values[spec.name] = value
    return validate(values, merged_type)


def _as_name_set(names: Iterable[str]) -> set[str]:
    return set(names)


def project_type(x: RecordType, keep: Iterable[str]) -> RecordType:
    """Restrict x to the given slots, preserving declaration order."""
    wanted = _as_name_set(keep)
    if not wanted:
        raise EmptyProjection()
    for name in sorted(wanted):
        if not x.has_slot(name):
            raise UnknownSlot(name)
    kept = [spec for spec in x.slots if spec.name in wanted]
    if len(kept) == len(x.slots):
        return x
    base = _projection_base.get(x, x.name)
    label = ",".join(spec.name for spec in kept)
    projected = define_record(f"({base}[{label}])", kept)
    _projection_base[projected] = base
    return projected


def project_state(x: State, keep: Iterable[str]) -> State:
    projected = project_type(x.record_type, keep)
    if projected is x.record_type:
        return x
    return validate({s.name: x.values[s.name] for s in projected.slots}, projected)


def compose_types(x: RecordType, y: RecordType) -> RecordType:
    """Pair two records under ``left`` / ``right`` slots.

    ``compose_types(x, y)`` yields ``{left: x, right: y}``; the ``@`` operator
    maps ``A @ B`` to ``compose_types(B, A)``, i.e. the left slot holds the
    right-hand operand.
    """
    return define_record(
        f"({y.name}@{x.name})",
        [
            SlotSpec(name="left", slot_type=x, description=f"the {x.name} operand"),
            SlotSpec(name="right", slot_type=y, description=f"the {y.name} operand"),
        ],
    )


def compose_states(x: State, y: State) -> State:
    """Nest two states unchanged under a composed pair type."""
    pair = compose_types(x.record_type, y.record_type)
    return validate({"left": dict(x.values), "right": dict(y.values)}, pair)


def decompose_state(pair: State) -> tuple[State, State]:
    """Recover the two operands of a composed state (left first)."""
    left_spec = pair.record_type.slot("left")
    right_spec = pair.record_type.slot("right")
    if not isinstance(left_spec.slot_type, RecordType) or not isinstance(
        right_spec.slot_type, RecordType
    ):
        raise UnknownSlot("left")
    return (
        validate(pair.values["left"], left_spec.slot_type),
        validate(pair.values["right"], right_spec.slot_type),
    )
