"""Declarative workflows: inline type declarations, data-source bindings, and
a linear stage pipeline, loaded from a single JSON document.

Sources are ingested per binding and flow through the stages as groups. A
``map`` or ``compose`` stage applies pointwise within each group; a
``reduce`` stage aggregates each group to one state while several groups
exist (evidence per source), and aggregates the whole collection once only
one group remains. ``WORKFLOW_SCHEMA`` is the published document schema.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema

from . import mapreduce as mr
from . import trace
from .backend import BackendConfig
from .errors import CyclicType, SchemaError, TransductError, WorkflowError
from .ingest import from_csv, from_json_array
from .mapreduce import ExecutionPolicy, MapItemFailure
from .schema import (
    BOOLEAN,
    INTEGER,
    REAL,
    TEXT,
    RecordType,
    SlotSpec,
    State,
    TypeExpr,
    canonical_json,
    define_record,
    list_of,
    to_json,
)
from .schema import slot as make_slot
from .transduction import (
    TransducibleFunction,
    TransductionConfig,
    compose,
    make_transduction,
    use_backend,
)

__all__ = [
    "WORKFLOW_SCHEMA",
    "WorkflowDefinition",
    "SourceBinding",
    "Stage",
    "load_workflow",
    "check_workflow",
    "run_workflow",
    "RunOutcome",
]

_BASIC_KINDS = ["text", "integer", "real", "boolean"]

WORKFLOW_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "transduct_workflow",
    "$defs": {
        "type_expr": {
            "oneOf": [
                {"type": "string", "enum": _BASIC_KINDS},
                {
                    "type": "object",
                    "properties": {"list": {"$ref": "#/$defs/type_expr"}},
                    "required": ["list"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"record": {"type": "string"}},
                    "required": ["record"],
                    "additionalProperties": False,
                },
            ]
        },
        "slot": {
            "type": "object",
            "properties": {
                "name": {"type": "string"},
                "type": {"$ref": "#/$defs/type_expr"},
                "description": {"type": "string"},
                "optional": {"type": "boolean"},
                "enum": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
            "required": ["name", "type"],
            "additionalProperties": False,
        },
        "config": {
            "type": "object",
            "properties": {
                "model": {"type": "string"},
                "temperature": {"type": "number", "minimum": 0},
                "explanation_requested": {"type": "boolean"},
                "max_retries": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
    },
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "backend": {
            "type": "object",
            "properties": {
                "endpoint": {"type": "string"},
                "model": {"type": "string"},
                "temperature": {"type": "number", "minimum": 0},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "api_key_env": {"type": "string"},
                "max_retries": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "policy": {
            "type": "object",
            "properties": {
                "max_concurrency": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 2},
                "failure_mode": {"type": "string", "enum": ["collect", "fail_fast"]},
            },
            "additionalProperties": False,
        },
        "types": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {"slots": {"type": "array", "items": {"$ref": "#/$defs/slot"}}},
                "required": ["slots"],
                "additionalProperties": False,
            },
        },
        "sources": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "path": {"type": "string"},
                    "format": {"type": "string", "enum": ["csv", "json"]},
                    "type": {"type": "string"},
                },
                "required": ["name", "path", "format", "type"],
                "additionalProperties": False,
            },
        },
        "functions": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "target": {"type": "string"},
                    "source": {"type": "string"},
                    "instructions": {"type": "string"},
                    "config": {"$ref": "#/$defs/config"},
                },
                "required": ["target", "source"],
                "additionalProperties": False,
            },
        },
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "properties": {
                            "kind": {"type": "string", "enum": ["map", "reduce"]},
                            "function": {"type": "string"},
                        },
                        "required": ["kind", "function"],
                        "additionalProperties": False,
                    },
                    {
                        "type": "object",
                        "properties": {
                            "kind": {"type": "string", "enum": ["compose"]},
                            "functions": {
                                "type": "array",
                                "items": {"type": "string"},
                                "minItems": 1,
                            },
                        },
                        "required": ["kind", "functions"],
                        "additionalProperties": False,
                    },
                ]
            },
        },
        "output": {
            "type": "object",
            "properties": {"path": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "required": ["name", "types", "sources", "functions", "stages"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class SourceBinding:
    name: str
    path: Path
    format: str
    rtype: RecordType


@dataclass(frozen=True)
class Stage:
    kind: str
    functions: tuple[TransducibleFunction, ...]
    label: str
    batch_size: int | None = None  # per-function staging override, if declared

    def chained(self) -> TransducibleFunction:
        chain = self.functions[0]
        for fn in self.functions[1:]:
            chain = compose(fn, chain)
        return chain


@dataclass
class WorkflowDefinition:
    name: str
    types: dict[str, RecordType]
    sources: list[SourceBinding]
    functions: dict[str, TransducibleFunction]
    stages: list[Stage]
    output_path: str
    backend: BackendConfig
    policy: ExecutionPolicy
    base_dir: Path


_BASIC_BY_NAME = {"text": TEXT, "integer": INTEGER, "real": REAL, "boolean": BOOLEAN}


def _build_types(decls: dict[str, Any], diagnostics: list[str]) -> dict[str, RecordType]:
    resolved: dict[str, RecordType] = {}
    visiting: list[str] = []

    def build_expr(expr: Any) -> TypeExpr:
        if isinstance(expr, str):
            return _BASIC_BY_NAME[expr]
        if "list" in expr:
            return list_of(build_expr(expr["list"]))
        return resolve(expr["record"])

    def resolve(name: str) -> RecordType:
        if name in resolved:
            return resolved[name]
        if name in visiting:
            raise CyclicType(visiting[visiting.index(name):] + [name])
        if name not in decls:
            raise WorkflowError(f"type {name!r} is referenced but never declared")
        visiting.append(name)
        specs: list[SlotSpec] = []
        for slot_doc in decls[name]["slots"]:
            specs.append(
                make_slot(
                    slot_doc["name"],
                    build_expr(slot_doc["type"]),
                    description=slot_doc.get("description", ""),
                    optional=slot_doc.get("optional", False),
                    enum=slot_doc.get("enum"),
                )
            )
        visiting.pop()
        resolved[name] = define_record(name, specs)
        return resolved[name]

    for name in decls:
        try:
            resolve(name)
        except (CyclicType, SchemaError, WorkflowError) as exc:
            diagnostics.append(f"type {name!r}: {exc}")
    return resolved


def _parse(doc: dict[str, Any], base_dir: Path, diagnostics: list[str]) -> WorkflowDefinition | None:
    validator = jsonschema.Draft202012Validator(WORKFLOW_SCHEMA)
    schema_errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    for err in schema_errors:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        diagnostics.append(f"schema: {where}: {err.message}")
    if schema_errors:
        return None

    types = _build_types(doc["types"], diagnostics)

    functions: dict[str, TransducibleFunction] = {}
    for name, decl in doc["functions"].items():
        missing = [t for t in (decl["source"], decl["target"]) if t not in types]
        if missing:
            diagnostics.append(f"function {name!r}: unknown type(s) {', '.join(missing)}")
            continue
        try:
            config = TransductionConfig(
                instructions=decl.get("instructions", ""), **decl.get("config", {})
            )
        except (ValueError, TransductError) as exc:
            diagnostics.append(f"function {name!r}: {exc}")
            continue
        functions[name] = make_transduction(types[decl["target"]], types[decl["source"]], config)

    sources: list[SourceBinding] = []
    for src in doc["sources"]:
        if src["type"] not in types:
            diagnostics.append(f"source {src['name']!r}: unknown type {src['type']!r}")
            continue
        path = (base_dir / src["path"]).resolve()
        if not path.is_file():
            diagnostics.append(f"source {src['name']!r}: data file not found: {path}")
        sources.append(SourceBinding(src["name"], path, src["format"], types[src["type"]]))

    stages: list[Stage] = []
    for index, st in enumerate(doc["stages"]):
        names = [st["function"]] if "function" in st else list(st["functions"])
        unknown = [n for n in names if n not in functions]
        if unknown:
            diagnostics.append(f"stage {index}: unknown function(s) {', '.join(unknown)}")
            continue
        declared = doc["functions"][names[-1]].get("config", {})
        stages.append(
            Stage(
                kind=st["kind"],
                functions=tuple(functions[n] for n in names),
                label=f"stage {index}",
                batch_size=declared.get("batch_size"),
            )
        )

    if diagnostics:
        return None

    wf = WorkflowDefinition(
        name=doc["name"],
        types=types,
        sources=sources,
        functions=functions,
        stages=stages,
        output_path=doc.get("output", {}).get("path", "output.json"),
        backend=BackendConfig(**doc.get("backend", {})),
        policy=ExecutionPolicy(**doc.get("policy", {})),
        base_dir=base_dir,
    )
    diagnostics.extend(_check_wiring(wf))
    return None if diagnostics else wf


def _check_wiring(wf: WorkflowDefinition) -> list[str]:
    """Type-check the stage pipeline without executing anything."""
    problems: list[str] = []
    element_types = {s.rtype.name for s in wf.sources}
    if len(element_types) > 1:
        problems.append(f"sources bind to differing types: {', '.join(sorted(element_types))}")
        return problems
    current = wf.sources[0].rtype
    for stage in wf.stages:
        if stage.kind == "compose":
            chain = stage.functions
            for first, second in zip(chain, chain[1:]):
                if first.target != second.source:
                    problems.append(
                        f"{stage.label}: chain breaks at {first.target.name} -> {second.source.name}"
                    )
            fn_in, fn_out = chain[0].source, chain[-1].target
        else:
            fn_in, fn_out = stage.functions[0].source, stage.functions[0].target
        if fn_in != current:
            problems.append(
                f"{stage.label} ({stage.kind}): expects {fn_in.name}, pipeline carries {current.name}"
            )
        current = fn_out
    return problems


def load_workflow(path: str | Path) -> WorkflowDefinition:
    """Parse and fully check a workflow file; raises WorkflowError when dirty."""
    wf, diagnostics = check_workflow(path)
    if wf is None:
        raise WorkflowError("; ".join(diagnostics) or "invalid workflow")
    return wf


def check_workflow(path: str | Path) -> tuple[WorkflowDefinition | None, list[str]]:
    """All diagnostics for a workflow file; clean iff the list is empty."""
    path = Path(path)
    diagnostics: list[str] = []
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        return None, [f"cannot read workflow file: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"workflow file is not valid JSON: {exc}"]
    wf = _parse(doc, path.parent, diagnostics)
    return wf, diagnostics


# --- execution -------------------------------------------------------------------


@dataclass
class RunOutcome:
    states: list[State]
    errors: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _load_source(binding: SourceBinding) -> list[State]:
    if binding.format == "csv":
        return from_csv(binding.path, binding.rtype)
    return from_json_array(binding.path.read_text(encoding="utf-8"), binding.rtype)


async def run_workflow(
    wf: WorkflowDefinition,
    backend_client: Any,
    policy: ExecutionPolicy | None = None,
    sink: trace.TraceSink | None = None,
    honor_stage_batch: bool = True,
) -> RunOutcome:
    """Execute the pipeline under one run-level trace node.

    A reduce stage whose function declares its own batch_size stages with it
    unless ``honor_stage_batch`` is off (the CLI turns it off when the batch
    size is forced from the command line). Map-stage failures in collect mode
    stop the pipeline after the stage completes; the successful states and the
    error descriptions are both in the outcome (partial results are never
    silently dropped or reduced).
    """
    policy = policy or wf.policy

    def stage_policy(stage: Stage) -> ExecutionPolicy:
        if honor_stage_batch and stage.batch_size is not None:
            return replace(policy, batch_size=stage.batch_size)
        return policy

    groups = [_load_source(binding) for binding in wf.sources]
    errors: list[dict[str, Any]] = []

    def describe_failure(stage: Stage, group_name: str, failure: MapItemFailure) -> dict[str, Any]:
        return {
            "stage": stage.label,
            "source": group_name,
            "index": failure.index,
            "error": type(failure.error).__name__,
            "message": str(failure.error),
        }

    sink_ctx = trace.use_sink(sink) if sink is not None else contextlib.nullcontext()
    with sink_ctx:
        with use_backend(backend_client):
            run_node = trace.invocation(
                kind="run",
                function={
                    "name": wf.name,
                    "source": wf.sources[0].rtype.name,
                    "target": wf.stages[-1].functions[-1].target.name,
                    "kernel": "run",
                    "model": "",
                    "instructions_digest": trace.digest(""),
                },
                input_json=canonical_json(
                    {"sources": {b.name: len(g) for b, g in zip(wf.sources, groups)}}
                ),
            )
            with run_node as node:
                names = [binding.name for binding in wf.sources]
                for stage in wf.stages:
                    if stage.kind in ("map", "compose"):
                        fn = stage.functions[0] if stage.kind == "map" else stage.chained()
                        next_groups: list[list[State]] = []
                        for name, group in zip(names, groups):
                            result = await mr.map(fn, group, policy)
                            for failure in result.failures:
                                errors.append(describe_failure(stage, name, failure))
                            next_groups.append(
                                [
                                    item.state
                                    for item in result.items
                                    if not isinstance(item, MapItemFailure)
                                ]
                            )
                        groups = next_groups
                        if errors:
                            break
                    else:
                        fn = stage.functions[0]
                        effective = stage_policy(stage)
                        if len(groups) > 1:
                            reduced = [await mr.reduce(fn, g, effective) for g in groups]
                            groups = [[r.state for r in reduced]]
                            names = ["all"]
                        else:
                            result = await mr.reduce(fn, groups[0], effective)
                            groups = [[result.state]]
                final = [state for group in groups for state in group]
                node.finish(output_json="[" + ",".join(to_json(s) for s in final) + "]")
    return RunOutcome(states=final, errors=errors)
