"""Workflow runner: validate and execute workflow files, inspect traces.

Exit codes: 0 success, 1 validation/execution failure, 2 configuration or
usage problems (missing rules file, unset API key, bad flag values).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import trace
from .backend import ChatBackend, MockBackend, resolve_api_key, rules_from_file
from .errors import TransductError, UnknownRecord
from .schema import canonical_json
from .workflow import check_workflow, run_workflow

__all__ = ["main", "cmd_validate", "cmd_run", "cmd_trace"]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transduct", description="typed transduction workflow runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a workflow file without running it")
    p_validate.add_argument("workflow", type=Path)

    p_run = sub.add_parser("run", help="execute a workflow")
    p_run.add_argument("workflow", type=Path)
    p_run.add_argument("--backend", choices=["mock", "http"], default="mock")
    p_run.add_argument("--rules", type=Path, help="mock rules file (required with --backend mock)")
    p_run.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p_run.add_argument("--trace", type=Path, help="trace JSONL path (default: <out>/trace.jsonl)")
    p_run.add_argument("--max-concurrency", type=int)
    p_run.add_argument("--batch-size", type=int)

    p_trace = sub.add_parser("trace", help="inspect a trace file")
    p_trace.add_argument("action", choices=["show", "lineage"])
    p_trace.add_argument("tracefile", type=Path)
    p_trace.add_argument("record_id", nargs="?", type=int)
    return parser


def cmd_validate(workflow: Path) -> int:
    wf, diagnostics = check_workflow(workflow)
    for line in diagnostics:
        print(line, file=sys.stderr)
    if wf is None:
        return 1
    print(
        f"{wf.name}: {len(wf.types)} types, {len(wf.sources)} sources, "
        f"{len(wf.functions)} functions, {len(wf.stages)} stages: ok"
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    wf, diagnostics = check_workflow(args.workflow)
    if wf is None:
        for line in diagnostics:
            print(line, file=sys.stderr)
        return 1

    policy = wf.policy
    try:
        if args.max_concurrency is not None:
            policy = replace(policy, max_concurrency=args.max_concurrency)
        if args.batch_size is not None:
            policy = replace(policy, batch_size=args.batch_size)
    except ValueError as exc:
        print(f"invalid policy: {exc}", file=sys.stderr)
        return 2

    if args.backend == "mock":
        if args.rules is None:
            print("--backend mock requires --rules", file=sys.stderr)
            return 2
        try:
            client = MockBackend(rules_from_file(args.rules))
        except TransductError as exc:
            print(str(exc), file=sys.stderr)
            return 2
    else:
        try:
            resolve_api_key(wf.backend)
        except TransductError as exc:
            print(str(exc), file=sys.stderr)
            return 2
        client = ChatBackend(wf.backend)

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = args.trace or out_dir / "trace.jsonl"
    sink = trace.InMemorySink()
    try:
        outcome = asyncio.run(
            run_workflow(
                wf, client, policy, sink=sink, honor_stage_batch=args.batch_size is None
            )
        )
    except TransductError as exc:
        trace.export_jsonl(sink.records, trace_path)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    output_path = out_dir / wf.output_path
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(
        "[" + ",".join(canonical_json(dict(s.values)) for s in outcome.states) + "]\n",
        encoding="utf-8",
    )
    trace.export_jsonl(sink.records, trace_path)
    if outcome.errors:
        (out_dir / "errors.json").write_text(
            canonical_json(outcome.errors) + "\n", encoding="utf-8"
        )
        print(
            f"completed with {len(outcome.errors)} element error(s); "
            f"partial output in {output_path}",
            file=sys.stderr,
        )
        return 1
    print(f"wrote {output_path} and {trace_path}")
    return 0


def _show(store: trace.TraceStore, record_id: int | None) -> int:
    if record_id is not None:
        rec = store.get(record_id)
        if rec is None:
            raise UnknownRecord(record_id)
        print(json.dumps(rec.to_obj(), indent=2, ensure_ascii=False))
        return 0
    for rec in store.records:
        parent = f" parent={rec.parent_id}" if rec.parent_id is not None else ""
        stage = f" stage={rec.stage_index}" if rec.stage_index is not None else ""
        print(
            f"#{rec.id}{parent} {rec.kind} {rec.function.get('name', '')} "
            f"status={rec.status} retries={rec.retry_count}{stage}"
        )
    return 0


def _lineage(store: trace.TraceStore, record_id: int | None) -> int:
    if record_id is None:
        print("trace lineage requires a record id", file=sys.stderr)
        return 2
    info = trace.lineage(store, record_id)
    print("chain (record -> root):")
    for rec in info.chain:
        print(f"  #{rec.id} {rec.kind} {rec.function.get('name', '')} status={rec.status}")
    print("evidence closure per output slot:")
    if not info.slot_closure:
        print("  (none recorded)")
    for name, deps in info.slot_closure.items():
        print(f"  {name} <- {', '.join(deps) if deps else '(empty)'}")
    return 0


def cmd_trace(action: str, tracefile: Path, record_id: int | None) -> int:
    store = trace.load_jsonl(tracefile)
    if action == "show":
        return _show(store, record_id)
    return _lineage(store, record_id)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.workflow)
        if args.command == "run":
            return cmd_run(args)
        return cmd_trace(args.action, args.tracefile, args.record_id)
    except TransductError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
