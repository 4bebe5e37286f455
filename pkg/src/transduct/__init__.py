"""transduct: typed record transduction with provenance and map-reduce.

Record types are semantically grounded schemas (named slots with natural
language descriptions). Transducible functions transform states between
record types and always return an explanation and a per-slot provenance map
alongside the typed output. Functions compose, run over collections with
bounded concurrency, and every invocation is traced.
"""

from .algebra import (
    compose_states,
    compose_types,
    decompose_state,
    merge_states,
    merge_types,
    project_state,
    project_type,
)
from .backend import (
    BackendConfig,
    ChatBackend,
    MockBackend,
    MockRule,
    build_prompt,
    decode_and_validate,
    envelope,
    mock_invoke,
    rules_from_file,
    rules_from_spec,
)
from .errors import TransductError
from .ingest import GENERIC_INPUT, from_csv, from_json_array, from_text
from .mapreduce import ExecutionPolicy, MapResult, as_function, map, map_reduce, reduce
from .schema import (
    BOOLEAN,
    INTEGER,
    REAL,
    TEXT,
    BasicKind,
    RecordType,
    SlotSpec,
    State,
    define_record,
    from_json,
    json_schema_of,
    list_of,
    slot,
    to_json,
    validate,
)
from .transduction import (
    Explanation,
    ProvenanceMap,
    TransducibleFunction,
    TransductionConfig,
    TransductionResult,
    With,
    compose,
    identity,
    invoke,
    lift_deterministic,
    make_transduction,
    use_backend,
)

__version__ = "0.1.0"

__all__ = [
    "BOOLEAN",
    "BackendConfig",
    "BasicKind",
    "ChatBackend",
    "ExecutionPolicy",
    "Explanation",
    "GENERIC_INPUT",
    "INTEGER",
    "MapResult",
    "MockBackend",
    "MockRule",
    "ProvenanceMap",
    "REAL",
    "RecordType",
    "SlotSpec",
    "State",
    "TEXT",
    "TransducibleFunction",
    "TransductError",
    "TransductionConfig",
    "TransductionResult",
    "With",
    "as_function",
    "build_prompt",
    "compose",
    "compose_states",
    "compose_types",
    "decode_and_validate",
    "decompose_state",
    "define_record",
    "envelope",
    "from_csv",
    "from_json",
    "from_json_array",
    "from_text",
    "identity",
    "invoke",
    "json_schema_of",
    "lift_deterministic",
    "list_of",
    "make_transduction",
    "map",
    "map_reduce",
    "merge_states",
    "merge_types",
    "mock_invoke",
    "project_state",
    "project_type",
    "reduce",
    "rules_from_file",
    "rules_from_spec",
    "slot",
    "to_json",
    "use_backend",
    "validate",
]
