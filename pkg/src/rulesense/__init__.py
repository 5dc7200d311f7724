"""Forward-chaining rule engine plus a sensor-fusion pipeline built on it:
sensor replay files in, location facts and timed corridor traversals out,
answered through named queries, a CLI, and a JSON service."""

from .facts import (
    DuplicateSlot,
    DuplicateTemplate,
    Fact,
    KbError,
    NIL,
    Symbol,
    Template,
    TemplateRegistry,
    UnknownSlot,
    UnknownTemplate,
    facts_equal,
    is_slot_value,
    make_fact,
    value_key,
    values_equal,
)
from .lang import (
    Diagnostic,
    LexError,
    ParseError,
    format_construct,
    format_program,
    parse_program,
    validate_program,
)
from .engine import (
    AssertResult,
    DuplicateRuleName,
    Engine,
    ExplainNode,
    FireLogEntry,
    MissingParameter,
    NotDerived,
    QueryRow,
    RunResult,
    RuntimeEvalError,
    UnknownFactId,
    UnknownParameter,
    UnknownQuery,
    ValidationFailed,
    WmView,
    WouldDuplicate,
    firelog_to_jsonl,
    load_kb,
    replay_firelog,
    wm_to_canonical_json,
)
from .ingest import (
    DUMMY_LOC,
    DuplicateDevice,
    FeedStats,
    MalformedRecord,
    MalformedRegistry,
    Registry,
    SensorRecord,
    Skip,
    bootstrap,
    initial_facts,
    load_registry,
    parse_record,
    replay,
    translate,
)
from .simulator import InvalidScenario, Lcg, Scenario, generate, load_scenario, true_traversals
from .tracking import (
    JourneyRow,
    build_tracking_kb,
    history_rows,
    journey_rows,
    load_engine,
    run_pipeline,
    shaped_query,
    where_rows,
)
from .service import QueryService, ServiceConfig, query_service

__version__ = "0.1.0"
