"""tooldriver: staged LLM-agent automation for program-analysis tooling."""

from .task import (
    Action,
    ActionKind,
    Budget,
    CycleRecord,
    Observation,
    OutcomeStatus,
    ProjectSpec,
    Stage,
    TaskOutcome,
    TaskSpec,
    ToolSpec,
    parse_manifest,
    serialize_manifest,
    validate_task,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionKind",
    "Budget",
    "CycleRecord",
    "Observation",
    "OutcomeStatus",
    "ProjectSpec",
    "Stage",
    "TaskOutcome",
    "TaskSpec",
    "ToolSpec",
    "parse_manifest",
    "serialize_manifest",
    "validate_task",
    "__version__",
]
