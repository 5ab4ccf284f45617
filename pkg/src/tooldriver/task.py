"""Task model: tool/project specs, budgets, stages, actions, trajectories.

Everything here is plain immutable data shared by the rest of the system.
The manifest format (YAML with ``tools``/``projects``/``tasks``/``budget``
sections) and the one-record-per-line trajectory log are defined at the
bottom of the module.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum, IntEnum
from typing import Any, Collection, Iterable

import yaml

from .errors import FieldError, InvariantError, ManifestError, UnknownProfileError

TRAJECTORY_SCHEMA_VERSION = 1

DEFAULT_MAX_CYCLES = 120
DEFAULT_COST_CAP = Decimal("2.00")
DEFAULT_WALL_CLOCK_LIMIT = 7200.0  # seconds
DEFAULT_MAX_ATTEMPTS = 3


class Ecosystem(str, Enum):
    C_CPP = "c_cpp"
    JAVA = "java"
    OTHER = "other"


class Stage(IntEnum):
    """The four workflow phases, totally ordered; transitions go forward one
    step at a time."""

    DOCKER_SETUP = 1
    TOOL_SETUP = 2
    PROJECT_SETUP = 3
    ANALYSIS_RUN = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Stage":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown stage label: {label!r}") from None

    def next(self) -> "Stage":
        if self is Stage.ANALYSIS_RUN:
            raise ValueError("analysis_run is the final stage")
        return Stage(self.value + 1)


class ActionKind(str, Enum):
    WRITE_FILE = "write_file"
    READ_FILE = "read_file"
    RUN_COMMAND = "run_command"
    DECLARE_STAGE_DONE = "declare_stage_done"
    SUBMIT_RESULT = "submit_result"


class OutcomeStatus(str, Enum):
    SELF_VALIDATED = "self_validated"
    FAILED_BUDGET = "failed_budget"
    FAILED_REJECTED = "failed_rejected"
    FAILED_ERROR = "failed_error"


@dataclass(frozen=True)
class ToolSpec:
    """An analysis tool: how to get it and which evidence profile applies."""

    name: str
    acquisition: str
    language_ecosystem: Ecosystem = Ecosystem.OTHER
    evidence_profile: str = ""

    def __post_init__(self) -> None:
        if not self.evidence_profile:
            object.__setattr__(self, "evidence_profile", self.name)

    def check(self) -> None:
        if not self.name:
            raise InvariantError("tool name must be non-empty")
        source = self.acquisition.strip()
        if not source or len(source.split()) != 1:
            raise InvariantError(
                f"tool {self.name!r}: acquisition must name exactly one source"
            )


@dataclass(frozen=True)
class ProjectSpec:
    """Target project pinned to an immutable revision."""

    repo_url: str
    pinned_revision: str

    @property
    def name(self) -> str:
        """Directory-style name derived from the repository URL."""
        tail = self.repo_url.rstrip("/").rsplit("/", 1)[-1]
        return tail[:-4] if tail.endswith(".git") else tail

    def check(self) -> None:
        if not self.repo_url:
            raise InvariantError("project repo_url must be non-empty")
        if not self.pinned_revision:
            raise FieldError("pinned_revision required")


@dataclass(frozen=True)
class Budget:
    """Per-task limits; reaching any one of them terminates the task as
    failed."""

    max_cycles: int = DEFAULT_MAX_CYCLES
    cost_cap: Decimal = DEFAULT_COST_CAP
    wall_clock_limit: float = DEFAULT_WALL_CLOCK_LIMIT

    def check(self) -> None:
        if self.max_cycles <= 0:
            raise InvariantError("max_cycles must be strictly positive")
        if self.cost_cap <= 0:
            raise InvariantError("cost_cap must be strictly positive")
        if self.wall_clock_limit <= 0:
            raise InvariantError("wall_clock_limit must be strictly positive")


@dataclass(frozen=True)
class Action:
    """One agent action; exactly one kind, payload complete for that kind."""

    kind: ActionKind
    path: str | None = None
    content: str | None = None
    command: str | None = None
    timeout: float | None = None

    def check(self) -> None:
        kind = self.kind
        if kind is ActionKind.WRITE_FILE:
            if not self.path or self.content is None:
                raise InvariantError("write_file needs path and content")
        elif kind is ActionKind.READ_FILE:
            if not self.path:
                raise InvariantError("read_file needs path")
        elif kind is ActionKind.RUN_COMMAND:
            if not self.command or not self.command.strip():
                raise InvariantError("run_command needs a command string")
            if self.timeout is not None and self.timeout <= 0:
                raise InvariantError("run_command timeout must be positive")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        for key in ("path", "content", "command", "timeout"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Action":
        try:
            kind = ActionKind(str(data["kind"]))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad action kind: {data.get('kind')!r}") from exc
        timeout = data.get("timeout")
        action = cls(
            kind=kind,
            path=_opt_str(data.get("path")),
            content=_opt_str(data.get("content")),
            command=_opt_str(data.get("command")),
            timeout=float(timeout) if timeout is not None else None,
        )
        action.check()
        return action


def _opt_str(value: Any) -> str | None:
    if value is None:
        return None
    return value if isinstance(value, str) else str(value)


@dataclass(frozen=True)
class Observation:
    """Condensed result of one executed (or rejected) action."""

    condensed_output: str
    exit_code: int | None = None
    raw_output_ref: str | None = None
    duration: float = 0.0
    rejected: bool = False
    rejection_reason: str | None = None

    def __post_init__(self) -> None:
        if self.rejected:
            if not self.rejection_reason:
                raise InvariantError("rejected observation needs a reason")
            if self.exit_code is not None:
                raise InvariantError("rejected observation cannot carry an exit code")

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_code": self.exit_code,
            "condensed_output": self.condensed_output,
            "raw_output_ref": self.raw_output_ref,
            "duration": self.duration,
            "rejected": self.rejected,
            "rejection_reason": self.rejection_reason,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Observation":
        return cls(
            condensed_output=data.get("condensed_output", ""),
            exit_code=data.get("exit_code"),
            raw_output_ref=data.get("raw_output_ref"),
            duration=float(data.get("duration", 0.0)),
            rejected=bool(data.get("rejected", False)),
            rejection_reason=data.get("rejection_reason"),
        )


@dataclass(frozen=True)
class CycleRecord:
    """One plan/extract/execute/observe iteration.

    ``action`` is absent when the extraction step produced no usable action
    (the cycle is still consumed).
    """

    index: int
    stage: Stage
    reasoning: str
    action: Action | None
    observation: Observation
    tokens_in: int
    tokens_out: int
    cost_delta: Decimal
    timestamp: str
    attempt: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": TRAJECTORY_SCHEMA_VERSION,
            "index": self.index,
            "stage": self.stage.label,
            "reasoning": self.reasoning,
            "action": self.action.to_dict() if self.action else None,
            "observation": self.observation.to_dict(),
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "cost_delta": str(self.cost_delta),
            "timestamp": self.timestamp,
            "attempt": self.attempt,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CycleRecord":
        version = data.get("v")
        if version != TRAJECTORY_SCHEMA_VERSION:
            raise ValueError(f"unsupported trajectory schema version: {version!r}")
        action = data.get("action")
        return cls(
            index=int(data["index"]),
            stage=Stage.from_label(data["stage"]),
            reasoning=data.get("reasoning", ""),
            action=Action.from_dict(action) if action else None,
            observation=Observation.from_dict(data["observation"]),
            tokens_in=int(data.get("tokens_in", 0)),
            tokens_out=int(data.get("tokens_out", 0)),
            cost_delta=Decimal(data.get("cost_delta", "0")),
            timestamp=data.get("timestamp", ""),
            attempt=int(data.get("attempt", 1)),
        )


@dataclass(frozen=True)
class TaskOutcome:
    status: OutcomeStatus
    cycles_used: int
    cost: Decimal
    duration: float
    retries: int = 0
    evidence_dir: str | None = None

    def __post_init__(self) -> None:
        if self.status is OutcomeStatus.SELF_VALIDATED and not self.evidence_dir:
            raise InvariantError("self_validated outcome needs an evidence_dir")

    @property
    def self_validated(self) -> bool:
        return self.status is OutcomeStatus.SELF_VALIDATED

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "cycles_used": self.cycles_used,
            "cost": str(self.cost),
            "duration": self.duration,
            "retries": self.retries,
            "evidence_dir": self.evidence_dir,
        }


@dataclass(frozen=True)
class TaskSpec:
    """One tool-project pair plus budgets: the unit of work."""

    tool: ToolSpec
    project: ProjectSpec
    budget: Budget = field(default_factory=Budget)
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    @property
    def id(self) -> str:
        return f"{self.tool.name}:{self.project.name}"


def validate_task(
    spec: TaskSpec, known_profiles: Collection[str] | None = None
) -> TaskSpec:
    """Return ``spec`` unchanged iff every type invariant holds.

    ``known_profiles`` enables the registry lookup for the evidence profile;
    pass the keys of the loaded check-profile catalog.
    """
    spec.tool.check()
    spec.project.check()
    spec.budget.check()
    if spec.max_attempts < 1:
        raise InvariantError("max_attempts must be at least 1")
    if known_profiles is not None and spec.tool.evidence_profile not in known_profiles:
        raise UnknownProfileError(
            f"unknown evidence profile {spec.tool.evidence_profile!r} "
            f"for tool {spec.tool.name!r}"
        )
    return spec


# ---------------------------------------------------------------------------
# Manifest parsing / serialization
# ---------------------------------------------------------------------------

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(h|m|s)?\s*$")


def parse_duration(value: Any) -> float:
    """Accept plain seconds or a ``<number>[h|m|s]`` string."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    match = _DURATION_RE.match(str(value))
    if not match:
        raise FieldError(f"cannot parse duration: {value!r}")
    amount = float(match.group(1))
    unit = match.group(2) or "s"
    return amount * {"s": 1.0, "m": 60.0, "h": 3600.0}[unit]


def parse_money(value: Any) -> Decimal:
    try:
        return Decimal(str(value))
    except InvalidOperation:
        raise FieldError(f"cannot parse money amount: {value!r}") from None


def _require(entry: dict[str, Any], key: str, where: str) -> Any:
    if key not in entry or entry[key] in (None, ""):
        raise FieldError(f"{key} required ({where})")
    return entry[key]


def _parse_budget(data: dict[str, Any] | None, defaults: Budget) -> Budget:
    if not data:
        return defaults
    unknown = set(data) - {"max_cycles", "cost_cap", "wall_clock_limit"}
    if unknown:
        raise FieldError(f"unknown budget field(s): {', '.join(sorted(unknown))}")
    return Budget(
        max_cycles=int(data.get("max_cycles", defaults.max_cycles)),
        cost_cap=parse_money(data["cost_cap"]) if "cost_cap" in data else defaults.cost_cap,
        wall_clock_limit=(
            parse_duration(data["wall_clock_limit"])
            if "wall_clock_limit" in data
            else defaults.wall_clock_limit
        ),
    )


def parse_manifest(text: str) -> list[TaskSpec]:
    """Parse a manifest document into one TaskSpec per tool-project entry.

    Pairing is explicit under ``tasks``; budgets default-fill from the
    optional top-level ``budget`` section when omitted.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ManifestError(f"malformed manifest ({line}): {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ManifestError("malformed manifest (line 1): top level must be a mapping")

    defaults = _parse_budget(doc.get("budget"), Budget())

    tools: dict[str, ToolSpec] = {}
    for entry in doc.get("tools") or []:
        tool = ToolSpec(
            name=str(_require(entry, "name", "tools entry")),
            acquisition=str(_require(entry, "acquisition", "tools entry")),
            language_ecosystem=Ecosystem(entry.get("language_ecosystem", "other")),
            evidence_profile=str(entry.get("evidence_profile", "")),
        )
        tool.check()
        tools[tool.name] = tool

    projects: dict[str, ProjectSpec] = {}
    for entry in doc.get("projects") or []:
        if "pinned_revision" not in entry or entry["pinned_revision"] in (None, ""):
            raise FieldError("pinned_revision required (projects entry)")
        project = ProjectSpec(
            repo_url=str(_require(entry, "repo_url", "projects entry")),
            pinned_revision=str(entry["pinned_revision"]),
        )
        project.check()
        projects[project.name] = project
        projects[project.repo_url] = project

    specs: list[TaskSpec] = []
    for entry in doc.get("tasks") or []:
        tool_name = str(_require(entry, "tool", "tasks entry"))
        project_key = str(_require(entry, "project", "tasks entry"))
        if tool_name not in tools:
            raise FieldError(f"tasks entry references unknown tool {tool_name!r}")
        if project_key not in projects:
            raise FieldError(f"tasks entry references unknown project {project_key!r}")
        budget = _parse_budget(entry.get("budget"), defaults)
        budget.check()
        specs.append(
            TaskSpec(
                tool=tools[tool_name],
                project=projects[project_key],
                budget=budget,
                max_attempts=int(entry.get("max_attempts", DEFAULT_MAX_ATTEMPTS)),
            )
        )
    return specs


def serialize_manifest(specs: Iterable[TaskSpec]) -> str:
    """Inverse of :func:`parse_manifest` up to structural equality."""
    tools: dict[str, dict[str, Any]] = {}
    projects: dict[str, dict[str, Any]] = {}
    tasks: list[dict[str, Any]] = []
    for spec in specs:
        tools[spec.tool.name] = {
            "name": spec.tool.name,
            "acquisition": spec.tool.acquisition,
            "language_ecosystem": spec.tool.language_ecosystem.value,
            "evidence_profile": spec.tool.evidence_profile,
        }
        projects[spec.project.name] = {
            "repo_url": spec.project.repo_url,
            "pinned_revision": spec.project.pinned_revision,
        }
        tasks.append(
            {
                "tool": spec.tool.name,
                "project": spec.project.name,
                "max_attempts": spec.max_attempts,
                "budget": {
                    "max_cycles": spec.budget.max_cycles,
                    "cost_cap": str(spec.budget.cost_cap),
                    "wall_clock_limit": spec.budget.wall_clock_limit,
                },
            }
        )
    doc = {
        "tools": list(tools.values()),
        "projects": list(projects.values()),
        "tasks": tasks,
    }
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# Trajectory log
# ---------------------------------------------------------------------------


def dump_trajectory(records: Iterable[CycleRecord]) -> str:
    """One self-contained JSON object per line, schema version tagged."""
    return "".join(
        json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"
        for rec in records
    )


def load_trajectory(text: str) -> list[CycleRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(CycleRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"bad trajectory record on line {lineno}: {exc}") from exc
    return records


def check_trajectory(records: list[CycleRecord]) -> None:
    """Assert the cross-record invariants (per attempt)."""
    by_attempt: dict[int, list[CycleRecord]] = {}
    prev_index = 0
    for rec in records:
        if rec.index != prev_index + 1:
            raise InvariantError(
                f"cycle indices must increase by one (got {rec.index} after {prev_index})"
            )
        prev_index = rec.index
        by_attempt.setdefault(rec.attempt, []).append(rec)
    for attempt, recs in by_attempt.items():
        if recs[0].stage is not Stage.DOCKER_SETUP:
            raise InvariantError(f"attempt {attempt} does not start at docker_setup")
        for earlier, later in zip(recs, recs[1:]):
            if later.stage < earlier.stage:
                raise InvariantError(
                    f"stage regressed within attempt {attempt} at cycle {later.index}"
                )
