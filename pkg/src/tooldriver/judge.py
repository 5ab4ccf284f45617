"""Evidence package construction and LLM-as-judge adjudication.

On submission the framework assembles a three-component evidence package
(stage summaries, recent analysis-stage observations, output locations)
from the trajectory and the results listing (never from the agent's
conversation), runs the deterministic evidence checks, and only if those
pass consults the judge with a validation-only prompt.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Any, Sequence

from .checks import CheckProfile, CheckReport, run_checks
from .errors import BackendError, BudgetExceededError, ToolDriverError
from .llm import LlmGateway
from .task import ActionKind, CycleRecord, Stage, TaskSpec, ToolSpec

logger = logging.getLogger(__name__)

RECENT_OBSERVATION_LIMIT = 10
_OBS_EXCERPT_CHARS = 500

SUBMISSION_ACCEPTED_PREFIX = "submission accepted"
SUBMISSION_REJECTED_PREFIX = "submission rejected"


def load_prompt(name: str) -> Template:
    text = resources.files("tooldriver.prompts").joinpath(f"{name}.md").read_text()
    return Template(text)


@dataclass(frozen=True)
class EvidencePackage:
    """The three content components plus task identity."""

    task_identity: dict[str, str]
    stage_summaries: dict[str, str]
    recent_observations: tuple[dict[str, Any], ...]
    output_locations: tuple[tuple[str, str], ...]
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_identity": self.task_identity,
                "stage_summaries": self.stage_summaries,
                "recent_observations": list(self.recent_observations),
                "output_locations": [list(pair) for pair in self.output_locations],
                "degenerate": self.degenerate,
            },
            indent=2,
            sort_keys=True,
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class ReferenceExample:
    tool: str
    expected_output_sketch: str
    version: int


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str
    checks: tuple[tuple[str, bool], ...]

    def __post_init__(self) -> None:
        if not self.accepted and not self.reason:
            raise ValueError("a rejection needs a reason")

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "reason": self.reason,
            "checks": [list(pair) for pair in self.checks],
        }


def _describe_listing(listing: Sequence[tuple[str, int]]) -> tuple[tuple[str, str], ...]:
    described = []
    for rel, size in listing[:200]:
        if size < 0:
            described.append((rel, "directory"))
        else:
            described.append((rel, f"file, {size} bytes"))
    return tuple(described)


def _stage_summary(records: list[CycleRecord]) -> str:
    commands_ok: list[str] = []
    commands_failed: list[str] = []
    files: list[str] = []
    rejected = 0
    for rec in records:
        if rec.action is None:
            continue
        if rec.observation.rejected:
            rejected += 1
            continue
        if rec.action.kind is ActionKind.RUN_COMMAND:
            first_line = (rec.action.command or "").splitlines()[0][:120]
            entry = f"`{first_line}` (exit {rec.observation.exit_code})"
            if rec.observation.exit_code == 0:
                commands_ok.append(entry)
            else:
                commands_failed.append(entry)
        elif rec.action.kind is ActionKind.WRITE_FILE:
            files.append(rec.action.path or "?")
    parts = [f"{len(records)} cycles"]
    parts.append(f"{len(commands_ok)} commands succeeded, {len(commands_failed)} failed")
    if files:
        parts.append("files written: " + ", ".join(sorted(set(files))[:10]))
    if rejected:
        parts.append(f"{rejected} actions rejected")
    tail = commands_failed[-2:] + commands_ok[-3:]
    if tail:
        parts.append("recent: " + "; ".join(tail))
    return "; ".join(parts)


def _build_package(
    records: Sequence[CycleRecord],
    results_listing: Sequence[tuple[str, int]],
    task: TaskSpec,
) -> EvidencePackage:
    by_stage: dict[Stage, list[CycleRecord]] = {}
    for rec in records:
        by_stage.setdefault(rec.stage, []).append(rec)

    summaries = {
        stage.label: _stage_summary(recs) for stage, recs in sorted(by_stage.items())
    }

    analysis_records = [
        rec
        for rec in records
        if rec.stage is Stage.ANALYSIS_RUN
        and rec.action is not None
        and rec.action.kind is not ActionKind.SUBMIT_RESULT
    ]
    recent = []
    for rec in analysis_records[-RECENT_OBSERVATION_LIMIT:]:
        action = rec.action
        assert action is not None
        recent.append(
            {
                "cycle": rec.index,
                "action": action.kind.value,
                "detail": (action.command or action.path or "")[:200],
                "exit_code": rec.observation.exit_code,
                "output": rec.observation.condensed_output[:_OBS_EXCERPT_CHARS],
            }
        )

    locations = _describe_listing(results_listing)
    degenerate = not locations or not any(
        rec.action.kind is ActionKind.RUN_COMMAND for rec in analysis_records if rec.action
    )
    return EvidencePackage(
        task_identity={
            "tool": task.tool.name,
            "project_repo": task.project.repo_url,
            "pinned_revision": task.project.pinned_revision,
        },
        stage_summaries=summaries,
        recent_observations=tuple(recent),
        output_locations=locations,
        degenerate=degenerate,
    )


def build_evidence_package(
    trajectory: Sequence[CycleRecord],
    results_listing: Sequence[tuple[str, int]],
    task: TaskSpec,
) -> EvidencePackage:
    """Assemble the submission package from a trajectory that contains a
    submit_result action."""
    if not any(
        rec.action is not None and rec.action.kind is ActionKind.SUBMIT_RESULT
        for rec in trajectory
    ):
        raise ValueError("trajectory contains no submit_result action")
    return _build_package(trajectory, results_listing, task)


def judge(
    package: EvidencePackage,
    reference: ReferenceExample,
    gateway: LlmGateway,
    profile: CheckProfile,
    results_dir,
    logs: str,
    project,
    report: CheckReport | None = None,
) -> Verdict:
    """Deterministic pre-checks first; the judge model is consulted only if
    they pass.  A backend failure yields a conservative rejection."""
    if report is None:
        report = run_checks(profile, results_dir, logs, project)
    checks = tuple((r.rule, r.passed) for r in report.results)
    if not report.overall:
        failed = [r for r in report.results if not r.passed]
        reason = "; ".join(f"{r.rule}: {r.witness}" for r in failed[:3])
        return Verdict(accepted=False, reason=f"evidence checks failed: {reason}", checks=checks)
    if package.degenerate:
        return Verdict(
            accepted=False,
            reason="degenerate evidence package: no analysis-stage output to judge",
            checks=checks,
        )

    prompt = load_prompt("judge").substitute(
        package=package.to_json(),
        tool=reference.tool,
        reference=reference.expected_output_sketch,
    )
    try:
        exchange = gateway.complete(
            [{"role": "user", "content": prompt}], purpose="judge"
        )
    except (BackendError, BudgetExceededError) as exc:
        return Verdict(accepted=False, reason=f"judge unavailable: {exc}", checks=checks)

    text = exchange.response.strip()
    first_word = text.split(None, 1)[0].upper().strip(".,:") if text else ""
    accepted = first_word == "ACCEPT"
    reason = text if text else "judge returned an empty verdict"
    if accepted:
        return Verdict(accepted=True, reason=reason, checks=checks)
    return Verdict(accepted=False, reason=reason, checks=checks)


# ---------------------------------------------------------------------------
# Reference examples
# ---------------------------------------------------------------------------

_reference_cache: dict[tuple[str, int], ReferenceExample] = {}


def reference_for_tool(tool: ToolSpec, profile: CheckProfile) -> ReferenceExample:
    """The shipped, hand-written sketch for this tool (catalog fallback)."""
    return ReferenceExample(
        tool=tool.name,
        expected_output_sketch=profile.reference_sketch
        or f"meaningful output artifacts produced by {tool.name} on the target project",
        version=profile.version,
    )


def synthesize_reference(
    tool: ToolSpec,
    docs: str,
    gateway: LlmGateway,
    catalog_version: int = 1,
) -> ReferenceExample:
    """Synthesize the expected-output sketch from the tool's documentation.

    Called at most once per (tool, catalog version); later calls return the
    cached sketch.
    """
    if not docs or not docs.strip():
        raise ValueError("reference synthesis needs non-empty documentation")
    key = (tool.name, catalog_version)
    if key in _reference_cache:
        return _reference_cache[key]
    prompt = load_prompt("reference_synthesis").substitute(tool=tool.name, docs=docs)
    try:
        exchange = gateway.complete(
            [{"role": "user", "content": prompt}], purpose="reference-synthesis"
        )
    except (BackendError, BudgetExceededError) as exc:
        raise ToolDriverError(f"reference synthesis failed for {tool.name}: {exc}") from exc
    sketch = exchange.response.strip()
    if not sketch:
        raise ToolDriverError(f"reference synthesis returned nothing for {tool.name}")
    reference = ReferenceExample(
        tool=tool.name, expected_output_sketch=sketch, version=catalog_version
    )
    _reference_cache[key] = reference
    return reference
