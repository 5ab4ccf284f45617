"""Staged execution state machine and single-action cycle loop.

Each cycle is plan -> extract -> guard -> execute -> observe: one planning
call produces free-form reasoning, a second call extracts the first concrete
action, the stage whitelist and the action guard may reject it, and at most
one environment action executes.  A rejected or malformed action still
consumes the cycle.  Every budget (cycles, cost, wall clock) is checked at
cycle boundaries; hard engine errors consume a retry with a fresh container
but a shared cost ledger.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

from .checks import get_profile, run_checks
from .condense import CondenserConfig, condense, default_config, render
from .errors import (
    RETRYABLE_ENGINE_ERRORS,
    BackendError,
    BudgetExceededError,
    InvariantError,
    WorkspaceError,
)
from .judge import (
    SUBMISSION_ACCEPTED_PREFIX,
    SUBMISSION_REJECTED_PREFIX,
    _build_package,
    judge,
    load_prompt,
    reference_for_tool,
)
from .llm import Backend, CostLedger, LlmGateway, ModelProfile
from .sandbox import (
    RESULTS_MOUNT,
    WORKSPACE_MOUNT,
    Engine,
    Sandbox,
    Workspace,
    guard_action,
)
from .task import (
    Action,
    ActionKind,
    CycleRecord,
    Observation,
    OutcomeStatus,
    Stage,
    TaskOutcome,
    TaskSpec,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagePolicy:
    stage: Stage
    allowed_actions: frozenset[ActionKind]
    prompt_name: str
    exit_condition: str  # automatic_container_probe | agent_declared


STAGE_POLICIES: dict[Stage, StagePolicy] = {
    Stage.DOCKER_SETUP: StagePolicy(
        Stage.DOCKER_SETUP,
        frozenset({ActionKind.WRITE_FILE, ActionKind.READ_FILE}),
        "stage_docker_setup",
        "automatic_container_probe",
    ),
    Stage.TOOL_SETUP: StagePolicy(
        Stage.TOOL_SETUP,
        frozenset(
            {
                ActionKind.WRITE_FILE,
                ActionKind.READ_FILE,
                ActionKind.RUN_COMMAND,
                ActionKind.DECLARE_STAGE_DONE,
            }
        ),
        "stage_tool_setup",
        "agent_declared",
    ),
    Stage.PROJECT_SETUP: StagePolicy(
        Stage.PROJECT_SETUP,
        frozenset(
            {
                ActionKind.WRITE_FILE,
                ActionKind.READ_FILE,
                ActionKind.RUN_COMMAND,
                ActionKind.DECLARE_STAGE_DONE,
            }
        ),
        "stage_project_setup",
        "agent_declared",
    ),
    Stage.ANALYSIS_RUN: StagePolicy(
        Stage.ANALYSIS_RUN,
        frozenset(
            {
                ActionKind.WRITE_FILE,
                ActionKind.READ_FILE,
                ActionKind.RUN_COMMAND,
                ActionKind.SUBMIT_RESULT,
            }
        ),
        "stage_analysis_run",
        "agent_declared",
    ),
}

RECENT_COMMANDS_LIMIT = 10


@dataclass
class CarryOver:
    """Inter-stage context: per-stage summaries plus recent commands."""

    summaries: dict[Stage, str] = field(default_factory=dict)
    recent_commands: list[tuple[str, int | None]] = field(default_factory=list)

    def note_command(self, command: str, exit_code: int | None) -> None:
        self.recent_commands.append((command.splitlines()[0][:160], exit_code))
        del self.recent_commands[:-RECENT_COMMANDS_LIMIT]

    def render(self, budget_chars: int) -> str:
        parts = []
        for stage, summary in sorted(self.summaries.items()):
            parts.append(f"[{stage.label}] {summary}")
        if self.recent_commands:
            cmds = "; ".join(
                f"`{cmd}` -> exit {code}" for cmd, code in self.recent_commands
            )
            parts.append(f"recent commands: {cmds}")
        return "\n".join(parts)[:budget_chars]


@dataclass
class AgentConfig:
    condenser: CondenserConfig = field(default_factory=default_config)
    observation_budget_chars: int = 6000
    carryover_budget_chars: int = 4000
    recent_observations: int = 3
    command_timeout: float = 600.0
    analysis_min_runtime: int = 30
    analysis_max_runtime: int = 180


@dataclass
class RunState:
    """Mutable state of one task run; survives retries (the ledger and cycle
    counter are shared across attempts, the stage is not)."""

    task: TaskSpec
    ledger: CostLedger
    started_at: float
    stage: Stage = Stage.DOCKER_SETUP
    cycle_index: int = 0
    records: list[CycleRecord] = field(default_factory=list)
    attempt: int = 1
    carry: CarryOver = field(default_factory=CarryOver)
    raw_logs: list[str] = field(default_factory=list)
    rejections: int = 0
    last_rejection: str | None = None
    accepted: bool = False
    evidence_dir: str | None = None

    def restart_for_retry(self) -> None:
        self.attempt += 1
        self.stage = Stage.DOCKER_SETUP
        self.carry = CarryOver()
        self.raw_logs = []
        self.last_rejection = None


class DeterministicClock:
    """Monotone fake clock; replayed runs use it so trajectories are
    byte-identical."""

    def __init__(self, start: float = 1_700_000_000.0, step: float = 1.0):
        self.now = start
        self.step = step

    def __call__(self) -> float:
        current = self.now
        self.now += self.step
        return current


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_action_text(text: str) -> Action | None:
    """Map extractor output to one structured action; None when malformed."""
    if not text or not text.strip():
        return None
    candidates = [text.strip()]
    candidates += [m.strip() for m in _FENCE_RE.findall(text)]
    decoder = json.JSONDecoder()
    for start in [m.start() for m in re.finditer(r"\{", text)][:20]:
        try:
            obj, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        candidates.append(json.dumps(obj))
        break
    for candidate in candidates:
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(data, dict):
            continue
        try:
            return Action.from_dict(data)
        except (ValueError, InvariantError):
            return None
    return None


class TaskRunner:
    """Drives one task through the four stages against a backend and an
    engine; all failures are outcomes, never exceptions."""

    def __init__(
        self,
        task: TaskSpec,
        backend: Backend,
        engine: Engine,
        workdir: Path | str,
        profile: ModelProfile,
        config: AgentConfig | None = None,
        clock=time.time,
    ):
        self.task = task
        self.engine = engine
        self.config = config or AgentConfig()
        self.clock = clock
        self.workspace = Workspace(Path(workdir))
        self.ledger = CostLedger(cap=task.budget.cost_cap)
        self.gateway = LlmGateway(backend, profile, self.ledger)
        self.trajectory_path = self.workspace.root / "trajectory.jsonl"
        self._subst = {
            "tool": task.tool.name,
            "acquisition": task.tool.acquisition,
            "project": task.project.name,
            "repo_url": task.project.repo_url,
            "revision": task.project.pinned_revision,
            "workspace_mount": WORKSPACE_MOUNT,
            "results_mount": RESULTS_MOUNT,
            "min_runtime": str(self.config.analysis_min_runtime),
            "max_runtime": str(self.config.analysis_max_runtime),
        }

    # -- public entry -------------------------------------------------------

    def run_task(self) -> tuple[TaskOutcome, list[CycleRecord]]:
        state = RunState(task=self.task, ledger=self.ledger, started_at=self.clock())
        self.trajectory_path.write_text("", encoding="utf-8")
        while True:
            sandbox = Sandbox(self.engine, self.workspace, clock=self.clock)
            try:
                outcome = self._attempt_loop(state, sandbox)
                sandbox.teardown()
                return outcome, state.records
            except (*RETRYABLE_ENGINE_ERRORS, BackendError) as exc:
                logger.warning(
                    "attempt %d of %s hit an environment error: %s",
                    state.attempt,
                    self.task.id,
                    exc,
                )
                sandbox.teardown()
                if state.attempt >= self.task.max_attempts:
                    return self._outcome(state, OutcomeStatus.FAILED_ERROR), state.records
                state.restart_for_retry()
                self.workspace.reset_agent_files()

    # -- internals ----------------------------------------------------------

    def _outcome(self, state: RunState, status: OutcomeStatus) -> TaskOutcome:
        return TaskOutcome(
            status=status,
            cycles_used=state.cycle_index,
            cost=self.ledger.total,
            duration=self.clock() - state.started_at,
            retries=state.attempt - 1,
            evidence_dir=state.evidence_dir if status is OutcomeStatus.SELF_VALIDATED else None,
        )

    def _budget_status(self, state: RunState) -> OutcomeStatus:
        return (
            OutcomeStatus.FAILED_REJECTED if state.rejections else OutcomeStatus.FAILED_BUDGET
        )

    def _attempt_loop(self, state: RunState, sandbox: Sandbox) -> TaskOutcome:
        budget = self.task.budget
        while True:
            if state.cycle_index >= budget.max_cycles:
                return self._outcome(state, self._budget_status(state))
            if self.ledger.exhausted:
                return self._outcome(state, self._budget_status(state))
            if self.clock() - state.started_at > budget.wall_clock_limit:
                return self._outcome(state, self._budget_status(state))
            self.run_cycle(state, sandbox)
            if state.accepted:
                return self._outcome(state, OutcomeStatus.SELF_VALIDATED)

    def run_cycle(self, state: RunState, sandbox: Sandbox) -> None:
        """One planning call, one extraction call, at most one executed
        action; always appends exactly one cycle record."""
        index = state.cycle_index + 1
        stage = state.stage
        policy = STAGE_POLICIES[stage]
        cost_before = self.ledger.total
        exchanges_before = len(self.ledger.exchanges)
        reasoning = ""
        action: Action | None = None
        observation: Observation | None = None
        transition = False

        try:
            plan = self.gateway.complete(
                self._planning_messages(state), purpose=f"plan-{index}"
            )
            reasoning = plan.response
            if not reasoning.strip():
                observation = self._reject("model returned an empty plan")
            else:
                action = self.extract_action(reasoning, index)
                if action is None:
                    observation = self._reject(
                        "could not extract a valid action from the plan"
                    )
                elif action.kind not in policy.allowed_actions:
                    allowed = ", ".join(sorted(k.value for k in policy.allowed_actions))
                    observation = self._reject(
                        f"action '{action.kind.value}' is not permitted during stage "
                        f"'{stage.label}' (allowed: {allowed})"
                    )
                else:
                    deny = guard_action(action)
                    if deny is not None:
                        observation = self._reject(deny)
                    else:
                        observation, transition = self._execute(
                            state, sandbox, action, index, reasoning
                        )
        except BudgetExceededError as exc:
            observation = self._reject(f"cost budget exhausted: {exc}")

        if transition:
            self.advance_stage(state, pending=self._pending_digest(action, observation))

        slice_ = self.ledger.exchanges[exchanges_before:]
        record = CycleRecord(
            index=index,
            stage=stage,
            reasoning=reasoning,
            action=action,
            observation=observation,
            tokens_in=sum(e.tokens_in for e in slice_),
            tokens_out=sum(e.tokens_out for e in slice_),
            cost_delta=self.ledger.total - cost_before,
            timestamp=_iso(self.clock()),
            attempt=state.attempt,
        )
        state.records.append(record)
        state.cycle_index = index
        with open(self.trajectory_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    def extract_action(self, reasoning: str, index: int) -> Action | None:
        """Second model call: map the free-form plan to one structured
        action (the first actionable step only)."""
        if not reasoning.strip():
            return None
        messages = [
            {"role": "system", "content": self._prompt("extractor")},
            {"role": "user", "content": f"Plan:\n{reasoning}"},
        ]
        exchange = self.gateway.complete(messages, purpose=f"extract-{index}")
        return parse_action_text(exchange.response)

    def advance_stage(self, state: RunState, pending: str = "") -> None:
        """Move one stage forward, regenerating the carry-over summary with
        one summarizer call (fallback: recent commands verbatim)."""
        old = state.stage
        stage_records = [
            r for r in state.records if r.attempt == state.attempt and r.stage is old
        ]
        lines = []
        for rec in stage_records:
            kind = rec.action.kind.value if rec.action else "(malformed)"
            detail = ""
            if rec.action and rec.action.command:
                detail = f" `{rec.action.command.splitlines()[0][:120]}`"
            elif rec.action and rec.action.path:
                detail = f" {rec.action.path}"
            exit_part = (
                f" -> exit {rec.observation.exit_code}"
                if rec.observation.exit_code is not None
                else ""
            )
            lines.append(f"[cycle {rec.index}] {kind}{detail}{exit_part}")
            excerpt = rec.observation.condensed_output.strip()
            if excerpt:
                lines.append("  " + excerpt[:400].replace("\n", "\n  "))
        if pending:
            lines.append(pending)
        per_stage_budget = max(400, self.config.carryover_budget_chars // len(Stage))
        try:
            exchange = self.gateway.complete(
                [
                    {
                        "role": "system",
                        "content": load_prompt("summarizer").substitute(
                            limit=str(per_stage_budget)
                        ),
                    },
                    {"role": "user", "content": "\n".join(lines) or "(no recorded cycles)"},
                ],
                purpose=f"summarize-{old.label}",
            )
            summary = exchange.response.strip()
            if not summary:
                raise BackendError("summarizer returned an empty response")
        except (BackendError, BudgetExceededError):
            pairs = state.carry.recent_commands[-RECENT_COMMANDS_LIMIT:]
            summary = "recent commands: " + "; ".join(
                f"`{cmd}` -> exit {code}" for cmd, code in pairs
            ) if pairs else "stage finished (no summary available)"
        state.carry.summaries[old] = summary[:per_stage_budget]
        state.stage = old.next()

    # -- action execution ---------------------------------------------------

    def _reject(self, reason: str) -> Observation:
        return Observation(
            condensed_output=reason[: self.config.observation_budget_chars],
            rejected=True,
            rejection_reason=reason[:500],
        )

    def _clip(self, text: str) -> str:
        limit = self.config.observation_budget_chars
        if len(text) <= limit:
            return text
        return text[: limit - 17] + "\n...[truncated]..."

    def _render_log(self, raw: str, reserve: int = 200) -> str:
        budget = max(200, self.config.observation_budget_chars - reserve)
        return render(condense(raw, self.config.condenser), budget)

    def _execute(
        self,
        state: RunState,
        sandbox: Sandbox,
        action: Action,
        index: int,
        reasoning: str,
    ) -> tuple[Observation, bool]:
        kind = action.kind
        if kind is ActionKind.WRITE_FILE:
            return self._do_write(state, sandbox, action)
        if kind is ActionKind.READ_FILE:
            try:
                content = self.workspace.read_file(action.path or "")
                return Observation(condensed_output=self._clip(content)), False
            except WorkspaceError as exc:
                return Observation(condensed_output=f"read failed: {exc}"), False
        if kind is ActionKind.RUN_COMMAND:
            return self._do_command(state, sandbox, action, index)
        if kind is ActionKind.DECLARE_STAGE_DONE:
            return (
                Observation(
                    condensed_output=f"stage '{state.stage.label}' declared done; advancing"
                ),
                True,
            )
        return self._do_submit(state, index, reasoning, action), False

    def _do_write(
        self, state: RunState, sandbox: Sandbox, action: Action
    ) -> tuple[Observation, bool]:
        try:
            size = self.workspace.write_file(action.path or "", action.content or "")
        except WorkspaceError as exc:
            return self._reject(str(exc)), False
        parts = [f"wrote {action.path} ({size} bytes)"]
        transition = False
        if state.stage is Stage.DOCKER_SETUP and self.workspace.has_dockerfile():
            build = sandbox.build_image()
            if not build.ok:
                parts.append("image build failed:")
                parts.append(self._render_log(build.log, reserve=len(parts[0]) + 40))
            else:
                started = sandbox.start_container(build.image_tag or "")
                if not started.ok:
                    parts.append("image built, but the container did not start:")
                    parts.append(self._render_log(started.log, reserve=len(parts[0]) + 60))
                else:
                    parts.append("image built; container is running and responsive")
                    transition = True
        return Observation(condensed_output=self._clip("\n".join(parts))), transition

    def _do_command(
        self, state: RunState, sandbox: Sandbox, action: Action, index: int
    ) -> tuple[Observation, bool]:
        command = action.command or ""
        timeout = action.timeout or self.config.command_timeout
        result = sandbox.exec_command(command, timeout=timeout, log_stem=f"cycle-{index:04d}")
        state.raw_logs.append(result.output)
        state.carry.note_command(command, result.exit_code)
        header = f"exit {result.exit_code}{' (timed out)' if result.timed_out else ''} in {result.duration:.1f}s"
        body = self._render_log(result.output, reserve=len(header) + 2)
        return (
            Observation(
                condensed_output=self._clip(f"{header}\n{body}" if body else header),
                exit_code=result.exit_code,
                raw_output_ref=f"logs/cycle-{index:04d}.out",
                duration=result.duration,
            ),
            False,
        )

    def _do_submit(
        self, state: RunState, index: int, reasoning: str, action: Action
    ) -> Observation:
        listing = self.workspace.results_listing()
        stub = CycleRecord(
            index=index,
            stage=state.stage,
            reasoning=reasoning,
            action=action,
            observation=Observation(condensed_output="(pending submission)"),
            tokens_in=0,
            tokens_out=0,
            cost_delta=Decimal("0"),
            timestamp="",
            attempt=state.attempt,
        )
        package = _build_package([*state.records, stub], listing, self.task)
        profile = get_profile(self.task.tool.evidence_profile)
        logs = "\n".join(state.raw_logs)
        report = run_checks(profile, self.workspace.results_dir, logs, self.task.project)
        reference = reference_for_tool(self.task.tool, profile)
        verdict = judge(
            package,
            reference,
            self.gateway,
            profile,
            self.workspace.results_dir,
            logs,
            self.task.project,
            report=report,
        )

        evidence_dir = self.workspace.root / "evidence"
        evidence_dir.mkdir(exist_ok=True)
        (evidence_dir / "package.json").write_text(package.to_json(), encoding="utf-8")
        (evidence_dir / "checks.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        (evidence_dir / "verdict.json").write_text(
            json.dumps(verdict.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )

        if verdict.accepted:
            state.accepted = True
            # the evidence root spans evidence/{package,checks,verdict}.json
            # and results/** (tool outputs surfaced through the mount)
            state.evidence_dir = str(self.workspace.root)
            text = f"{SUBMISSION_ACCEPTED_PREFIX}: {verdict.reason}"
        else:
            state.rejections += 1
            state.last_rejection = verdict.reason
            text = f"{SUBMISSION_REJECTED_PREFIX}: {verdict.reason}"
        return Observation(condensed_output=self._clip(text))

    # -- prompt assembly ----------------------------------------------------

    def _prompt(self, name: str) -> str:
        return load_prompt(name).safe_substitute(self._subst)

    def _pending_digest(self, action: Action | None, observation: Observation | None) -> str:
        if action is None or observation is None:
            return ""
        first = observation.condensed_output.splitlines()[0] if observation.condensed_output else ""
        return f"[current] {action.kind.value} -> {first[:200]}"

    def _planning_messages(self, state: RunState) -> list[dict[str, str]]:
        policy = STAGE_POLICIES[state.stage]
        system = self._prompt("preamble") + "\n\n" + self._prompt(policy.prompt_name)
        lines = [
            f"Cycle {state.cycle_index + 1} of {self.task.budget.max_cycles}."
            f" Stage: {state.stage.label}.",
            "Allowed actions: "
            + ", ".join(sorted(k.value for k in policy.allowed_actions))
            + ".",
        ]
        if state.attempt > 1:
            lines.append(
                f"Attempt {state.attempt} of {self.task.max_attempts}: the previous "
                "attempt hit an environment error; the container was rebuilt from scratch."
            )
        carry = state.carry.render(self.config.carryover_budget_chars)
        if carry:
            lines.append("Carried-over context:\n" + carry)
        recent = state.records[-self.config.recent_observations :]
        if recent:
            lines.append("Recent observations:")
            for rec in recent:
                kind = rec.action.kind.value if rec.action else "(malformed)"
                detail = ""
                if rec.action and rec.action.command:
                    detail = f" `{rec.action.command.splitlines()[0][:120]}`"
                elif rec.action and rec.action.path:
                    detail = f" {rec.action.path}"
                lines.append(f"[cycle {rec.index} | {kind}{detail}]")
                lines.append(rec.observation.condensed_output)
        if state.last_rejection:
            lines.append(f"The validator rejected the last submission: {state.last_rejection}")
        lines.append("What is the single next step? Reason briefly, then state it.")
        return [
            {"role": "system", "content": system},
            {"role": "user", "content": "\n".join(lines)},
        ]


def run_task(
    task: TaskSpec,
    backend: Backend,
    engine: Engine,
    workdir: Path | str,
    profile: ModelProfile,
    config: AgentConfig | None = None,
    clock=time.time,
) -> tuple[TaskOutcome, list[CycleRecord]]:
    """Run one task end to end; returns the outcome and the trajectory."""
    runner = TaskRunner(task, backend, engine, workdir, profile, config=config, clock=clock)
    return runner.run_task()
