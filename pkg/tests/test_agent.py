from __future__ import annotations

import json
from decimal import Decimal

from helpers import ScriptedBackend
from scenario_klee import make_task
from tooldriver.agent import (
    STAGE_POLICIES,
    DeterministicClock,
    RunState,
    TaskRunner,
    parse_action_text,
)
from tooldriver.errors import ContainerDiedError
from tooldriver.llm import load_pricing
from tooldriver.sandbox import (
    PROBE_COMMAND,
    BuildResult,
    ExecResult,
    Sandbox,
    ScriptedEngine,
    StartResult,
)
from tooldriver.task import ActionKind, Budget, OutcomeStatus, Stage, check_trajectory

NANO = load_pricing()["gpt-5-nano"]


class TestParseAction:
    def test_plain_json(self):
        action = parse_action_text('{"kind": "run_command", "command": "make"}')
        assert action.kind is ActionKind.RUN_COMMAND
        assert action.command == "make"

    def test_fenced_json(self):
        action = parse_action_text('Here you go:\n```json\n{"kind": "read_file", "path": "a"}\n```')
        assert action.kind is ActionKind.READ_FILE

    def test_json_embedded_in_prose(self):
        action = parse_action_text(
            'The first step is {"kind": "write_file", "path": "Dockerfile", '
            '"content": "FROM x"} and later we will build.'
        )
        assert action.kind is ActionKind.WRITE_FILE

    def test_gibberish_malformed(self):
        assert parse_action_text("maybe do something?") is None

    def test_empty_malformed(self):
        assert parse_action_text("") is None
        assert parse_action_text("   \n") is None

    def test_incomplete_payload_malformed(self):
        assert parse_action_text('{"kind": "write_file", "path": "x"}') is None

    def test_multi_step_plan_single_command(self):
        # extraction returns one action; a chained command string stays one action
        action = parse_action_text('{"kind": "run_command", "command": "make && make test"}')
        assert action.command == "make && make test"


def test_stage_whitelists_match_contract():
    docker = STAGE_POLICIES[Stage.DOCKER_SETUP]
    assert docker.allowed_actions == {ActionKind.WRITE_FILE, ActionKind.READ_FILE}
    assert docker.exit_condition == "automatic_container_probe"
    assert ActionKind.DECLARE_STAGE_DONE in STAGE_POLICIES[Stage.TOOL_SETUP].allowed_actions
    analysis = STAGE_POLICIES[Stage.ANALYSIS_RUN]
    assert ActionKind.SUBMIT_RESULT in analysis.allowed_actions
    assert ActionKind.DECLARE_STAGE_DONE not in analysis.allowed_actions
    for policy in STAGE_POLICIES.values():
        if policy.stage is not Stage.DOCKER_SETUP:
            assert policy.exit_condition == "agent_declared"


def _runner(tmp_path, responses, engine=None, max_cycles=4, max_attempts=3, cost_cap="2.00"):
    from dataclasses import replace

    task = make_task(max_cycles=max_cycles)
    task = replace(
        task,
        budget=replace(task.budget, cost_cap=Decimal(cost_cap)),
        max_attempts=max_attempts,
    )
    backend = ScriptedBackend(responses)
    engine = engine or ScriptedEngine([])
    return TaskRunner(
        task, backend, engine, tmp_path / "ws", NANO, clock=DeterministicClock()
    )


def test_run_command_in_docker_stage_rejected_and_consumes_cycle(tmp_path):
    responses = [
        "We should check the available compilers first.",
        json.dumps({"kind": "run_command", "command": "gcc --version"}),
    ]
    runner = _runner(tmp_path, responses, max_cycles=1)
    outcome, records = runner.run_task()
    assert outcome.status is OutcomeStatus.FAILED_BUDGET
    assert outcome.cycles_used == 1
    rec = records[0]
    assert rec.stage is Stage.DOCKER_SETUP
    assert rec.observation.rejected
    assert "not permitted during stage 'docker_setup'" in rec.observation.rejection_reason
    assert rec.observation.exit_code is None


def test_declare_stage_done_in_docker_stage_rejected(tmp_path):
    responses = ["Stage looks complete.", json.dumps({"kind": "declare_stage_done"})]
    runner = _runner(tmp_path, responses, max_cycles=1)
    _, records = runner.run_task()
    assert records[0].observation.rejected


def test_empty_extraction_consumes_cycle(tmp_path):
    responses = ["Plan: do the thing.", ""]
    runner = _runner(tmp_path, responses, max_cycles=1)
    outcome, records = runner.run_task()
    assert outcome.cycles_used == 1
    assert records[0].action is None
    assert records[0].observation.rejected
    assert "extract" in records[0].observation.rejection_reason


def test_empty_plan_consumes_cycle_without_extraction_call(tmp_path):
    responses = ["", "never used"]
    runner = _runner(tmp_path, responses, max_cycles=1)
    _, records = runner.run_task()
    assert records[0].action is None
    assert runner.gateway.backend.calls == 1  # no extraction call after an empty plan


def test_dockerfile_write_builds_and_advances(tmp_path):
    engine = ScriptedEngine(
        [
            {"op": "build", "ok": True, "image_tag": "img", "log": "built"},
            {"op": "start", "ok": True, "container_id": "c1", "log": ""},
            {"op": "exec", "expect": "klee --version", "exit_code": 0, "stdout": "KLEE 3.1\n"},
        ]
    )
    responses = [
        "Write the Dockerfile now.",
        json.dumps({"kind": "write_file", "path": "Dockerfile", "content": "FROM ubuntu\n"}),
        "Base image ready.",  # summarizer
        "Check the klee version.",
        json.dumps({"kind": "run_command", "command": "klee --version"}),
    ]
    runner = _runner(tmp_path, responses, engine=engine, max_cycles=2)
    outcome, records = runner.run_task()
    assert records[0].stage is Stage.DOCKER_SETUP
    assert "container is running and responsive" in records[0].observation.condensed_output
    assert records[1].stage is Stage.TOOL_SETUP
    assert records[1].observation.exit_code == 0
    assert "KLEE 3.1" in records[1].observation.condensed_output
    assert records[1].observation.raw_output_ref == "logs/cycle-0002.out"
    check_trajectory(records)


def test_failed_build_feeds_condensed_log_and_stays_in_stage(tmp_path):
    engine = ScriptedEngine(
        [
            {
                "op": "build",
                "ok": False,
                "log": "Step 3/4 : RUN apt-get install -y nonexistent\n"
                "E: Unable to locate package nonexistent\n",
            },
        ]
    )
    responses = [
        "Write the Dockerfile.",
        json.dumps({"kind": "write_file", "path": "Dockerfile", "content": "FROM u\nRUN x\n"}),
    ]
    runner = _runner(tmp_path, responses, engine=engine, max_cycles=1)
    outcome, records = runner.run_task()
    obs = records[0].observation.condensed_output
    assert "image build failed" in obs
    assert "E: Unable to locate package nonexistent" in obs
    assert records[0].stage is Stage.DOCKER_SETUP
    assert outcome.status is OutcomeStatus.FAILED_BUDGET


def test_summarizer_failure_falls_back_to_recent_commands(tmp_path):
    engine = ScriptedEngine(
        [
            {"op": "build", "ok": True, "image_tag": "img", "log": ""},
            {"op": "start", "ok": True, "container_id": "c1", "log": ""},
        ]
    )
    responses = [
        "Write the Dockerfile.",
        json.dumps({"kind": "write_file", "path": "Dockerfile", "content": "FROM u\n"}),
        "",  # summarizer returns empty -> fallback
    ]
    runner = _runner(tmp_path, responses, engine=engine, max_cycles=1)
    state = RunState(task=runner.task, ledger=runner.ledger, started_at=0.0)
    sandbox = Sandbox(engine, runner.workspace, clock=runner.clock)
    runner.trajectory_path.write_text("")
    runner.run_cycle(state, sandbox)
    assert state.stage is Stage.TOOL_SETUP
    assert Stage.DOCKER_SETUP in state.carry.summaries
    assert state.carry.summaries[Stage.DOCKER_SETUP]  # non-empty fallback text


def test_cost_cap_crossing_terminates_with_budget_status(tmp_path):
    # the planning exchange crosses the cap; extraction is then refused and
    # the next boundary check fails the task
    backend = ScriptedBackend(["expensive thoughts"], tokens=[(10_000_000, 100)])
    task = make_task(max_cycles=10)
    from dataclasses import replace

    task = replace(task, budget=Budget(max_cycles=10, cost_cap=Decimal("0.10")))
    runner = TaskRunner(
        task, backend, ScriptedEngine([]), tmp_path / "ws", NANO, clock=DeterministicClock()
    )
    outcome, records = runner.run_task()
    assert outcome.status is OutcomeStatus.FAILED_BUDGET
    assert outcome.cycles_used == 1
    assert "cost budget exhausted" in records[0].observation.rejection_reason
    # at most one exchange may cross the cap
    assert runner.ledger.total <= Decimal("0.10") + max(
        (e.cost for e in runner.ledger.exchanges), default=Decimal("0")
    )


class DyingEngine:
    """First container dies on its first exec; the retry then works."""

    def __init__(self):
        self.execs = 0
        self.started = 0

    def build(self, context_dir, dockerfile, tag):
        return BuildResult(True, "img", "")

    def run(self, image_tag, mounts):
        self.started += 1
        return StartResult(True, f"c{self.started}", "")

    def exec(self, container_id, command, timeout):
        if command == PROBE_COMMAND:
            return ExecResult(0, "", "", 0.01)
        self.execs += 1
        if self.execs == 1:
            raise ContainerDiedError("gone")
        return ExecResult(0, "fine\n", "", 0.1)

    def rm(self, container_id):
        pass


def test_engine_death_consumes_retry_with_shared_ledger(tmp_path):
    dockerfile = json.dumps(
        {"kind": "write_file", "path": "Dockerfile", "content": "FROM u\n"}
    )
    responses = [
        # attempt 1
        "Write the Dockerfile.",
        dockerfile,
        "summary one",
        "Run a command.",
        json.dumps({"kind": "run_command", "command": "echo hello"}),  # engine dies here
        # attempt 2 (fresh stages)
        "Write the Dockerfile again.",
        dockerfile,
        "summary two",
        "Run the command again.",
        json.dumps({"kind": "run_command", "command": "echo hello"}),
    ]
    runner = _runner(tmp_path, responses, engine=DyingEngine(), max_cycles=3)
    outcome, records = runner.run_task()
    assert outcome.retries == 1
    attempts = {r.attempt for r in records}
    assert attempts == {1, 2}
    second_attempt = [r for r in records if r.attempt == 2]
    assert second_attempt[0].stage is Stage.DOCKER_SETUP  # attempts restart at stage 1
    # cycle indices keep increasing across attempts (shared cycle budget)
    assert [r.index for r in records] == list(range(1, len(records) + 1))
    check_trajectory(records)


def test_retries_exhausted_yield_failed_error(tmp_path):
    class AlwaysDies(DyingEngine):
        def exec(self, container_id, command, timeout):
            if command == PROBE_COMMAND:
                return ExecResult(0, "", "", 0.01)
            raise ContainerDiedError("gone again")

    dockerfile = json.dumps(
        {"kind": "write_file", "path": "Dockerfile", "content": "FROM u\n"}
    )
    cmd = json.dumps({"kind": "run_command", "command": "echo hello"})
    per_attempt = ["plan df", dockerfile, "summ", "plan cmd", cmd]
    runner = _runner(
        tmp_path, per_attempt * 3, engine=AlwaysDies(), max_cycles=50, max_attempts=3
    )
    outcome, records = runner.run_task()
    assert outcome.status is OutcomeStatus.FAILED_ERROR
    assert outcome.retries == 2


class LoopingBackend:
    """Endless plan/extract pairs: models an archive planning more cycles
    than the budget allows."""

    def __init__(self):
        self.calls = 0

    def complete(self, model_id, messages):
        from tooldriver.llm import BackendReply

        self.calls += 1
        system = " ".join(m["content"] for m in messages if m["role"] == "system")
        if "machine-readable action" in system:
            text = json.dumps({"kind": "read_file", "path": "Dockerfile"})
        else:
            text = "Inspect the Dockerfile once more."
        return BackendReply(text=text, tokens_in=50, tokens_out=20)


def test_121_planned_cycles_stop_at_the_120_cap(tmp_path):
    runner = _runner(tmp_path, [], max_cycles=120)
    runner.gateway.backend = LoopingBackend()
    outcome, records = runner.run_task()
    assert outcome.status is OutcomeStatus.FAILED_BUDGET
    assert outcome.cycles_used == 120
    assert len(records) == 120
    assert records[-1].index == 120


def test_dead_llm_transport_becomes_failed_error(tmp_path):
    from helpers import FailingBackend

    runner = _runner(tmp_path, [], max_cycles=10, max_attempts=3)
    runner.gateway.backend = FailingBackend()
    outcome, records = runner.run_task()
    assert outcome.status is OutcomeStatus.FAILED_ERROR
    assert outcome.retries == 2
    assert records == []


def test_trajectory_flushed_per_cycle(tmp_path):
    responses = ["Plan.", json.dumps({"kind": "read_file", "path": "Dockerfile"})]
    runner = _runner(tmp_path, responses, max_cycles=1)
    outcome, records = runner.run_task()
    lines = runner.trajectory_path.read_text().splitlines()
    assert len(lines) == len(records) == 1
    doc = json.loads(lines[0])
    assert doc["v"] == 1
    assert doc["stage"] == "docker_setup"


def test_tokens_and_cost_accounted_per_cycle(tmp_path):
    responses = ["Plan.", json.dumps({"kind": "read_file", "path": "Dockerfile"})]
    runner = _runner(tmp_path, responses, max_cycles=1)
    _, records = runner.run_task()
    rec = records[0]
    assert rec.tokens_in > 0 and rec.tokens_out > 0
    assert rec.cost_delta == runner.ledger.total
    assert rec.cost_delta > 0
