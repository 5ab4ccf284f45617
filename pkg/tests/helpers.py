"""Shared fakes for the offline test suite."""

from __future__ import annotations

import json
import random

from tooldriver.errors import ContainerDiedError
from tooldriver.llm import BackendReply
from tooldriver.sandbox import PROBE_COMMAND, BuildResult, ExecResult, StartResult


def _tokens_for(messages, response: str) -> tuple[int, int]:
    chars = sum(len(m.get("content", "")) for m in messages)
    return max(1, chars // 4), max(1, len(response) // 4)


class ScriptedBackend:
    """Returns canned responses in exact call order."""

    def __init__(self, responses: list[str], tokens: list[tuple[int, int]] | None = None):
        self.responses = list(responses)
        self.tokens = tokens
        self.calls = 0

    def complete(self, model_id, messages) -> BackendReply:
        if self.calls >= len(self.responses):
            raise AssertionError(f"scripted backend exhausted after {self.calls} calls")
        response = self.responses[self.calls]
        if self.tokens is not None:
            tokens_in, tokens_out = self.tokens[self.calls]
        else:
            tokens_in, tokens_out = _tokens_for(messages, response)
        self.calls += 1
        return BackendReply(text=response, tokens_in=tokens_in, tokens_out=tokens_out)


class FailingBackend:
    def complete(self, model_id, messages):
        from tooldriver.errors import BackendError

        raise BackendError("backend down")


def _system_text(messages) -> str:
    return " ".join(m["content"] for m in messages if m.get("role") == "system")


class RandomBackend:
    """Seeded pseudo-random planner/extractor used by the budget-safety
    property runs: emits a mix of valid, disallowed, malformed, and empty
    outputs."""

    _ACTIONS = [
        {"kind": "run_command", "command": "make -j4"},
        {"kind": "run_command", "command": "gcc main.c -o main"},
        {"kind": "run_command", "command": "docker stop c1"},
        {"kind": "run_command", "command": "ls -la"},
        {"kind": "write_file", "path": "Dockerfile", "content": "FROM ubuntu:22.04\n"},
        {"kind": "write_file", "path": "notes.txt", "content": "hello\n"},
        {"kind": "write_file", "path": "../escape", "content": "x"},
        {"kind": "read_file", "path": "Dockerfile"},
        {"kind": "declare_stage_done"},
        {"kind": "submit_result"},
    ]

    def __init__(self, seed: int):
        self.rng = random.Random(seed)

    def complete(self, model_id, messages) -> BackendReply:
        system = _system_text(messages)
        roll = self.rng.random()
        if "machine-readable action" in system:  # extractor call
            if roll < 0.08:
                text = ""
            elif roll < 0.16:
                text = "I think we should maybe run something?"
            else:
                text = json.dumps(self.rng.choice(self._ACTIONS))
        elif "independent validator" in system:
            text = self.rng.choice(["ACCEPT fine.", "REJECT not enough evidence."])
        elif "Summarize the finished workflow stage" in system:
            text = "stage summary: things happened."
        else:  # planning call
            text = "" if roll < 0.05 else f"plan step {self.rng.randrange(1000)}"
        tokens_out = max(1, len(text) // 4)
        tokens_in = self.rng.randrange(200, 4000)
        return BackendReply(text=text, tokens_in=tokens_in, tokens_out=tokens_out)


class RandomEngine:
    """Seeded pseudo-random container engine; occasionally kills the
    container to exercise the retry path."""

    _OUTPUTS = [
        "ok\n",
        "Setting up build-essential ...\n",
        "main.c:10:3: error: expected ';' before 'return'\n",
        "collect2: error: ld returned 1 exit status\nundefined reference to `foo'\n",
        "E: Unable to locate package libfoo-dev\n",
        "done\n" * 50,
    ]

    def __init__(self, seed: int, die_probability: float = 0.01):
        self.rng = random.Random(seed)
        self.die_probability = die_probability
        self.containers = 0

    def build(self, context_dir, dockerfile, tag) -> BuildResult:
        if self.rng.random() < 0.15:
            return BuildResult(False, None, "E: Unable to locate package xyzzy\n")
        return BuildResult(True, tag, "Successfully built\n")

    def run(self, image_tag, mounts) -> StartResult:
        if self.rng.random() < 0.05:
            return StartResult(False, None, "container exited immediately\n")
        self.containers += 1
        return StartResult(True, f"c-{self.containers}", "")

    def exec(self, container_id, command, timeout) -> ExecResult:
        if command == PROBE_COMMAND:
            return ExecResult(0, "", "", 0.01)
        if self.rng.random() < self.die_probability:
            raise ContainerDiedError("container fell over")
        exit_code = self.rng.choice([0, 0, 0, 1, 2, 127])
        return ExecResult(
            exit_code=exit_code,
            stdout=self.rng.choice(self._OUTPUTS),
            stderr="" if exit_code == 0 else "something went wrong\n",
            duration=self.rng.random(),
        )

    def rm(self, container_id) -> None:
        pass
