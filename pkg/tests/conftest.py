from __future__ import annotations

import pytest

import scenario_klee


@pytest.fixture(scope="session")
def klee_archive(tmp_path_factory) -> dict:
    """Replay archive for the successful KLEE-on-fastfetch scenario."""
    root = tmp_path_factory.mktemp("klee-success")
    scenario_klee.record_archive(
        root, scenario_klee.SUCCESS_RESPONSES, scenario_klee.SUCCESS_ENGINE_SCRIPT
    )
    return {
        "dir": root,
        "exchanges": root / "exchanges.jsonl",
        "engine": root / "engine.jsonl",
    }


@pytest.fixture(scope="session")
def premature_archive(tmp_path_factory) -> dict:
    """Replay archive for the premature-termination scenario (no judge call
    recorded: the submission is stopped by the deterministic pre-checks)."""
    root = tmp_path_factory.mktemp("klee-premature")
    scenario_klee.record_archive(
        root,
        scenario_klee.PREMATURE_RESPONSES,
        scenario_klee.PREMATURE_ENGINE_SCRIPT,
        max_cycles=8,
    )
    return {
        "dir": root,
        "exchanges": root / "exchanges.jsonl",
        "engine": root / "engine.jsonl",
    }
