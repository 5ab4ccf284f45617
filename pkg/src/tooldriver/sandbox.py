"""Isolated container management.

The container engine is reached through a narrow build/run/exec/rm
interface so tests can substitute a scripted engine; only integration
tests touch a real engine.  The workspace layout on the host is::

    Dockerfile    agent-written build recipe
    files/        agent-written auxiliary files, mounted at /workspace
    logs/         full-fidelity per-cycle stdout/stderr
    results/      analysis artifacts, mounted at /results inside the container
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Protocol, Sequence

from .errors import (
    ContainerDiedError,
    EngineScriptError,
    EngineUnavailableError,
    ImageNotFoundError,
    InvalidHandleError,
    WorkspaceError,
)
from .task import Action, ActionKind

logger = logging.getLogger(__name__)

#: fixed no-op shell probe used to decide that a container is responsive
PROBE_COMMAND = "true"

WORKSPACE_MOUNT = "/workspace"
RESULTS_MOUNT = "/results"

DEFAULT_COMMAND_TIMEOUT = 600.0  # builds can be long

_MAX_READ_BYTES = 200_000


def workspace_relative(path: str) -> PurePosixPath:
    """Validate that ``path`` stays inside the workspace; returns it cleaned."""
    if not path or path.strip() == "":
        raise WorkspaceError("empty path")
    pure = PurePosixPath(path)
    if pure.is_absolute() or any(part == ".." for part in pure.parts):
        raise WorkspaceError(f"path escapes the workspace: {path!r}")
    return pure


@dataclass
class Workspace:
    """Host-side writable directory owned by exactly one task run."""

    root: Path
    files: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        for sub in ("files", "logs", "results"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @property
    def files_dir(self) -> Path:
        return self.root / "files"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    def _host_path(self, rel: str) -> Path:
        pure = workspace_relative(rel)
        if str(pure) == "Dockerfile":
            return self.root / "Dockerfile"
        return self.files_dir / pure

    def write_file(self, rel: str, content: str) -> int:
        target = self._host_path(rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        data = content.encode("utf-8")
        target.write_bytes(data)
        self.files.add(str(workspace_relative(rel)))
        return len(data)

    def read_file(self, rel: str) -> str:
        target = self._host_path(rel)
        if not target.is_file():
            raise WorkspaceError(f"no such workspace file: {rel!r}")
        return target.read_bytes()[:_MAX_READ_BYTES].decode("utf-8", errors="replace")

    def has_dockerfile(self) -> bool:
        return (self.root / "Dockerfile").is_file()

    def write_log(self, stem: str, stdout: str, stderr: str) -> str:
        (self.logs_dir / f"{stem}.out").write_text(stdout, encoding="utf-8")
        (self.logs_dir / f"{stem}.err").write_text(stderr, encoding="utf-8")
        return f"logs/{stem}.out"

    def results_listing(self) -> list[tuple[str, int]]:
        """Sorted (relative path, size) pairs under results/."""
        listing = []
        for path in sorted(self.results_dir.rglob("*")):
            rel = path.relative_to(self.root).as_posix()
            listing.append((rel, path.stat().st_size if path.is_file() else -1))
        return listing

    def reset_agent_files(self) -> None:
        """Fresh stage state for a retry: drop agent-written inputs, keep
        logs and results."""
        shutil.rmtree(self.files_dir, ignore_errors=True)
        self.files_dir.mkdir(parents=True, exist_ok=True)
        (self.root / "Dockerfile").unlink(missing_ok=True)
        self.files.clear()


@dataclass(frozen=True)
class BuildResult:
    ok: bool
    image_tag: str | None
    log: str


@dataclass(frozen=True)
class StartResult:
    ok: bool
    container_id: str | None
    log: str


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    timed_out: bool = False

    @property
    def output(self) -> str:
        if self.stdout and self.stderr:
            return self.stdout + "\n" + self.stderr
        return self.stdout or self.stderr


@dataclass
class ContainerHandle:
    id: str
    image_tag: str
    started_at: float
    alive: bool = True


class Engine(Protocol):
    """Narrow container-engine contract: build, run, exec, rm."""

    def build(self, context_dir: Path, dockerfile: str, tag: str) -> BuildResult: ...

    def run(self, image_tag: str, mounts: Sequence[tuple[Path, str]]) -> StartResult: ...

    def exec(self, container_id: str, command: str, timeout: float) -> ExecResult: ...

    def rm(self, container_id: str) -> None: ...


# ---------------------------------------------------------------------------
# Action guard
# ---------------------------------------------------------------------------

_DENY_CATALOG: list[tuple[re.Pattern[str], str]] = [
    (
        re.compile(r"\b(?:docker|podman)\s+(?:stop|kill|rm|restart|pause)\b"),
        "stopping the container is not permitted",
    ),
    (
        re.compile(r"\b(?:docker|podman)\s+cp\b"),
        "host-to-container copies are not permitted",
    ),
    (
        re.compile(r"\b(?:docker|podman)\s+(?:run|exec|compose)\b"),
        "nested container management is not permitted",
    ),
    (
        re.compile(r"\b(?:shutdown|reboot|poweroff|halt)\b"),
        "host power management is not permitted",
    ),
]


def guard_action(action: Action) -> str | None:
    """Deterministic allow/deny check; returns a human-readable reason on
    rejection, None when allowed."""
    if action.kind in (ActionKind.WRITE_FILE, ActionKind.READ_FILE):
        try:
            workspace_relative(action.path or "")
        except WorkspaceError as exc:
            return str(exc)
        return None
    if action.kind is ActionKind.RUN_COMMAND:
        command = action.command or ""
        for pattern, reason in _DENY_CATALOG:
            if pattern.search(command):
                return reason
    return None


# ---------------------------------------------------------------------------
# Sandbox facade
# ---------------------------------------------------------------------------


class Sandbox:
    """Owns one workspace and at most one live container."""

    def __init__(self, engine: Engine, workspace: Workspace, clock=time.time):
        self.engine = engine
        self.workspace = workspace
        self.clock = clock
        self.handle: ContainerHandle | None = None
        self._tag_seq = 0

    def build_image(self, dockerfile_path: str = "Dockerfile") -> BuildResult:
        """Build from the agent-written Dockerfile; a failed build returns
        the full log for condensation."""
        dockerfile = self.workspace.root / workspace_relative(dockerfile_path)
        if not dockerfile.is_file():
            raise WorkspaceError(f"no such Dockerfile: {dockerfile_path!r}")
        self._tag_seq += 1
        tag = f"tooldriver-{uuid.uuid4().hex[:8]}-{self._tag_seq}"
        return self.engine.build(self.workspace.root, dockerfile.name, tag)

    def start_container(self, image_tag: str) -> StartResult:
        """Start a container with the workspace mounts; on success the
        handle is alive and the probe has exited 0."""
        mounts = [
            (self.workspace.files_dir, WORKSPACE_MOUNT),
            (self.workspace.results_dir, RESULTS_MOUNT),
        ]
        started = self.engine.run(image_tag, mounts)
        if not started.ok:
            return started
        handle = ContainerHandle(
            id=started.container_id or "",
            image_tag=image_tag,
            started_at=self.clock(),
        )
        probe = self.engine.exec(handle.id, PROBE_COMMAND, timeout=30.0)
        if probe.exit_code != 0:
            self.engine.rm(handle.id)
            return StartResult(
                ok=False,
                container_id=None,
                log=f"container is not responsive (probe exit {probe.exit_code})\n"
                + probe.output,
            )
        self.handle = handle
        return started

    def exec_command(
        self, command: str, timeout: float = DEFAULT_COMMAND_TIMEOUT, log_stem: str | None = None
    ) -> ExecResult:
        """Execute inside the live container; raw stdout/stderr are persisted
        under logs/ before any condensation."""
        if self.handle is None or not self.handle.alive:
            raise InvalidHandleError("no live container for this task run")
        result = self.engine.exec(self.handle.id, command, timeout)
        if log_stem:
            self.workspace.write_log(log_stem, result.stdout, result.stderr)
        return result

    def teardown(self) -> None:
        if self.handle is not None:
            try:
                self.engine.rm(self.handle.id)
            except Exception:  # engine already gone; nothing left to clean
                logger.debug("teardown of %s failed", self.handle.id, exc_info=True)
            self.handle.alive = False
            self.handle = None


# ---------------------------------------------------------------------------
# Engines
# ---------------------------------------------------------------------------


class DockerCliEngine:
    """Drives a real engine through its CLI with captured streams."""

    def __init__(self, binary: str = "docker"):
        self.binary = binary

    def _call(
        self, args: list[str], timeout: float | None = None
    ) -> subprocess.CompletedProcess:
        try:
            return subprocess.run(
                [self.binary, *args],
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except FileNotFoundError as exc:
            raise EngineUnavailableError(f"{self.binary} not found") from exc
        except OSError as exc:
            raise EngineUnavailableError(str(exc)) from exc

    def build(self, context_dir: Path, dockerfile: str, tag: str) -> BuildResult:
        proc = self._call(
            ["build", "-f", str(Path(context_dir) / dockerfile), "-t", tag, str(context_dir)]
        )
        log = proc.stdout + proc.stderr
        return BuildResult(ok=proc.returncode == 0, image_tag=tag if proc.returncode == 0 else None, log=log)

    def run(self, image_tag: str, mounts: Sequence[tuple[Path, str]]) -> StartResult:
        args = ["run", "-d"]
        for host, target in mounts:
            args += ["-v", f"{Path(host).resolve()}:{target}"]
        args += ["-w", WORKSPACE_MOUNT, image_tag, "sleep", "infinity"]
        proc = self._call(args)
        if proc.returncode != 0:
            stderr = proc.stderr
            if "No such image" in stderr or "pull access denied" in stderr:
                raise ImageNotFoundError(stderr.strip())
            return StartResult(ok=False, container_id=None, log=proc.stdout + stderr)
        container_id = proc.stdout.strip()
        inspect = self._call(["inspect", "-f", "{{.State.Running}}", container_id])
        if inspect.stdout.strip() != "true":
            logs = self._call(["logs", container_id]).stdout
            self.rm(container_id)
            return StartResult(
                ok=False,
                container_id=None,
                log="container exited immediately\n" + logs,
            )
        return StartResult(ok=True, container_id=container_id, log=proc.stdout)

    def exec(self, container_id: str, command: str, timeout: float) -> ExecResult:
        start = time.monotonic()
        try:
            proc = subprocess.run(
                [self.binary, "exec", container_id, "sh", "-lc", command],
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired as exc:
            return ExecResult(
                exit_code=124,
                stdout=_as_text(exc.stdout),
                stderr=_as_text(exc.stderr),
                duration=time.monotonic() - start,
                timed_out=True,
            )
        except FileNotFoundError as exc:
            raise EngineUnavailableError(f"{self.binary} not found") from exc
        duration = time.monotonic() - start
        if proc.returncode == 125 or "is not running" in proc.stderr:
            raise ContainerDiedError(proc.stderr.strip() or "container is not running")
        return ExecResult(
            exit_code=proc.returncode,
            stdout=proc.stdout,
            stderr=proc.stderr,
            duration=duration,
        )

    def rm(self, container_id: str) -> None:
        self._call(["rm", "-f", container_id])


def _as_text(raw: bytes | str | None) -> str:
    if raw is None:
        return ""
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="replace")
    return raw


class ScriptedEngine:
    """Replays a recorded/authored engine script, in order.

    Script entries (JSONL-friendly dicts)::

        {"op": "build", "ok": true, "image_tag": "img-1", "log": "..."}
        {"op": "start", "ok": true, "container_id": "c-1", "log": ""}
        {"op": "probe", "exit_code": 0}
        {"op": "exec", "expect": "klee --version", "exit_code": 0,
         "stdout": "...", "stderr": "", "duration": 0.5,
         "materialize": {"klee-out/test000001.ktest": "..."}}

    ``materialize`` writes files under the host directory mounted at
    ``/results``, simulating artifacts the container produced.  Probe execs
    are synthesized as success unless the next entry is an explicit probe.
    """

    def __init__(self, entries: Sequence[dict[str, Any]]):
        self.entries = list(entries)
        self.cursor = 0
        self.removed: list[str] = []
        self._results_root: Path | None = None

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScriptedEngine":
        entries = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries)

    def _next(self, op: str) -> dict[str, Any]:
        if self.cursor >= len(self.entries):
            raise EngineScriptError(f"engine script exhausted before {op!r}")
        entry = self.entries[self.cursor]
        if entry["op"] != op:
            raise EngineScriptError(
                f"engine script expected {entry['op']!r} but run asked for {op!r} "
                f"(entry {self.cursor})"
            )
        self.cursor += 1
        return entry

    def build(self, context_dir: Path, dockerfile: str, tag: str) -> BuildResult:
        entry = self._next("build")
        ok = bool(entry.get("ok", True))
        return BuildResult(
            ok=ok,
            image_tag=entry.get("image_tag", tag) if ok else None,
            log=entry.get("log", ""),
        )

    def run(self, image_tag: str, mounts: Sequence[tuple[Path, str]]) -> StartResult:
        entry = self._next("start")
        for host, target in mounts:
            if target == RESULTS_MOUNT:
                self._results_root = Path(host)
        ok = bool(entry.get("ok", True))
        return StartResult(
            ok=ok,
            container_id=entry.get("container_id", "scripted") if ok else None,
            log=entry.get("log", ""),
        )

    def exec(self, container_id: str, command: str, timeout: float) -> ExecResult:
        if command == PROBE_COMMAND:
            if self.cursor < len(self.entries) and self.entries[self.cursor]["op"] == "probe":
                entry = self._next("probe")
                return ExecResult(int(entry.get("exit_code", 0)), "", "", 0.01)
            return ExecResult(0, "", "", 0.01)
        entry = self._next("exec")
        expect = entry.get("expect")
        if expect is not None and expect not in command:
            raise EngineScriptError(
                f"engine script entry {self.cursor - 1} expects {expect!r} "
                f"but the run issued {command!r}"
            )
        for rel, content in (entry.get("materialize") or {}).items():
            if self._results_root is None:
                raise EngineScriptError("materialize before the results mount is known")
            target = self._results_root / workspace_relative(rel)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, encoding="utf-8")
        return ExecResult(
            exit_code=int(entry.get("exit_code", 0)),
            stdout=entry.get("stdout", ""),
            stderr=entry.get("stderr", ""),
            duration=float(entry.get("duration", 0.1)),
            timed_out=bool(entry.get("timed_out", False)),
        )

    def rm(self, container_id: str) -> None:
        self.removed.append(container_id)


class RecordingEngine:
    """Wraps a real engine and captures its results as a ScriptedEngine
    script (materialized artifacts are not captured; the original results
    directory already holds them)."""

    def __init__(self, inner: Engine):
        self.inner = inner
        self.entries: list[dict[str, Any]] = []

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for entry in self.entries:
                handle.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")

    def build(self, context_dir: Path, dockerfile: str, tag: str) -> BuildResult:
        result = self.inner.build(context_dir, dockerfile, tag)
        self.entries.append(
            {"op": "build", "ok": result.ok, "image_tag": result.image_tag, "log": result.log}
        )
        return result

    def run(self, image_tag: str, mounts: Sequence[tuple[Path, str]]) -> StartResult:
        result = self.inner.run(image_tag, mounts)
        self.entries.append(
            {
                "op": "start",
                "ok": result.ok,
                "container_id": result.container_id,
                "log": result.log,
            }
        )
        return result

    def exec(self, container_id: str, command: str, timeout: float) -> ExecResult:
        result = self.inner.exec(container_id, command, timeout)
        entry: dict[str, Any] = {
            "op": "probe" if command == PROBE_COMMAND else "exec",
            "exit_code": result.exit_code,
        }
        if command != PROBE_COMMAND:
            entry.update(
                expect=command,
                stdout=result.stdout,
                stderr=result.stderr,
                duration=result.duration,
                timed_out=result.timed_out,
            )
        self.entries.append(entry)
        return result

    def rm(self, container_id: str) -> None:
        self.inner.rm(container_id)
