"""Deterministic per-tool evidence checks.

Three rule families per tool profile: structural (expected files and
directories exist), project-reference (logs or artifacts mention the target
project), and semantic (tool-specific progress indicators, advisory only).
Used both as judge pre-checks and by the standalone verify command.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .errors import UnknownProfileError
from .task import ProjectSpec

_MAX_WITNESS_CHARS = 200
_MAX_ARTIFACT_BYTES = 1_000_000


@dataclass(frozen=True)
class StructuralRule:
    glob: str
    min_count: int = 1


@dataclass(frozen=True)
class ReferenceRule:
    scope: str  # "logs" or "artifacts"
    kind: str  # path | symbol | build-artifact
    glob: str = "**/*"


@dataclass(frozen=True)
class SemanticRule:
    pattern: str
    meaning: str


@dataclass(frozen=True)
class CheckProfile:
    tool: str
    structural: tuple[StructuralRule, ...]
    project_reference: tuple[ReferenceRule, ...]
    semantic: tuple[SemanticRule, ...]
    reference_sketch: str = ""
    version: int = 1

    def __post_init__(self) -> None:
        if not self.structural:
            raise ValueError(f"profile {self.tool!r} needs at least one structural rule")
        for rule in self.semantic:
            re.compile(rule.pattern)


@dataclass(frozen=True)
class RuleResult:
    rule: str
    passed: bool
    witness: str  # concrete match on pass, absence note on fail


@dataclass(frozen=True)
class CheckReport:
    results: tuple[RuleResult, ...]
    semantic: tuple[RuleResult, ...]
    overall: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": self.overall,
            "results": [vars(r) for r in self.results],
            "semantic": [vars(r) for r in self.semantic],
        }


@lru_cache(maxsize=4)
def load_profiles(path: str | None = None) -> dict[str, CheckProfile]:
    if path is None:
        raw = resources.files("tooldriver.data").joinpath("profiles.json").read_text()
    else:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read()
    doc = json.loads(raw)
    version = int(doc.get("version", 1))
    profiles = {}
    for tool, body in doc["profiles"].items():
        profiles[tool] = CheckProfile(
            tool=tool,
            structural=tuple(
                StructuralRule(r["glob"], int(r.get("min_count", 1)))
                for r in body["structural"]
            ),
            project_reference=tuple(
                ReferenceRule(r.get("scope", "logs"), r.get("kind", "path"), r.get("glob", "**/*"))
                for r in body.get("project_reference", [])
            ),
            semantic=tuple(
                SemanticRule(r["pattern"], r["meaning"]) for r in body.get("semantic", [])
            ),
            reference_sketch=body.get("reference_sketch", ""),
            version=version,
        )
    return profiles


def get_profile(tool: str) -> CheckProfile:
    profiles = load_profiles()
    if tool not in profiles:
        raise UnknownProfileError(f"no evidence profile registered for {tool!r}")
    return profiles[tool]


def _short(text: str) -> str:
    text = text.strip()
    return text[:_MAX_WITNESS_CHARS]


def _artifact_text(results_dir: Path, glob: str) -> list[tuple[str, str]]:
    out = []
    for path in sorted(results_dir.glob(glob)):
        if path.is_file():
            try:
                out.append(
                    (
                        path.relative_to(results_dir).as_posix(),
                        path.read_bytes()[:_MAX_ARTIFACT_BYTES].decode("utf-8", "replace"),
                    )
                )
            except OSError:
                continue
    return out


def run_checks(
    profile: CheckProfile, results_dir: Path | str, logs: str, project: ProjectSpec
) -> CheckReport:
    """Pure function of its inputs; every verdict carries a witness.

    Overall pass requires every structural and project-reference rule to
    pass; semantic rules are reported but never gate.
    """
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise OSError(f"results directory not readable: {results_dir}")

    results: list[RuleResult] = []
    for rule in profile.structural:
        matches = sorted(p.relative_to(results_dir).as_posix() for p in results_dir.glob(rule.glob))
        name = f"structural:{rule.glob}"
        if len(matches) >= rule.min_count:
            witness = matches[0] if matches else "(vacuously satisfied)"
            results.append(RuleResult(name, True, witness))
        else:
            results.append(
                RuleResult(
                    name,
                    False,
                    f"no match for {rule.glob!r} under results/ "
                    f"(found {len(matches)}, expected >= {rule.min_count})",
                )
            )

    tokens = _reference_tokens(project)
    for rule in profile.project_reference:
        name = f"project-reference:{rule.scope}:{rule.kind}"
        corpora: list[tuple[str, str]] = []
        if rule.scope == "logs":
            corpora.append(("logs", logs))
        else:
            corpora.extend(_artifact_text(results_dir, rule.glob))
        witness = None
        for source, text in corpora:
            for line in text.split("\n"):
                if any(token in line for token in tokens):
                    witness = f"{source}: {_short(line)}"
                    break
            if witness:
                break
        if witness:
            results.append(RuleResult(name, True, witness))
        else:
            results.append(
                RuleResult(
                    name,
                    False,
                    f"no reference to {' or '.join(repr(t) for t in tokens)} "
                    f"in {rule.scope}",
                )
            )

    semantic: list[RuleResult] = []
    for rule in profile.semantic:
        name = f"semantic:{rule.meaning}"
        match = re.search(rule.pattern, logs, re.MULTILINE)
        if match is None:
            for _, text in _artifact_text(results_dir, "**/*"):
                match = re.search(rule.pattern, text, re.MULTILINE)
                if match:
                    break
        if match:
            semantic.append(RuleResult(name, True, _short(match.group(0))))
        else:
            semantic.append(RuleResult(name, False, f"pattern {rule.pattern!r} not seen"))

    overall = all(r.passed for r in results)
    return CheckReport(results=tuple(results), semantic=tuple(semantic), overall=overall)


def _reference_tokens(project: ProjectSpec) -> list[str]:
    tokens = [project.name]
    if project.pinned_revision:
        tokens.append(project.pinned_revision)
    return tokens


# ---------------------------------------------------------------------------
# Output-statistic extraction
# ---------------------------------------------------------------------------


def _to_number(text: str) -> float | int:
    cleaned = text.replace(",", "")
    value = float(cleaned)
    return int(value) if value.is_integer() and "." not in cleaned else value


def _search_number(pattern: str, *texts: str) -> float | int | None:
    for text in texts:
        match = re.search(pattern, text, re.MULTILINE | re.IGNORECASE)
        if match:
            try:
                return _to_number(match.group(1))
            except ValueError:
                continue
    return None


def _klee_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    corpus = logs + "\n" + "\n".join(t for _, t in _artifact_text(results_dir, "**/info"))
    stats: dict[str, float | int] = {}
    ktests = [p for p in results_dir.rglob("*.ktest") if p.is_file()]
    if ktests:
        stats["test_cases"] = len(ktests)
    for key, pattern in (
        ("completed_paths", r"KLEE: done:\s*completed paths\s*=\s*(\d+)"),
        ("partial_paths", r"KLEE: done:\s*partially explored paths\s*=\s*(\d+)"),
        ("generated_tests", r"KLEE: done:\s*generated tests\s*=\s*(\d+)"),
        ("instructions", r"KLEE: done:\s*total instructions\s*=\s*(\d+)"),
    ):
        value = _search_number(pattern, corpus)
        if value is not None:
            stats[key] = value
    return stats


def _afl_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    stats: dict[str, float | int] = {}
    corpus = "\n".join(t for _, t in _artifact_text(results_dir, "**/fuzzer_stats")) or logs
    for key, pattern in (
        ("execs_per_sec", r"execs_per_sec\s*:\s*([\d.]+)"),
        ("coverage_percent", r"(?:bitmap_cvg|map_density)\s*:\s*([\d.]+)%"),
        ("corpus_size", r"(?:corpus_count|paths_total)\s*:\s*(\d+)"),
        ("execs_done", r"execs_done\s*:\s*(\d+)"),
    ):
        value = _search_number(pattern, corpus)
        if value is not None:
            stats[key] = value
    queue = [p for p in results_dir.rglob("queue/*") if p.is_file()]
    if queue and "corpus_size" not in stats:
        stats["corpus_size"] = len(queue)
    return stats


def _csa_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    stats: dict[str, float | int] = {}
    bugs = _search_number(r"scan-build: (\d+) bugs? found", logs)
    if bugs is not None:
        stats["bugs_reported"] = bugs
    reports = [p for p in results_dir.rglob("report-*.html") if p.is_file()]
    if reports:
        stats.setdefault("bugs_reported", len(reports))
    return stats


def _cflow_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    stats: dict[str, float | int] = {}
    texts = [t for _, t in _artifact_text(results_dir, "**/*")] or [logs]
    best = max(texts, key=len, default="")
    lines = [line for line in best.split("\n") if line.strip()]
    if lines:
        stats["output_lines"] = len(lines)
        functions = {m.group(1) for m in re.finditer(r"\b(\w+)\(\)", best)}
        if functions:
            stats["functions_listed"] = len(functions)
    return stats


def _infer_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    stats: dict[str, float | int] = {}
    for rel, text in _artifact_text(results_dir, "**/report.json"):
        try:
            stats["issues_reported"] = len(json.loads(text))
            return stats
        except json.JSONDecodeError:
            continue
    issues = _search_number(r"Found (\d+) issues?", logs)
    if issues is not None:
        stats["issues_reported"] = issues
    return stats


def _wala_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    corpus = logs + "\n" + "\n".join(t for _, t in _artifact_text(results_dir, "**/*"))
    stats: dict[str, float | int] = {}
    for key, pattern in (
        ("call_graph_nodes", r"nodes\s*[:=]\s*([\d,]+)"),
        ("call_graph_edges", r"edges\s*[:=]\s*([\d,]+)"),
        ("cha_classes", r"classes\s*[:=]\s*([\d,]+)"),
    ):
        value = _search_number(pattern, corpus)
        if value is not None:
            stats[key] = value
    return stats


def _sjk_stats(results_dir: Path, logs: str) -> dict[str, float | int]:
    corpus = logs + "\n" + "\n".join(t for _, t in _artifact_text(results_dir, "**/*"))
    stats: dict[str, float | int] = {}
    cpu = _search_number(r"process cpu\s*[=:]\s*([\d.]+)%", corpus)
    if cpu is not None:
        stats["process_cpu_percent"] = cpu
    threads = len(re.findall(r'^"[^"]+"', corpus, re.MULTILINE))
    if threads:
        stats["thread_count"] = threads
    return stats


_EXTRACTORS: dict[str, Callable[[Path, str], dict[str, float | int]]] = {
    "klee": _klee_stats,
    "aflpp": _afl_stats,
    "csa": _csa_stats,
    "cflow": _cflow_stats,
    "infer": _infer_stats,
    "wala": _wala_stats,
    "sjk": _sjk_stats,
}


def extract_output_stats(
    profile: CheckProfile, results_dir: Path | str, logs: str
) -> dict[str, float | int]:
    """Named per-tool metrics parsed from artifacts and logs.

    A metric that cannot be parsed from a concrete source is absent from the
    map, never fabricated.
    """
    extractor = _EXTRACTORS.get(profile.tool)
    if extractor is None:
        return {}
    return extractor(Path(results_dir), logs)
