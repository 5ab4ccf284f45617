"""Command-line entry points: run, batch, verify, report, record.

Exit codes are a stable contract for CI: 0 success, 1 task or verification
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from decimal import Decimal
from pathlib import Path

from . import checks as checks_mod
from .agent import AgentConfig, DeterministicClock, TaskRunner
from .errors import ManifestError, StatError, ToolDriverError
from .llm import ExchangeStore, HttpBackend, ReplayBackend, RecordingBackend, load_pricing
from .sandbox import DockerCliEngine, RecordingEngine, ScriptedEngine
from .stats import RunRecord, aggregate
from .task import TaskSpec, parse_duration, parse_manifest, parse_money, validate_task

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

DEFAULT_AGENT_LABEL = "staged"

EXCHANGES_FILE = "exchanges.jsonl"
ENGINE_FILE = "engine.jsonl"


class CliError(Exception):
    """Configuration problem; maps to exit code 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tooldriver",
        description="Automate installing and running program-analysis tools "
        "on pinned projects inside containers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--manifest", help="task manifest (YAML)")
        p.add_argument("--task", help="task id, <tool>:<project>")
        p.add_argument("--model", default="gpt-5-nano", help="model id from the pricing table")
        p.add_argument("--max-cycles", type=int, help="override the cycle budget")
        p.add_argument("--cost-cap", help="override the cost cap (USD)")
        p.add_argument("--timeout", help="override the wall-clock limit (e.g. 2h)")
        p.add_argument("--replay", help="replay archive directory (offline)")
        p.add_argument("--record", help="record a replay archive to this directory")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--agent", default=DEFAULT_AGENT_LABEL, help="agent label for the output tree")
        p.add_argument("--rep", type=int, default=1, help="repetition index for the output tree")
        p.add_argument("--engine", default=os.environ.get("TOOLDRIVER_ENGINE", "docker"))

    p_run = sub.add_parser("run", help="run one task")
    common(p_run)

    p_batch = sub.add_parser("batch", help="run every task in the manifest")
    common(p_batch)
    p_batch.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p_batch.add_argument("--reps", type=int, default=1)

    p_record = sub.add_parser("record", help="run one task while recording a replay archive")
    common(p_record)

    p_verify = sub.add_parser("verify", help="re-run evidence checks on an existing run")
    p_verify.add_argument("--dir", required=True, help="run directory (workspace root)")
    p_verify.add_argument("--profile", required=True, help="evidence profile name")
    p_verify.add_argument("--repo-url", required=True)
    p_verify.add_argument("--revision", required=True)
    p_verify.add_argument("--rebuild", action="store_true", help="also rebuild the Dockerfile")
    p_verify.add_argument("--engine", default=os.environ.get("TOOLDRIVER_ENGINE", "docker"))

    p_report = sub.add_parser("report", help="aggregate runs into a statistical report")
    p_report.add_argument("--out", help="output tree to scan for outcome.json files")
    p_report.add_argument("--records", help="run-record file (.jsonl or .csv)")
    p_report.add_argument("--verified", help="verification verdicts (.jsonl), one row per run")
    p_report.add_argument("--reference", help="reference agent for pairwise tests")
    p_report.add_argument("--report-out", help="write the JSON report here")

    return parser


def _select_task(args) -> TaskSpec:
    if not args.manifest:
        raise CliError("--manifest is required")
    try:
        tasks = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read manifest: {exc}") from exc
    if not tasks:
        raise CliError("manifest defines no tasks")
    if args.task:
        matches = [t for t in tasks if t.id == args.task]
        if not matches:
            raise CliError(
                f"no task {args.task!r} in manifest (available: "
                + ", ".join(t.id for t in tasks)
                + ")"
            )
        task = matches[0]
    elif len(tasks) == 1:
        task = tasks[0]
    else:
        raise CliError("manifest defines several tasks; pick one with --task")
    return _apply_overrides(task, args)


def _apply_overrides(task: TaskSpec, args) -> TaskSpec:
    budget = task.budget
    if args.max_cycles is not None:
        budget = replace(budget, max_cycles=args.max_cycles)
    if args.cost_cap is not None:
        budget = replace(budget, cost_cap=parse_money(args.cost_cap))
    if args.timeout is not None:
        budget = replace(budget, wall_clock_limit=parse_duration(args.timeout))
    task = replace(task, budget=budget)
    return validate_task(task, known_profiles=checks_mod.load_profiles().keys())


def _resolve_profile(model_id: str):
    pricing = load_pricing()
    if model_id not in pricing:
        raise CliError(
            f"unknown model {model_id!r}; pricing table knows: " + ", ".join(sorted(pricing))
        )
    return pricing[model_id]


def _make_backend_engine(args, replay_dir: Path | None):
    """Wire (backend, engine, clock, finalizer) per the replay/record flags."""
    if replay_dir is not None and args.record:
        raise CliError("--replay and --record are mutually exclusive")
    if replay_dir is not None:
        exchanges = replay_dir / EXCHANGES_FILE
        engine_script = replay_dir / ENGINE_FILE
        if not exchanges.is_file() or not engine_script.is_file():
            raise CliError(f"replay archive incomplete under {replay_dir}")
        backend = ReplayBackend(ExchangeStore.load(exchanges))
        engine = ScriptedEngine.from_jsonl(engine_script)
        return backend, engine, DeterministicClock(), lambda: None

    if not os.environ.get("OPENAI_API_KEY"):
        raise CliError("live mode needs OPENAI_API_KEY (or use --replay)")
    backend = HttpBackend()
    engine = DockerCliEngine(binary=args.engine)
    if args.record:
        record_dir = Path(args.record)
        record_dir.mkdir(parents=True, exist_ok=True)
        store = ExchangeStore()
        backend = RecordingBackend(backend, store)
        engine = RecordingEngine(engine)

        def _finalize() -> None:
            store.save(record_dir / EXCHANGES_FILE)
            engine.save(record_dir / ENGINE_FILE)

        return backend, engine, time.time, _finalize
    return backend, engine, time.time, lambda: None


def _run_one(task: TaskSpec, args, rep: int, replay_dir: Path | None) -> int:
    profile = _resolve_profile(args.model)
    backend, engine, clock, finalize = _make_backend_engine(args, replay_dir)
    run_dir = Path(args.out) / args.agent / args.model / task.id.replace(":", "_") / str(rep)
    run_dir.mkdir(parents=True, exist_ok=True)
    runner = TaskRunner(
        task, backend, engine, run_dir / "workspace", profile, AgentConfig(), clock=clock
    )
    outcome, _records = runner.run_task()
    finalize()
    outcome_doc = {
        "agent": args.agent,
        "model": args.model,
        "task": task.id,
        "repetition": rep,
        "self_validated": outcome.self_validated,
        **outcome.to_dict(),
    }
    (run_dir / "outcome.json").write_text(
        json.dumps(outcome_doc, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(
        f"{task.id} [{args.model}] -> {outcome.status.value} "
        f"({outcome.cycles_used} cycles, ${outcome.cost}, {outcome.duration:.0f}s)"
    )
    return EXIT_OK if outcome.self_validated else EXIT_FAILURE


def cmd_run(args) -> int:
    task = _select_task(args)
    replay_dir = Path(args.replay) if args.replay else None
    return _run_one(task, args, args.rep, replay_dir)


def cmd_record(args) -> int:
    if not args.record:
        raise CliError("record requires --record <dir>")
    return cmd_run(args)


def cmd_batch(args) -> int:
    if not args.manifest:
        raise CliError("--manifest is required")
    if args.reps < 1:
        raise CliError("--reps must be at least 1")
    tasks = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    if not tasks:
        raise CliError("manifest defines no tasks")
    tasks = [_apply_overrides(t, args) for t in tasks]
    jobs: list[tuple[TaskSpec, int, Path | None]] = []
    for task in tasks:
        for rep in range(1, args.reps + 1):
            replay_dir = None
            if args.replay:
                candidate = Path(args.replay) / task.id.replace(":", "_")
                replay_dir = candidate if candidate.is_dir() else Path(args.replay)
            jobs.append((task, rep, replay_dir))
    worst = EXIT_OK
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = [
            pool.submit(_run_one, task, args, rep, replay_dir)
            for task, rep, replay_dir in jobs
        ]
        for future in futures:
            worst = max(worst, future.result())
    return worst


def cmd_verify(args) -> int:
    from .task import ProjectSpec

    run_dir = Path(args.dir)
    results_dir = run_dir / "results"
    if not results_dir.is_dir():
        results_dir = run_dir  # allow pointing straight at a results directory
    profiles = checks_mod.load_profiles()
    if args.profile not in profiles:
        raise CliError(
            f"unknown evidence profile {args.profile!r}; known: " + ", ".join(sorted(profiles))
        )
    profile = profiles[args.profile]
    logs = ""
    logs_dir = run_dir / "logs"
    if logs_dir.is_dir():
        logs = "\n".join(
            p.read_text(encoding="utf-8", errors="replace")
            for p in sorted(logs_dir.glob("*.out")) + sorted(logs_dir.glob("*.err"))
        )
    project = ProjectSpec(repo_url=args.repo_url, pinned_revision=args.revision)
    report = checks_mod.run_checks(profile, results_dir, logs, project)
    stats = checks_mod.extract_output_stats(profile, results_dir, logs)
    doc = {"check_report": report.to_dict(), "output_stats": stats}

    if args.rebuild:
        dockerfile = run_dir / "Dockerfile"
        if not dockerfile.is_file():
            raise CliError(f"--rebuild: no Dockerfile under {run_dir}")
        engine = DockerCliEngine(binary=args.engine)
        build = engine.build(run_dir, "Dockerfile", "tooldriver-verify")
        doc["rebuild"] = {"ok": build.ok, "log_tail": build.log[-2000:]}
        print("rebuild:", "ok" if build.ok else "FAILED")

    out_path = run_dir / "verify_report.json"
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    for result in report.results:
        print(("PASS " if result.passed else "FAIL ") + result.rule + " :: " + result.witness)
    for result in report.semantic:
        print(("note " if result.passed else "miss ") + result.rule)
    if stats:
        print("output stats:", json.dumps(stats, sort_keys=True))
    print("overall:", "PASS" if report.overall else "FAIL")
    rebuild_ok = doc.get("rebuild", {}).get("ok", True)
    return EXIT_OK if report.overall and rebuild_ok else EXIT_FAILURE


def _records_from_tree(root: Path) -> list[RunRecord]:
    records = []
    for outcome_path in sorted(root.rglob("outcome.json")):
        doc = json.loads(outcome_path.read_text(encoding="utf-8"))
        records.append(
            RunRecord(
                agent=doc["agent"],
                model=doc["model"],
                task=doc["task"],
                repetition=int(doc["repetition"]),
                self_validated=bool(doc["self_validated"]),
                verified=doc.get("verified"),
                cycles=int(doc["cycles_used"]),
                cost=float(Decimal(doc["cost"])),
                duration=float(doc["duration"]),
                retries=int(doc.get("retries", 0)),
            )
        )
    return records


def _records_from_file(path: Path) -> list[RunRecord]:
    rows: list[dict] = []
    if path.suffix == ".csv":
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    else:
        with open(path, encoding="utf-8") as handle:
            rows = [json.loads(line) for line in handle if line.strip()]
    records = []
    for row in rows:
        verified = row.get("verified")
        if isinstance(verified, str):
            verified = None if verified in ("", "unknown") else verified.lower() == "true"
        records.append(
            RunRecord(
                agent=str(row["agent"]),
                model=str(row["model"]),
                task=str(row["task"]),
                repetition=int(row.get("repetition", 1)),
                self_validated=str(row["self_validated"]).lower() in ("true", "1"),
                verified=verified,
                cycles=int(float(row.get("cycles", 0))),
                cost=float(row.get("cost", 0.0)),
                duration=float(row.get("duration", 0.0)),
                retries=int(float(row.get("retries", 0))),
            )
        )
    return records


def _apply_verified(records: list[RunRecord], path: Path) -> list[RunRecord]:
    verdicts: dict[tuple[str, str, str, int], bool] = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            doc = json.loads(line)
            key = (
                doc["agent"],
                doc["model"],
                doc["task"],
                int(doc.get("repetition", 1)),
            )
            verdicts[key] = bool(doc["verified"])
    out = []
    for rec in records:
        key = (rec.agent, rec.model, rec.task, rec.repetition)
        if key in verdicts:
            rec = RunRecord(
                agent=rec.agent,
                model=rec.model,
                task=rec.task,
                repetition=rec.repetition,
                self_validated=rec.self_validated,
                verified=verdicts[key] and rec.self_validated,
                cycles=rec.cycles,
                cost=rec.cost,
                duration=rec.duration,
                retries=rec.retries,
            )
        out.append(rec)
    return out


def cmd_report(args) -> int:
    if bool(args.out) == bool(args.records):
        raise CliError("report needs exactly one of --out or --records")
    if args.records:
        records = _records_from_file(Path(args.records))
    else:
        records = _records_from_tree(Path(args.out))
    if not records:
        raise CliError("no run records found")
    if args.verified:
        records = _apply_verified(records, Path(args.verified))
    try:
        report = aggregate(records, reference=args.reference)
    except StatError as exc:
        raise CliError(str(exc)) from exc
    print(report.render_table())
    for comp in report.comparisons:
        or_txt = (
            f"OR={comp.odds_ratio.odds_ratio:.1f} "
            f"[{comp.odds_ratio.low:.1f}, {comp.odds_ratio.high:.1f}]"
            if comp.odds_ratio
            else "OR=?"
        )
        cmh_txt = (
            f"CMH chi2={comp.cmh.chi_square:.1f} (p={comp.cmh.p_value:.2g}, "
            f"common OR={comp.cmh.common_odds_ratio:.1f})"
            if comp.cmh
            else "CMH: n/a"
        )
        fisher_txt = (
            f"fisher p={comp.fisher_p:.3g} (adj {comp.fisher_p_adjusted:.3g})"
            if comp.fisher_p is not None
            else "fisher: n/a"
        )
        h_txt = f"h={comp.cohens_h:.2f}" if comp.cohens_h is not None else "h=?"
        print(f"{comp.reference} vs {comp.other}: {fisher_txt}; {h_txt}; {or_txt}; {cmh_txt}")
    if report.judge_fp_rate is not None:
        print(
            f"judge: accepted {report.judge_accepted}, "
            f"false positives {report.judge_false_positives}/{report.judge_verified_known} "
            f"({100 * report.judge_fp_rate:.1f}%)"
        )
    if args.report_out:
        Path(args.report_out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("TOOLDRIVER_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "batch": cmd_batch,
        "record": cmd_record,
        "verify": cmd_verify,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ToolDriverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
