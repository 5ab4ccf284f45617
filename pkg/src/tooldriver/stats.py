"""Success/efficiency aggregation, exact tests, and failure signatures.

The exact tests (Fisher, McNemar, binomial) are computed from closed-form
tail sums over ``math.comb`` so they agree with brute-force enumeration to
floating-point precision.  The chi-square(1) tail uses the complementary
error function of sqrt(x/2).
"""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Sequence

from .condense import CondenserConfig, default_config, match_categories
from .errors import StatError
from .judge import SUBMISSION_REJECTED_PREFIX
from .task import ActionKind, CycleRecord

#: two-sided 95% normal quantile
Z95 = 1.959963984540054

COMPILE_FIX_LOOP = "compile_fix_loop"
VALIDATION_THRASH = "validation_thrash"
COMPILE_FIX_THRESHOLD = 3
VALIDATION_THRASH_THRESHOLD = 5

#: condenser categories that count as compilation failures
_COMPILE_CATEGORIES = {"compile", "linker"}


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts [[a, b], [c, d]]: rows are groups, columns success/failure."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c, self.d) < 0:
            raise StatError("contingency counts must be non-negative")
        if self.n == 0:
            raise StatError("contingency table must be non-empty")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


def fisher_one_sided(table: ContingencyTable2x2) -> float:
    """Exact hypergeometric tail P(A >= a) (group 1 succeeds more)."""
    a, b, c, d = table.a, table.b, table.c, table.d
    row1, row2 = a + b, c + d
    col1 = a + c
    if row1 == 0 or row2 == 0 or col1 == 0 or col1 == table.n:
        raise StatError("fisher test undefined: empty margin")
    denom = math.comb(table.n, col1)
    upper = min(row1, col1)
    tail = sum(math.comb(row1, k) * math.comb(row2, col1 - k) for k in range(a, upper + 1))
    return tail / denom


def mcnemar_one_sided(b: int, c: int) -> float:
    """Exact binomial tail P(X >= b), X ~ Binomial(b + c, 1/2)."""
    if b < 0 or c < 0:
        raise StatError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        raise StatError("mcnemar test undefined: no discordant pairs")
    return sum(math.comb(n, i) for i in range(b, n + 1)) / 2**n


def binomial_vs_half(k: int, n: int) -> float:
    """Exact binomial tail P(X >= k) under p = 1/2."""
    if not 0 <= k <= n:
        raise StatError(f"need 0 <= k <= n, got k={k}, n={n}")
    return sum(math.comb(n, i) for i in range(k, n + 1)) / 2**n


def holm_bonferroni(p_values: Sequence[float]) -> list[float]:
    """Step-down adjustment, monotone, capped at 1, order-preserving."""
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise StatError(f"p value out of range: {p}")
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, idx in enumerate(order):
        candidate = min(1.0, (m - rank) * p_values[idx])
        running = max(running, candidate)
        adjusted[idx] = running
    return adjusted


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score bounds for a binomial proportion."""
    if n <= 0:
        raise StatError("wilson interval undefined for n = 0")
    if not 0 <= k <= n:
        raise StatError(f"need 0 <= k <= n, got k={k}, n={n}")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def cohens_h(p1: float, p2: float) -> float:
    """h = 2 arcsin(sqrt(p1)) - 2 arcsin(sqrt(p2))."""
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise StatError("proportions must be in [0, 1]")
    return 2.0 * math.asin(math.sqrt(p1)) - 2.0 * math.asin(math.sqrt(p2))


@dataclass(frozen=True)
class OddsRatioResult:
    odds_ratio: float
    low: float
    high: float
    corrected: bool  # 0.5 added to every cell because some cell was zero


def odds_ratio_ci(table: ContingencyTable2x2, z: float = Z95) -> OddsRatioResult:
    """Woolf (log) interval: OR = ad/bc, CI = exp(ln OR +/- z*SE)."""
    a, b, c, d = (float(x) for x in (table.a, table.b, table.c, table.d))
    corrected = min(a, b, c, d) == 0.0
    if corrected:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    ratio = (a * d) / (b * c)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return OddsRatioResult(
        odds_ratio=ratio,
        low=ratio * math.exp(-z * se),
        high=ratio * math.exp(z * se),
        corrected=corrected,
    )


def chi2_sf1(x: float) -> float:
    """Chi-square(1) survival function via erfc(sqrt(x/2)).

    Relative precision better than 1e-10 over x in [0, 200].
    """
    if x < 0:
        raise StatError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class CmhResult:
    chi_square: float
    p_value: float
    common_odds_ratio: float
    excluded_strata: int = 0


def cmh_test(strata: Sequence[ContingencyTable2x2]) -> CmhResult:
    """Cochran-Mantel-Haenszel test without continuity correction.

    chi2 = (sum a_i - sum E[a_i])^2 / sum Var(a_i) and the Mantel-Haenszel
    common odds ratio sum(a_i d_i / N_i) / sum(b_i c_i / N_i).  Strata with a
    zero margin are excluded and counted.
    """
    if len(strata) < 1:
        raise StatError("cmh test needs at least one stratum")
    usable = []
    excluded = 0
    for t in strata:
        margins = (t.a + t.b, t.c + t.d, t.a + t.c, t.b + t.d)
        if min(margins) == 0 or t.n < 2:
            excluded += 1
            continue
        usable.append(t)
    if not usable:
        raise StatError("cmh test undefined: every stratum degenerate")
    sum_a = 0.0
    sum_e = 0.0
    sum_var = 0.0
    or_num = 0.0
    or_den = 0.0
    for t in usable:
        n = float(t.n)
        row1, row2 = t.a + t.b, t.c + t.d
        col1, col2 = t.a + t.c, t.b + t.d
        sum_a += t.a
        sum_e += row1 * col1 / n
        sum_var += row1 * row2 * col1 * col2 / (n * n * (n - 1.0))
        or_num += t.a * t.d / n
        or_den += t.b * t.c / n
    chi2 = (sum_a - sum_e) ** 2 / sum_var
    common_or = or_num / or_den if or_den > 0 else math.inf
    return CmhResult(
        chi_square=chi2,
        p_value=chi2_sf1(chi2),
        common_odds_ratio=common_or,
        excluded_strata=excluded,
    )


# ---------------------------------------------------------------------------
# Failure signatures
# ---------------------------------------------------------------------------


def detect_failure_signatures(
    trajectory: Sequence[CycleRecord], config: CondenserConfig | None = None
) -> set[str]:
    """Pure trajectory scan for the two quantified failure signatures.

    ``compile_fix_loop``: >= 3 consecutive command observations whose
    condensed output matches compilation/linker failure patterns, with no
    other command in between.  ``validation_thrash``: >= 5 judge rejections.
    """
    config = config or default_config()
    signatures: set[str] = set()
    streak = 0
    rejections = 0
    for rec in trajectory:
        if rec.action is None:
            continue
        if rec.action.kind is ActionKind.RUN_COMMAND and not rec.observation.rejected:
            categories = match_categories(rec.observation.condensed_output, config)
            if categories & _COMPILE_CATEGORIES:
                streak += 1
                if streak >= COMPILE_FIX_THRESHOLD:
                    signatures.add(COMPILE_FIX_LOOP)
            else:
                streak = 0
        elif rec.action.kind is ActionKind.SUBMIT_RESULT:
            if rec.observation.condensed_output.startswith(SUBMISSION_REJECTED_PREFIX):
                rejections += 1
    if rejections >= VALIDATION_THRASH_THRESHOLD:
        signatures.add(VALIDATION_THRASH)
    return signatures


# ---------------------------------------------------------------------------
# Run-record aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """One task execution row; ``verified`` is None when no manual/check
    verdict exists for this run."""

    agent: str
    model: str
    task: str
    repetition: int
    self_validated: bool
    verified: bool | None
    cycles: int
    cost: float
    duration: float
    retries: int = 0

    def __post_init__(self) -> None:
        if self.verified and not self.self_validated:
            raise StatError(
                f"run {self.agent}/{self.model}/{self.task}/r{self.repetition}: "
                "verified implies self_validated"
            )


def check_record_set(records: Sequence[RunRecord]) -> None:
    seen = set()
    for rec in records:
        key = (rec.agent, rec.model, rec.task, rec.repetition)
        if key in seen:
            raise StatError(f"duplicate run record: {key}")
        seen.add(key)


@dataclass(frozen=True)
class GroupStats:
    agent: str
    model: str
    tasks: int
    repetitions: int
    self_validated_mean: float
    self_validated_sd: float
    self_validated_wilson: tuple[float, float]
    verified_k: int
    verified_n: int
    verified_rate: float | None
    verified_wilson: tuple[float, float] | None
    binomial_p_vs_chance: float | None
    mean_cost: float
    sd_cost: float
    mean_cycles: float
    sd_cycles: float
    mean_duration: float
    sd_duration: float


@dataclass(frozen=True)
class McNemarCell:
    model: str
    b: int  # reference succeeded, other failed
    c: int  # other succeeded, reference failed
    p_value: float | None
    p_adjusted: float | None = None


@dataclass(frozen=True)
class PairwiseComparison:
    reference: str
    other: str
    table: ContingencyTable2x2 | None
    fisher_p: float | None
    fisher_p_adjusted: float | None
    cohens_h: float | None
    odds_ratio: OddsRatioResult | None
    cmh: CmhResult | None
    mcnemar: tuple[McNemarCell, ...] = ()


@dataclass(frozen=True)
class Multipliers:
    agent: str
    cycles: float | None
    cost: float | None
    duration: float | None
    retries: float | None
    note: str = ""


@dataclass(frozen=True)
class StatReport:
    reference: str
    groups: tuple[GroupStats, ...]
    comparisons: tuple[PairwiseComparison, ...]
    multipliers: tuple[Multipliers, ...]
    judge_accepted: int
    judge_verified_known: int
    judge_false_positives: int
    judge_fp_rate: float | None

    def to_dict(self) -> dict[str, Any]:
        def _ci(pair):
            return list(pair) if pair is not None else None

        return {
            "reference": self.reference,
            "groups": [
                {
                    **{
                        k: getattr(g, k)
                        for k in (
                            "agent",
                            "model",
                            "tasks",
                            "repetitions",
                            "self_validated_mean",
                            "self_validated_sd",
                            "verified_k",
                            "verified_n",
                            "verified_rate",
                            "binomial_p_vs_chance",
                            "mean_cost",
                            "sd_cost",
                            "mean_cycles",
                            "sd_cycles",
                            "mean_duration",
                            "sd_duration",
                        )
                    },
                    "self_validated_wilson": _ci(g.self_validated_wilson),
                    "verified_wilson": _ci(g.verified_wilson),
                }
                for g in self.groups
            ],
            "comparisons": [
                {
                    "reference": c.reference,
                    "other": c.other,
                    "table": (
                        [c.table.a, c.table.b, c.table.c, c.table.d] if c.table else None
                    ),
                    "fisher_p": c.fisher_p,
                    "fisher_p_adjusted": c.fisher_p_adjusted,
                    "cohens_h": c.cohens_h,
                    "odds_ratio": (
                        {
                            "or": c.odds_ratio.odds_ratio,
                            "low": c.odds_ratio.low,
                            "high": c.odds_ratio.high,
                            "corrected": c.odds_ratio.corrected,
                        }
                        if c.odds_ratio
                        else None
                    ),
                    "cmh": (
                        {
                            "chi_square": c.cmh.chi_square,
                            "p_value": c.cmh.p_value,
                            "common_odds_ratio": c.cmh.common_odds_ratio,
                            "excluded_strata": c.cmh.excluded_strata,
                        }
                        if c.cmh
                        else None
                    ),
                    "mcnemar": [
                        {
                            "model": m.model,
                            "b": m.b,
                            "c": m.c,
                            "p_value": m.p_value,
                            "p_adjusted": m.p_adjusted,
                        }
                        for m in c.mcnemar
                    ],
                }
                for c in self.comparisons
            ],
            "multipliers": [vars(m) for m in self.multipliers],
            "judge": {
                "accepted": self.judge_accepted,
                "verified_known": self.judge_verified_known,
                "false_positives": self.judge_false_positives,
                "fp_rate": self.judge_fp_rate,
            },
        }

    def render_table(self) -> str:
        """Agent x model grid of self-validated and verified rates."""
        models = sorted({g.model for g in self.groups})
        agents = sorted({g.agent for g in self.groups})
        by_key = {(g.agent, g.model): g for g in self.groups}
        width = 24
        header = "agent".ljust(16) + "".join(m.ljust(width) for m in models)
        lines = [header, "-" * len(header)]
        for agent in agents:
            cells = []
            for model in models:
                g = by_key.get((agent, model))
                if g is None:
                    cells.append("-".ljust(width))
                    continue
                self_part = f"{100 * g.self_validated_mean:3.0f}+-{100 * g.self_validated_sd:.0f}%"
                ver_part = (
                    f"{100 * g.verified_rate:3.0f}%" if g.verified_rate is not None else "  ?"
                )
                cells.append(f"{self_part} / {ver_part}".ljust(width))
            lines.append(agent.ljust(16) + "".join(cells))
        lines.append("(cells: self-validated mean+-sd over repetitions / verified)")
        return "\n".join(lines)


def _mean_sd(values: list[float]) -> tuple[float, float]:
    if not values:
        return (math.nan, math.nan)
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return (mean, sd)


def _group_stats(agent: str, model: str, rows: list[RunRecord]) -> GroupStats:
    reps = sorted({r.repetition for r in rows})
    per_rep_rates = []
    for rep in reps:
        rep_rows = [r for r in rows if r.repetition == rep]
        per_rep_rates.append(sum(r.self_validated for r in rep_rows) / len(rep_rows))
    sv_mean, sv_sd = _mean_sd(per_rep_rates)
    sv_k = sum(r.self_validated for r in rows)

    verified_rows = [r for r in rows if r.verified is not None]
    verified_k = sum(bool(r.verified) for r in verified_rows)
    verified_n = len(verified_rows)

    return GroupStats(
        agent=agent,
        model=model,
        tasks=len({r.task for r in rows}),
        repetitions=len(reps),
        self_validated_mean=sv_mean,
        self_validated_sd=sv_sd,
        self_validated_wilson=wilson_interval(sv_k, len(rows)),
        verified_k=verified_k,
        verified_n=verified_n,
        verified_rate=verified_k / verified_n if verified_n else None,
        verified_wilson=wilson_interval(verified_k, verified_n) if verified_n else None,
        binomial_p_vs_chance=(
            binomial_vs_half(verified_k, verified_n) if verified_n else None
        ),
        **dict(
            zip(
                ("mean_cost", "sd_cost"),
                _mean_sd([float(r.cost) for r in rows]),
            )
        ),
        **dict(zip(("mean_cycles", "sd_cycles"), _mean_sd([float(r.cycles) for r in rows]))),
        **dict(
            zip(("mean_duration", "sd_duration"), _mean_sd([r.duration for r in rows]))
        ),
    )


def _verified_counts(rows: list[RunRecord]) -> tuple[int, int]:
    known = [r for r in rows if r.verified is not None]
    return sum(bool(r.verified) for r in known), len(known)


def _multipliers(agent: str, rows: list[RunRecord]) -> Multipliers:
    succeeded = [r for r in rows if r.self_validated]
    failed = [r for r in rows if not r.self_validated]
    notes = []

    def ratio(metric) -> float | None:
        if not succeeded or not failed:
            notes.append("one outcome class empty")
            return None
        num = statistics.fmean(metric(r) for r in failed)
        den = statistics.fmean(metric(r) for r in succeeded)
        if den == 0:
            notes.append("zero success mean")
            return None
        return num / den

    return Multipliers(
        agent=agent,
        cycles=ratio(lambda r: float(r.cycles)),
        cost=ratio(lambda r: float(r.cost)),
        duration=ratio(lambda r: r.duration),
        retries=ratio(lambda r: float(r.retries)),
        note="; ".join(sorted(set(notes))),
    )


def aggregate(records: Sequence[RunRecord], reference: str | None = None) -> StatReport:
    """Build the full statistical report over a run-record set.

    ``reference`` names the agent the pairwise tests favor; defaults to the
    agent with the highest pooled verified (then self-validated) rate.
    """
    if not records:
        raise StatError("aggregate needs a non-empty record set")
    check_record_set(records)

    by_group: dict[tuple[str, str], list[RunRecord]] = defaultdict(list)
    by_agent: dict[str, list[RunRecord]] = defaultdict(list)
    for rec in records:
        by_group[(rec.agent, rec.model)].append(rec)
        by_agent[rec.agent].append(rec)

    groups = tuple(
        _group_stats(agent, model, rows)
        for (agent, model), rows in sorted(by_group.items())
    )

    if reference is None:
        def _score(agent: str):
            k, n = _verified_counts(by_agent[agent])
            rate = k / n if n else -1.0
            sv = sum(r.self_validated for r in by_agent[agent]) / len(by_agent[agent])
            return (rate, sv, agent)

        reference = max(sorted(by_agent), key=_score)
    elif reference not in by_agent:
        raise StatError(f"reference agent {reference!r} has no records")

    comparisons = _comparisons(by_agent, reference)
    multipliers = tuple(_multipliers(agent, rows) for agent, rows in sorted(by_agent.items()))

    accepted_rows = [r for r in records if r.self_validated]
    accepted_known = [r for r in accepted_rows if r.verified is not None]
    false_pos = sum(1 for r in accepted_known if not r.verified)
    return StatReport(
        reference=reference,
        groups=groups,
        comparisons=comparisons,
        multipliers=multipliers,
        judge_accepted=len(accepted_rows),
        judge_verified_known=len(accepted_known),
        judge_false_positives=false_pos,
        judge_fp_rate=false_pos / len(accepted_known) if accepted_known else None,
    )


def _comparisons(
    by_agent: dict[str, list[RunRecord]], reference: str
) -> tuple[PairwiseComparison, ...]:
    ref_rows = by_agent[reference]
    others = [a for a in sorted(by_agent) if a != reference]
    if not others:
        return ()

    fisher_ps: list[float | None] = []
    partials: list[dict[str, Any]] = []
    mcnemar_flat: list[tuple[int, int, float]] = []  # (comparison idx, cell idx, p)

    for other in others:
        other_rows = by_agent[other]
        ref_k, ref_n = _verified_counts(ref_rows)
        oth_k, oth_n = _verified_counts(other_rows)
        table = None
        fisher_p = None
        h = None
        orr = None
        cmh = None
        if ref_n and oth_n:
            table = ContingencyTable2x2(ref_k, ref_n - ref_k, oth_k, oth_n - oth_k)
            try:
                fisher_p = fisher_one_sided(table)
            except StatError:
                fisher_p = None
            h = cohens_h(ref_k / ref_n, oth_k / oth_n)
            orr = odds_ratio_ci(table)
            strata = []
            for model in sorted({r.model for r in ref_rows} & {r.model for r in other_rows}):
                rk, rn = _verified_counts([r for r in ref_rows if r.model == model])
                ok_, on_ = _verified_counts([r for r in other_rows if r.model == model])
                if rn and on_:
                    strata.append(ContingencyTable2x2(rk, rn - rk, ok_, on_ - ok_))
            if len(strata) >= 2:
                try:
                    cmh = cmh_test(strata)
                except StatError:
                    cmh = None
        fisher_ps.append(fisher_p)

        cells = []
        for model in sorted({r.model for r in ref_rows} & {r.model for r in other_rows}):
            ref_by_key = {
                (r.task, r.repetition): r.self_validated
                for r in ref_rows
                if r.model == model
            }
            b = c = 0
            for r in other_rows:
                if r.model != model:
                    continue
                key = (r.task, r.repetition)
                if key not in ref_by_key:
                    continue
                ref_win = ref_by_key[key]
                if ref_win and not r.self_validated:
                    b += 1
                elif r.self_validated and not ref_win:
                    c += 1
            p = None
            if b + c > 0:
                p = mcnemar_one_sided(b, c)
                mcnemar_flat.append((len(partials), len(cells), p))
            cells.append(McNemarCell(model=model, b=b, c=c, p_value=p))
        partials.append(
            {
                "other": other,
                "table": table,
                "fisher_p": fisher_p,
                "h": h,
                "or": orr,
                "cmh": cmh,
                "cells": cells,
            }
        )

    real_fisher = [p for p in fisher_ps if p is not None]
    adjusted_iter = iter(holm_bonferroni(real_fisher)) if real_fisher else iter(())
    fisher_adj = [next(adjusted_iter) if p is not None else None for p in fisher_ps]

    if mcnemar_flat:
        adj = holm_bonferroni([p for _, _, p in mcnemar_flat])
        for (comp_idx, cell_idx, _), p_adj in zip(mcnemar_flat, adj):
            old = partials[comp_idx]["cells"][cell_idx]
            partials[comp_idx]["cells"][cell_idx] = McNemarCell(
                model=old.model, b=old.b, c=old.c, p_value=old.p_value, p_adjusted=p_adj
            )

    return tuple(
        PairwiseComparison(
            reference=reference,
            other=part["other"],
            table=part["table"],
            fisher_p=part["fisher_p"],
            fisher_p_adjusted=adj,
            cohens_h=part["h"],
            odds_ratio=part["or"],
            cmh=part["cmh"],
            mcnemar=tuple(part["cells"]),
        )
        for part, adj in zip(partials, fisher_adj)
    )
