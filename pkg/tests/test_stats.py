from __future__ import annotations

import math
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from golden import golden_records
from oracles import (
    binomial_tail_bruteforce,
    fisher_greater_bruteforce,
    mcnemar_bruteforce,
    wilson_bruteforce,
)
from tooldriver.errors import StatError
from tooldriver.stats import (
    COMPILE_FIX_LOOP,
    VALIDATION_THRASH,
    ContingencyTable2x2,
    RunRecord,
    aggregate,
    binomial_vs_half,
    check_record_set,
    cmh_test,
    cohens_h,
    detect_failure_signatures,
    fisher_one_sided,
    holm_bonferroni,
    mcnemar_one_sided,
    odds_ratio_ci,
    wilson_interval,
)
from tooldriver.task import Action, ActionKind, CycleRecord, Observation, Stage


class TestFisher:
    def test_known_fraction(self):
        # brute-force hypergeometric tail: 2126/184756
        assert fisher_one_sided(ContingencyTable2x2(8, 2, 2, 8)) == pytest.approx(
            2126 / 184756, abs=1e-15
        )

    def test_identical_rows_no_evidence(self):
        assert fisher_one_sided(ContingencyTable2x2(5, 5, 5, 5)) > 0.5

    def test_pooled_verified_comparison_significant(self):
        assert fisher_one_sided(ContingencyTable2x2(111, 29, 14, 126)) < 0.001

    def test_empty_margin_undefined(self):
        with pytest.raises(StatError):
            fisher_one_sided(ContingencyTable2x2(0, 0, 3, 4))

    def test_negative_count_rejected(self):
        with pytest.raises(StatError):
            ContingencyTable2x2(-1, 2, 3, 4)


class TestMcNemar:
    def test_known_fraction(self):
        assert mcnemar_one_sided(8, 2) == pytest.approx(56 / 1024, abs=1e-15)

    def test_symmetry_floor(self):
        for b in range(1, 7):
            assert mcnemar_one_sided(b, b) >= 0.5

    def test_boundary_b_zero(self):
        assert mcnemar_one_sided(0, 10) == 1.0

    def test_no_discordant_pairs_undefined(self):
        with pytest.raises(StatError):
            mcnemar_one_sided(0, 0)


class TestBinomial:
    def test_known_tail(self):
        assert binomial_vs_half(33, 35) == pytest.approx(631 / 2**35, rel=1e-12)

    def test_k_zero(self):
        assert binomial_vs_half(0, 12) == 1.0

    def test_half_even(self):
        assert binomial_vs_half(6, 12) > 0.5


class TestHolm:
    def test_hand_computed_step_down(self):
        assert holm_bonferroni([0.01, 0.04, 0.03]) == pytest.approx([0.03, 0.06, 0.06])

    def test_single_unchanged(self):
        assert holm_bonferroni([0.2]) == [0.2]

    def test_cap_at_one(self):
        assert holm_bonferroni([0.5, 0.6]) == [1.0, 1.0]

    @given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=12))
    def test_adjusted_at_least_raw_and_monotone(self, ps):
        adjusted = holm_bonferroni(ps)
        assert all(a >= p - 1e-15 for a, p in zip(adjusted, ps))
        assert all(0 <= a <= 1 for a in adjusted)
        order = sorted(range(len(ps)), key=lambda i: ps[i])
        ranked = [adjusted[i] for i in order]
        assert ranked == sorted(ranked)


class TestWilson:
    def test_lower_bound_zero_at_k0(self):
        low, high = wilson_interval(0, 10, z=1.96)
        assert low == 0.0
        assert 0 < high < 1

    def test_against_quadratic_oracle(self):
        got = wilson_interval(111, 140, z=1.96)
        want = wilson_bruteforce(111, 140, z=1.96)
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx((0.718347, 0.851725), abs=5e-4)

    def test_interior_at_k_equals_n(self):
        low, high = wilson_interval(10, 10)
        assert 0 < low < 1
        assert high < 1 or math.isclose(high, 1.0)
        assert high < 1.0000001 and high > low

    def test_n_zero_undefined(self):
        with pytest.raises(StatError):
            wilson_interval(0, 0)

    @given(st.integers(0, 40), st.integers(1, 40))
    def test_matches_quadratic_everywhere(self, k, n):
        k = min(k, n)
        assert wilson_interval(k, n) == pytest.approx(
            wilson_bruteforce(k, n, 1.959963984540054), abs=1e-10
        )


class TestCohensH:
    def test_closed_form_quarter_half(self):
        assert cohens_h(0.5, 0.25) == pytest.approx(math.pi / 6, abs=1e-12)

    def test_zero_at_equal(self):
        assert cohens_h(0.3, 0.3) == 0.0

    def test_published_large_effect(self):
        assert cohens_h(111 / 140, 14 / 140) == pytest.approx(1.55, abs=0.02)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_antisymmetry(self, p1, p2):
        assert cohens_h(p1, p2) == pytest.approx(-cohens_h(p2, p1), abs=1e-12)


class TestOddsRatio:
    def test_published_interval(self):
        result = odds_ratio_ci(ContingencyTable2x2(111, 29, 14, 126))
        assert result.odds_ratio == pytest.approx(34.5, abs=0.5)
        assert result.low == pytest.approx(17.3, abs=0.5)
        assert result.high == pytest.approx(68.5, abs=0.5)
        assert not result.corrected

    def test_unit_table(self):
        result = odds_ratio_ci(ContingencyTable2x2(1, 1, 1, 1))
        assert result.odds_ratio == 1.0
        assert result.low < 1 < result.high

    def test_zero_cell_corrected_and_flagged(self):
        result = odds_ratio_ci(ContingencyTable2x2(5, 0, 3, 4))
        assert result.corrected
        assert math.isfinite(result.odds_ratio)

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 30), st.integers(1, 30),
           st.integers(2, 5))
    def test_row_scaling_invariance(self, a, b, c, d, k):
        base = odds_ratio_ci(ContingencyTable2x2(a, b, c, d))
        scaled = odds_ratio_ci(ContingencyTable2x2(k * a, k * b, k * c, k * d))
        assert scaled.odds_ratio == pytest.approx(base.odds_ratio, rel=1e-12)


class TestCmh:
    def test_hand_evaluated_two_identical_strata(self):
        strata = [ContingencyTable2x2(2, 1, 1, 2)] * 2
        result = cmh_test(strata)
        assert result.chi_square == pytest.approx(1 / 0.9, abs=1e-12)
        assert result.common_odds_ratio == pytest.approx(4.0, abs=1e-12)

    def test_single_stratum_reduces_to_plain_or(self):
        table = ContingencyTable2x2(19, 16, 3, 32)
        result = cmh_test([table])
        plain = (table.a * table.d) / (table.b * table.c)
        assert result.common_odds_ratio == pytest.approx(plain, rel=1e-12)

    def test_duplicated_stratum_scales_chi_square(self):
        one = cmh_test([ContingencyTable2x2(8, 2, 3, 7)])
        three = cmh_test([ContingencyTable2x2(8, 2, 3, 7)] * 3)
        assert three.chi_square == pytest.approx(3 * one.chi_square, rel=1e-12)

    def test_published_reconstruction_vs_rag(self):
        analysis = [19, 26, 33, 33]
        rag = [3, 2, 1, 8]
        strata = [
            ContingencyTable2x2(a, 35 - a, c, 35 - c) for a, c in zip(analysis, rag)
        ]
        result = cmh_test(strata)
        assert result.chi_square == pytest.approx(139.8, rel=0.02)
        assert result.common_odds_ratio == pytest.approx(41.4, rel=0.05)
        assert result.p_value < 1e-10

    def test_degenerate_stratum_excluded_and_flagged(self):
        strata = [ContingencyTable2x2(2, 1, 1, 2), ContingencyTable2x2(0, 0, 1, 1)]
        result = cmh_test(strata)
        assert result.excluded_strata == 1

    def test_all_degenerate_undefined(self):
        with pytest.raises(StatError):
            cmh_test([ContingencyTable2x2(0, 0, 1, 1)])


def test_chi2_tail_precision_against_mpmath():
    # independent high-precision reference: regularized upper incomplete gamma
    mpmath = pytest.importorskip("mpmath")
    from tooldriver.stats import chi2_sf1

    mpmath.mp.dps = 40
    for x in [0.0, 0.5, 1.111, 3.84, 15.4, 43.3, 60.0, 139.8, 200.0]:
        want = float(mpmath.gammainc(mpmath.mpf("0.5"), mpmath.mpf(x) / 2, mpmath.inf,
                                     regularized=True))
        got = chi2_sf1(x)
        if want > 0:
            assert abs(got - want) / want < 1e-10
        else:
            assert got == 0.0


# -- brute-force equivalence (small sample of the acceptance property) -------


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))
def test_fisher_matches_enumeration(a, b, c, d):
    n = a + b + c + d
    if n == 0 or n > 12:
        return
    col1 = a + c
    if a + b == 0 or c + d == 0 or col1 == 0 or col1 == n:
        return
    assert fisher_one_sided(ContingencyTable2x2(a, b, c, d)) == pytest.approx(
        fisher_greater_bruteforce(a, b, c, d), abs=1e-12
    )


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 12), st.integers(0, 12))
def test_mcnemar_matches_enumeration(b, c):
    if b + c == 0 or b + c > 12:
        return
    assert mcnemar_one_sided(b, c) == pytest.approx(mcnemar_bruteforce(b, c), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 12), st.integers(1, 12))
def test_binomial_matches_enumeration(k, n):
    k = min(k, n)
    assert binomial_vs_half(k, n) == pytest.approx(binomial_tail_bruteforce(k, n), abs=1e-12)


# -- failure signatures -------------------------------------------------------


def _cmd_record(index: int, output: str, exit_code: int = 1) -> CycleRecord:
    return CycleRecord(
        index=index,
        stage=Stage.TOOL_SETUP,
        reasoning="",
        action=Action(kind=ActionKind.RUN_COMMAND, command="make"),
        observation=Observation(condensed_output=output, exit_code=exit_code),
        tokens_in=0,
        tokens_out=0,
        cost_delta=Decimal("0"),
        timestamp="",
        attempt=1,
    )


def _submit_record(index: int, rejected: bool) -> CycleRecord:
    text = (
        "submission rejected: evidence checks failed"
        if rejected
        else "submission accepted: fine"
    )
    return CycleRecord(
        index=index,
        stage=Stage.ANALYSIS_RUN,
        reasoning="",
        action=Action(kind=ActionKind.SUBMIT_RESULT),
        observation=Observation(condensed_output=text),
        tokens_in=0,
        tokens_out=0,
        cost_delta=Decimal("0"),
        timestamp="",
        attempt=1,
    )


COMPILE_ERR = "main.c:3:1: error: unknown type name 'foo'"
OK_OUT = "all good"


class TestFailureSignatures:
    def test_three_consecutive_compile_errors_trigger(self):
        records = [_cmd_record(i, COMPILE_ERR) for i in range(1, 4)]
        assert detect_failure_signatures(records) == {COMPILE_FIX_LOOP}

    def test_two_do_not_trigger(self):
        records = [_cmd_record(i, COMPILE_ERR) for i in range(1, 3)]
        assert detect_failure_signatures(records) == set()

    def test_intervening_success_resets(self):
        records = [
            _cmd_record(1, COMPILE_ERR),
            _cmd_record(2, COMPILE_ERR),
            _cmd_record(3, OK_OUT, exit_code=0),
            _cmd_record(4, COMPILE_ERR),
            _cmd_record(5, COMPILE_ERR),
        ]
        assert detect_failure_signatures(records) == set()

    def test_linker_errors_count_as_compile(self):
        records = [_cmd_record(i, "undefined reference to `foo'") for i in range(1, 4)]
        assert COMPILE_FIX_LOOP in detect_failure_signatures(records)

    def test_five_rejections_trigger_thrash(self):
        records = [_submit_record(i, rejected=True) for i in range(1, 6)]
        assert detect_failure_signatures(records) == {VALIDATION_THRASH}

    def test_four_rejections_do_not(self):
        records = [_submit_record(i, rejected=True) for i in range(1, 5)]
        assert detect_failure_signatures(records) == set()

    def test_clean_trajectory_empty(self):
        records = [_cmd_record(i, OK_OUT, exit_code=0) for i in range(1, 10)]
        assert detect_failure_signatures(records) == set()

    def test_purity(self):
        records = [_cmd_record(i, COMPILE_ERR) for i in range(1, 4)]
        assert detect_failure_signatures(records) == detect_failure_signatures(records)


# -- aggregation --------------------------------------------------------------


class TestAggregate:
    def test_constructed_cost_multiplier(self):
        rows = []
        for i in range(10):
            ok = i < 5
            rows.append(
                RunRecord(
                    agent="a",
                    model="m",
                    task=f"t{i}",
                    repetition=1,
                    self_validated=ok,
                    verified=ok,
                    cycles=10 if ok else 20,
                    cost=1.0 if ok else 2.0,
                    duration=100.0 if ok else 200.0,
                )
            )
        report = aggregate(rows, reference="a")
        mult = report.multipliers[0]
        assert mult.cost == pytest.approx(2.0)
        assert mult.cycles == pytest.approx(2.0)

    def test_verified_rate_94_percent(self):
        rows = [
            RunRecord(
                agent="analysis",
                model="gemini-3-flash",
                task=f"t{i}",
                repetition=1,
                self_validated=True,
                verified=i < 33,
                cycles=10,
                cost=0.5,
                duration=60.0,
            )
            for i in range(35)
        ]
        report = aggregate(rows)
        group = report.groups[0]
        assert group.verified_rate == pytest.approx(33 / 35)
        assert round(100 * group.verified_rate) == 94

    def test_judge_false_positive_rate(self):
        rows = []
        for i in range(140):
            accepted = i < 131
            rows.append(
                RunRecord(
                    agent="analysis",
                    model="m",
                    task=f"t{i}",
                    repetition=1,
                    self_validated=accepted,
                    verified=(i < 111) if accepted else False,
                    cycles=1,
                    cost=0.1,
                    duration=1.0,
                )
            )
        report = aggregate(rows)
        assert report.judge_accepted == 131
        assert report.judge_false_positives == 20
        assert report.judge_fp_rate == pytest.approx(20 / 131)
        assert abs(report.judge_fp_rate - 0.153) < 0.001

    def test_duplicate_rows_rejected(self):
        row = RunRecord("a", "m", "t", 1, True, True, 1, 0.1, 1.0)
        with pytest.raises(StatError):
            check_record_set([row, row])

    def test_verified_implies_self_validated(self):
        with pytest.raises(StatError):
            RunRecord("a", "m", "t", 1, False, True, 1, 0.1, 1.0)

    def test_empty_set_rejected(self):
        with pytest.raises(StatError):
            aggregate([])

    def test_golden_reference_autoselected(self):
        report = aggregate(golden_records())
        assert report.reference == "analysis"
        assert len(report.comparisons) == 3

    def test_golden_comparisons_match_published_rag_numbers(self):
        report = aggregate(golden_records(), reference="analysis")
        rag = next(c for c in report.comparisons if c.other == "rag")
        assert rag.cohens_h == pytest.approx(1.55, abs=0.02)
        assert rag.odds_ratio.odds_ratio == pytest.approx(34.5, abs=0.5)
        assert rag.odds_ratio.low == pytest.approx(17.3, abs=0.5)
        assert rag.odds_ratio.high == pytest.approx(68.5, abs=0.5)
        assert rag.cmh.chi_square == pytest.approx(139.8, rel=0.02)
        assert rag.cmh.common_odds_ratio == pytest.approx(41.4, rel=0.05)
        assert rag.fisher_p_adjusted < 0.001

    def test_mcnemar_pairs_counted_per_model(self):
        rows = []
        for task in range(6):
            rows.append(RunRecord("ref", "m", f"t{task}", 1, task < 5, None, 1, 0.1, 1.0))
            rows.append(RunRecord("other", "m", f"t{task}", 1, task < 2, None, 1, 0.1, 1.0))
        report = aggregate(rows, reference="ref")
        cell = report.comparisons[0].mcnemar[0]
        assert (cell.b, cell.c) == (3, 0)
        assert cell.p_value == pytest.approx(mcnemar_one_sided(3, 0))

    def test_render_table_mentions_rates(self):
        text = aggregate(golden_records(), reference="analysis").render_table()
        assert "analysis" in text and "gpt-5-nano" in text
        assert "94%" in text  # verified deepseek/gemini cell
