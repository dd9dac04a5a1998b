import json
from unittest.mock import Mock

import pytest

from gazeqa.backends import MockJudge, first_position_judge, longer_answer_judge, tie_always_judge
from gazeqa.errors import BackendError, EmptyInputError, ParameterError, VerdictParseError
from gazeqa.evaluation import (
    FORMAT_REMINDER,
    MODES,
    AggregateResult,
    EvalItem,
    PairwiseResult,
    aggregate,
    ask,
    build_prompt,
    dual_order_score,
    eval_items,
    parse_verdict,
    run_benchmark,
    system_prompt,
)


DATASET = [
    {"key": f"item{i:02d}", "question": f"what is object {i}?", "fact": f"object {i} is a cup",
     "gt_answer": f"a cup number {i}"}
    for i in range(50)
]
RESPONSES_A = {row["key"]: "a cup" + " really" * (i % 7) for i, row in enumerate(DATASET)}
RESPONSES_B = {row["key"]: "it is a cup" + " indeed" * (i % 5) for i, row in enumerate(DATASET)}


def item(a="short", b="a longer one"):
    return EvalItem(key="k", question="q?", fact="f", gt_answer="g", response_a=a, response_b=b)


class TestPrompts:
    @pytest.mark.parametrize("mode", MODES)
    def test_every_mode_has_a_system_prompt(self, mode):
        assert "respond with -1" in system_prompt(mode).lower()

    def test_unknown_mode_raises(self):
        with pytest.raises(ParameterError):
            system_prompt("style")

    def test_forward_order_lists_a_first(self):
        request = build_prompt(item(), "forward", "overall")

        assert (request.first, request.second) == ("short", "a longer one")
        assert request.user.endswith("Answer 1: short\nAnswer 2: a longer one")

    def test_reversed_order_lists_b_first(self):
        request = build_prompt(item(), "reversed", "helpful")

        assert (request.first, request.second) == ("a longer one", "short")

    def test_request_bytes_are_stable(self):
        assert build_prompt(item(), "forward", "overall").to_bytes() == build_prompt(item(), "forward", "overall").to_bytes()

    def test_empty_response_is_rejected(self):
        with pytest.raises(ParameterError):
            item(a="")


class TestParseVerdict:
    @pytest.mark.parametrize("text,expected", [("-1", -1), (" 0\n", 0), ("1", 1)])
    def test_accepts_the_three_verdicts(self, text, expected):
        assert parse_verdict(text) == expected

    @pytest.mark.parametrize("text", ["2", "Answer 1", "", "-1."])
    def test_rejects_anything_else(self, text):
        with pytest.raises(VerdictParseError):
            parse_verdict(text)


class TestAsk:
    def test_reasks_with_a_format_reminder(self):
        judge = Mock(side_effect=["I think answer 2", "1"])

        assert ask(judge, build_prompt(item(), "forward", "overall"), retries=2) == 1
        assert judge.call_args_list[1].args[0].user.endswith(FORMAT_REMINDER)

    def test_gives_up_after_retries(self):
        judge = Mock(return_value="unsure")

        with pytest.raises(VerdictParseError):
            ask(judge, build_prompt(item(), "forward", "overall"), retries=2)

        assert judge.call_count == 3

    def test_reminder_is_appended_once_however_many_retries(self):
        judge = Mock(side_effect=["maybe", "still unsure", "no idea", "0"])

        assert ask(judge, build_prompt(item(), "forward", "overall"), retries=3) == 0
        for call in judge.call_args_list[1:]:
            assert call.args[0].user.count(FORMAT_REMINDER) == 1

    def test_transient_backend_error_is_retried(self):
        judge = Mock(side_effect=[BackendError("503 from judge"), "-1"])

        assert ask(judge, build_prompt(item(), "forward", "overall"), base_delay=0) == -1
        assert judge.call_count == 2

    def test_persistent_backend_error_propagates(self):
        judge = Mock(side_effect=BackendError("judge down"))

        with pytest.raises(BackendError):
            ask(judge, build_prompt(item(), "forward", "overall"), backend_retries=1, base_delay=0)

        assert judge.call_count == 2


class TestDualOrderScore:
    def test_position_biased_judge_scores_zero(self):
        assert dual_order_score(item(), first_position_judge, "overall").score == 0.0

    def test_consistent_judge_gives_full_score(self):
        result = dual_order_score(item(), longer_answer_judge, "overall")

        assert (result.verdict_forward, result.verdict_reversed) == (1, -1)
        assert result.score == 1.0

    def test_swapping_candidates_negates_the_score(self):
        forward = dual_order_score(item("short", "a longer one"), longer_answer_judge, "grounding")
        swapped = dual_order_score(item("a longer one", "short"), longer_answer_judge, "grounding")

        assert swapped.score == -forward.score


class TestAggregate:
    def test_counts_by_sign_of_the_score(self):
        results = [
            PairwiseResult("a", "overall", -1, 1),
            PairwiseResult("b", "overall", -1, 0),
            PairwiseResult("c", "overall", -1, -1),
            PairwiseResult("d", "overall", 1, -1),
        ]

        agg = aggregate(results, rewards_a=[1.0, 3.0], rewards_b=[2.0, 2.0])

        assert (agg.wins_a, agg.ties, agg.wins_b) == (2, 1, 1)
        assert agg.win_rate_a == 0.5
        assert (agg.mean_reward_a, agg.mean_reward_b) == (2.0, 2.0)

    def test_raises_for_empty_results(self):
        with pytest.raises(EmptyInputError):
            aggregate([])

    def test_to_json_includes_total_and_rates(self):
        assert AggregateResult(1, 2, 1).to_json()["total"] == 4


class TestEvalItems:
    def test_skips_items_without_both_responses(self):
        items, skipped = eval_items(DATASET[:3], RESPONSES_A, {"item01": "x"})

        assert [i.key for i in items] == ["item01"]
        assert skipped == [
            {"key": "item00", "reason": "missing response b"},
            {"key": "item02", "reason": "missing response b"},
        ]


class TestRunBenchmark:
    def test_first_position_judge_scores_every_item_zero(self):
        report = run_benchmark(DATASET, RESPONSES_A, RESPONSES_B, first_position_judge)

        assert all(row["score"] == 0 for row in report.audit)
        assert len(report.audit) == 50 * len(MODES)
        for mode in MODES:
            assert report.aggregates[mode].ties == 50

    def test_swapping_models_negates_every_score(self):
        forward = run_benchmark(DATASET, RESPONSES_A, RESPONSES_B, longer_answer_judge)
        swapped = run_benchmark(DATASET, RESPONSES_B, RESPONSES_A, longer_answer_judge)

        assert [r["score"] for r in swapped.audit] == [-r["score"] for r in forward.audit]
        for mode in MODES:
            assert forward.aggregates[mode].wins_a == swapped.aggregates[mode].wins_b

    @pytest.mark.parametrize("judge", [first_position_judge, longer_answer_judge, tie_always_judge])
    def test_self_comparison_is_all_ties(self, judge):
        report = run_benchmark(DATASET, RESPONSES_A, RESPONSES_A, judge)

        for mode in MODES:
            assert report.aggregates[mode].ties == 50
            assert report.aggregates[mode].wins_a == report.aggregates[mode].wins_b == 0

    def test_aggregates_match_a_recount_of_the_audit_log(self):
        report = run_benchmark(DATASET, RESPONSES_A, RESPONSES_B, longer_answer_judge, modes=["overall"])

        scores = [row["score"] for row in report.audit]
        agg = report.aggregates["overall"]
        assert agg.wins_a == sum(1 for s in scores if s < 0)
        assert agg.wins_b == sum(1 for s in scores if s > 0)
        assert agg.ties == sum(1 for s in scores if s == 0)

    def test_parallel_run_matches_sequential_run(self):
        sequential = run_benchmark(DATASET, RESPONSES_A, RESPONSES_B, longer_answer_judge)
        parallel = run_benchmark(DATASET, RESPONSES_A, RESPONSES_B, longer_answer_judge, jobs=4)

        assert sequential.dumps() == parallel.dumps()
        assert sequential.audit == parallel.audit

    def test_missing_mock_verdicts_are_counted_as_errors(self):
        verdicts = {"item00": {"forward": {"overall": 1}, "reversed": {"overall": -1}}}
        report = run_benchmark(DATASET[:2], RESPONSES_A, RESPONSES_B, MockJudge(verdicts), modes=["overall"])

        assert report.errors == {"overall": 1}
        assert report.aggregates["overall"].wins_b == 1
        assert "error" in report.audit[1]

    def test_backend_failure_on_one_item_is_counted_and_the_rest_reported(self):
        def judge(request):
            if request.key == "item01":
                raise BackendError("judge down", request.key)
            return "1"

        report = run_benchmark(DATASET[:3], RESPONSES_A, RESPONSES_B, judge, modes=["overall"], base_delay=0)

        assert report.errors == {"overall": 1}
        assert report.aggregates["overall"].total == 2
        assert [row["key"] for row in report.audit if "error" in row] == ["item01"]

    def test_transient_backend_error_does_not_lose_the_item(self):
        judge = Mock(side_effect=[BackendError("reset"), "0", "0"])
        report = run_benchmark(DATASET[:1], RESPONSES_A, RESPONSES_B, judge, modes=["overall"], base_delay=0)

        assert report.errors == {"overall": 0}
        assert report.aggregates["overall"].ties == 1

    def test_reward_means_only_cover_items_the_judge_evaluated(self):
        judge = lambda request: "unsure" if request.key == "item00" else "0"
        scorer = lambda question, answer: 1000.0 if question == "what is object 0?" else 2.0
        report = run_benchmark(DATASET[:3], RESPONSES_A, RESPONSES_B, judge, modes=["overall"], scorer=scorer)

        assert report.errors == {"overall": 1}
        assert report.aggregates["overall"].mean_reward_a == 2.0
        assert report.aggregates["overall"].mean_reward_b == 2.0

    def test_rewards_are_reported_when_a_scorer_is_given(self):
        report = run_benchmark(
            DATASET[:2], RESPONSES_A, RESPONSES_B, tie_always_judge, modes=["overall"],
            scorer=lambda q, a: float(len(a.split())),
        )

        assert report.aggregates["overall"].mean_reward_a == 2.5
        assert report.aggregates["overall"].mean_reward_b == 4.5

    def test_report_dumps_sorted_json(self):
        report = run_benchmark(DATASET[:1], RESPONSES_A, RESPONSES_B, tie_always_judge)

        data = json.loads(report.dumps())
        assert list(data) == ["aggregates", "config", "errors", "skipped"]
        assert data["aggregates"]["overall"]["ties"] == 1
