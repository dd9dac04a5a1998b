"""
Dual-order pairwise judging.

Each item is judged twice, once with A listed first and once with B listed
first. Verdicts are ``-1`` (first listed better), ``0`` (tie) or ``1``
(second listed better); the reversed verdict is negated to bring it back to
the A/B frame and the two are averaged, so a judge that only looks at
position always ends up at 0.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

from gazeqa.backends import DEFAULT_BASE_DELAY, with_retries
from gazeqa.errors import BackendError, CannedLookupError, EmptyInputError, ParameterError, VerdictParseError


logger = logging.getLogger(__name__)

ORDERS = ("forward", "reversed")
MODES = ("overall", "helpful", "grounding")
VERDICTS = {"-1": -1, "0": 0, "1": 1}
DEFAULT_RETRIES = 2
DEFAULT_BACKEND_RETRIES = 3
FORMAT_REMINDER = "Respond with exactly one of -1, 0 or 1 and nothing else."

Judge = Callable[["JudgeRequest"], str]
Scorer = Callable[[str, str], float]


@dataclass(frozen=True)
class EvalItem:
    key: str
    question: str
    fact: str
    gt_answer: str
    response_a: str
    response_b: str

    def __post_init__(self):
        for name in ("key", "question", "fact", "gt_answer", "response_a", "response_b"):
            if not getattr(self, name):
                raise ParameterError(f"evaluation item {self.key!r} has an empty {name}")


@dataclass(frozen=True)
class JudgeRequest:
    key: str
    order: str
    mode: str
    system: str
    user: str
    first: str
    second: str

    def with_reminder(self) -> "JudgeRequest":
        return JudgeRequest(**{**asdict(self), "user": f"{self.user}\n\n{FORMAT_REMINDER}"})

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class PairwiseResult:
    key: str
    mode: str
    verdict_forward: int
    verdict_reversed: int

    @property
    def score(self) -> float:
        return (self.verdict_forward - self.verdict_reversed) / 2

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "mode": self.mode,
            "verdict_forward": self.verdict_forward,
            "verdict_reversed": self.verdict_reversed,
            "score": self.score,
        }


@dataclass(frozen=True)
class AggregateResult:
    wins_a: int
    ties: int
    wins_b: int
    mean_reward_a: float | None = None
    mean_reward_b: float | None = None

    @property
    def total(self) -> int:
        return self.wins_a + self.ties + self.wins_b

    @property
    def win_rate_a(self) -> float:
        return self.wins_a / self.total

    @property
    def win_rate_b(self) -> float:
        return self.wins_b / self.total

    def to_json(self) -> dict:
        return {
            "wins_a": self.wins_a,
            "ties": self.ties,
            "wins_b": self.wins_b,
            "total": self.total,
            "win_rate_a": self.win_rate_a,
            "win_rate_b": self.win_rate_b,
            "mean_reward_a": self.mean_reward_a,
            "mean_reward_b": self.mean_reward_b,
        }


@dataclass
class BenchmarkReport:
    aggregates: dict[str, AggregateResult]
    audit: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    errors: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "aggregates": {mode: agg.to_json() for mode, agg in self.aggregates.items()},
            "skipped": self.skipped,
            "errors": self.errors,
            "config": self.config,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def system_prompt(mode: str) -> str:
    if mode not in MODES:
        raise ParameterError(f"unknown judging mode {mode!r}, expected one of {', '.join(MODES)}")
    return resources.files("gazeqa").joinpath("data", f"judge_{mode}.txt").read_text(encoding="utf-8").strip()


def build_prompt(item: EvalItem, order: str, mode: str) -> JudgeRequest:
    if order not in ORDERS:
        raise ParameterError(f"unknown order {order!r}, expected one of {', '.join(ORDERS)}")
    first, second = (item.response_a, item.response_b) if order == "forward" else (item.response_b, item.response_a)
    user = (
        f"Question: {item.question}\n"
        f"Fact: {item.fact}\n"
        f"Ground truth answer: {item.gt_answer}\n"
        f"Answer 1: {first}\n"
        f"Answer 2: {second}"
    )
    return JudgeRequest(
        key=item.key, order=order, mode=mode, system=system_prompt(mode), user=user, first=first, second=second
    )


def parse_verdict(text: str) -> int:
    try:
        return VERDICTS[text.strip()]
    except KeyError:
        raise VerdictParseError(f"judge answered {text.strip()[:40]!r}, expected -1, 0 or 1") from None


def ask(
        judge: Judge,
        request: JudgeRequest,
        retries: int = DEFAULT_RETRIES,
        backend_retries: int = DEFAULT_BACKEND_RETRIES,
        base_delay: float = DEFAULT_BASE_DELAY,
) -> int:
    """
    Queries the judge, re-asking with a format reminder on unparseable output.
    Transport failures are retried with backoff separately from format retries.
    """
    original = request
    for attempt in range(retries + 1):
        try:
            return parse_verdict(with_retries(lambda: judge(request), backend_retries, base_delay))
        except VerdictParseError as exc:
            if attempt == retries:
                raise
            logger.info("%s (%s, %s, %s): %s; asking again", request.key, request.order, request.mode, attempt, exc)
            request = original.with_reminder()
    raise AssertionError("unreachable")


def dual_order_score(
        item: EvalItem,
        judge: Judge,
        mode: str,
        retries: int = DEFAULT_RETRIES,
        backend_retries: int = DEFAULT_BACKEND_RETRIES,
        base_delay: float = DEFAULT_BASE_DELAY,
) -> PairwiseResult:
    forward = ask(judge, build_prompt(item, "forward", mode), retries, backend_retries, base_delay)
    reverse = ask(judge, build_prompt(item, "reversed", mode), retries, backend_retries, base_delay)
    return PairwiseResult(key=item.key, mode=mode, verdict_forward=forward, verdict_reversed=reverse)


def aggregate(
        results: Sequence[PairwiseResult],
        rewards_a: Sequence[float] | None = None,
        rewards_b: Sequence[float] | None = None,
) -> AggregateResult:
    """Counts by sign of the score; half scores count for their sign."""
    if not results:
        raise EmptyInputError("cannot aggregate an empty list of results")
    wins_a = sum(1 for r in results if r.score < 0)
    wins_b = sum(1 for r in results if r.score > 0)
    mean = lambda xs: sum(xs) / len(xs) if xs else None
    return AggregateResult(
        wins_a=wins_a,
        ties=len(results) - wins_a - wins_b,
        wins_b=wins_b,
        mean_reward_a=None if rewards_a is None else mean(list(rewards_a)),
        mean_reward_b=None if rewards_b is None else mean(list(rewards_b)),
    )


def eval_items(
        dataset: Iterable[Mapping],
        responses_a: Mapping[str, str],
        responses_b: Mapping[str, str],
) -> tuple[list[EvalItem], list[dict]]:
    items, skipped = [], []
    for row in dataset:
        key = str(row["key"])
        missing = [side for side, responses in (("a", responses_a), ("b", responses_b)) if key not in responses]
        if missing:
            logger.warning("skipping %s: no response from %s", key, " and ".join(missing))
            skipped.append({"key": key, "reason": f"missing response {','.join(missing)}"})
            continue
        items.append(EvalItem(
            key=key,
            question=row["question"],
            fact=row["fact"],
            gt_answer=row["gt_answer"],
            response_a=responses_a[key],
            response_b=responses_b[key],
        ))
    return items, skipped


def run_benchmark(
        dataset: Iterable[Mapping],
        responses_a: Mapping[str, str],
        responses_b: Mapping[str, str],
        judge: Judge,
        modes: Sequence[str] = MODES,
        scorer: Scorer | None = None,
        retries: int = DEFAULT_RETRIES,
        jobs: int = 1,
        backend_retries: int = DEFAULT_BACKEND_RETRIES,
        base_delay: float = DEFAULT_BASE_DELAY,
) -> BenchmarkReport:
    """
    Per-mode aggregates plus an audit log with both raw verdicts of every
    judged item. Items the judge cannot be made to answer, or whose backend
    keeps failing after its retries, are tallied in ``errors`` and left out of
    the aggregates, reward means included.
    """
    for mode in modes:
        system_prompt(mode)
    items, skipped = eval_items(dataset, responses_a, responses_b)
    items.sort(key=lambda i: i.key)

    def judge_item(task):
        item, mode = task
        try:
            return dual_order_score(item, judge, mode, retries, backend_retries, base_delay), None
        except (VerdictParseError, CannedLookupError, BackendError) as exc:
            logger.warning("could not evaluate %s in %s mode: %s", item.key, mode, exc)
            return None, str(exc)

    tasks = [(item, mode) for mode in modes for item in items]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            outcomes = list(executor.map(judge_item, tasks))
    else:
        outcomes = [judge_item(t) for t in tasks]

    rewards_a = rewards_b = None
    if scorer is not None:
        rewards_a = {i.key: float(scorer(i.question, i.response_a)) for i in items}
        rewards_b = {i.key: float(scorer(i.question, i.response_b)) for i in items}

    aggregates, audit, errors = {}, [], {}
    for mode in modes:
        results = []
        for (item, task_mode), (result, error) in zip(tasks, outcomes):
            if task_mode != mode:
                continue
            if result is None:
                audit.append({"key": item.key, "mode": mode, "error": error})
                continue
            results.append(result)
            audit.append(result.to_json())
        errors[mode] = len(items) - len(results)
        if results:
            aggregates[mode] = aggregate(
                results,
                None if rewards_a is None else [rewards_a[r.key] for r in results],
                None if rewards_b is None else [rewards_b[r.key] for r in results],
            )
    return BenchmarkReport(aggregates=aggregates, audit=audit, skipped=skipped, errors=errors)
