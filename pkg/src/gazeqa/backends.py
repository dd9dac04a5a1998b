"""
Pluggable text backends: generators for QA annotation, pairwise judges and
answer-quality scorers.

Every backend is a plain callable:

    generator(request: GenerationRequest) -> str
    judge(request) -> str                  # raw judge text, parsed by gazeqa.evaluation
    scorer(question: str, answer: str) -> float

The HTTP variants speak a minimal JSON contract, ``{system, messages}`` in and
``{text}`` out (``{question, answer}`` in and ``{score}`` out for scorers).
Nothing here opens a connection unless an HTTP backend is constructed with a
URL.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TypeVar

import requests

from gazeqa.errors import BackendError, CannedLookupError, ParameterError


logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60
DEFAULT_RETRIES = 3
DEFAULT_BASE_DELAY = 1.0
RETRIABLE_STATUS = {429, 500, 502, 503, 504}
RULE_JUDGES = ("first-position", "longer-answer", "tie-always")

T = TypeVar("T")


@dataclass(frozen=True)
class GenerationRequest:
    key: str
    system: str
    messages: tuple[dict, ...] = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {"system": self.system, "messages": list(self.messages)}


def with_retries(
        call: Callable[[], T],
        retries: int = DEFAULT_RETRIES,
        base_delay: float = DEFAULT_BASE_DELAY,
        sleep: Callable[[float], Any] = time.sleep,
) -> T:
    """Runs ``call``, retrying ``BackendError`` with exponential backoff."""
    for attempt in range(retries + 1):
        try:
            return call()
        except BackendError as exc:
            if attempt == retries:
                raise
            delay = base_delay * 2 ** attempt
            logger.warning("%s; retrying in %.1fs (%d/%d)", exc, delay, attempt + 1, retries)
            sleep(delay)
    raise AssertionError("unreachable")


def post_json(url: str, payload: dict, api_key: str | None, key: str | None, timeout: float) -> dict:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    try:
        response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise BackendError(f"request to {url} failed: {exc}", key=key) from exc
    if response.status_code in RETRIABLE_STATUS:
        raise BackendError(f"{url} answered {response.status_code} {response.reason}", key=key)
    response.raise_for_status()
    try:
        return response.json()
    except ValueError as exc:
        raise BackendError(f"{url} returned a body that is not JSON", key=key) from exc


##################################################
#  Generators
##################################################


class HTTPGenerator:
    def __init__(self, url: str, api_key: str | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, request: GenerationRequest) -> str:
        body = post_json(self.url, request.to_json(), self.api_key, request.key, self.timeout)
        if not isinstance(body.get("text"), str):
            raise BackendError(f"{self.url} response has no 'text' field", key=request.key)
        return body["text"]


class CannedGenerator:
    """Offline generator replaying stored completions keyed by image id."""

    def __init__(self, responses: dict[str, str]):
        self.responses = {str(k): v for k, v in responses.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "CannedGenerator":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def __call__(self, request: GenerationRequest) -> str:
        try:
            return self.responses[request.key]
        except KeyError:
            raise CannedLookupError(f"no canned response for {request.key!r}") from None


##################################################
#  Judges
##################################################


class HTTPJudge:
    def __init__(self, url: str, api_key: str | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, request) -> str:
        payload = {"system": request.system, "messages": [{"role": "user", "content": request.user}]}
        body = post_json(self.url, payload, self.api_key, request.key, self.timeout)
        if not isinstance(body.get("text"), str):
            raise BackendError(f"{self.url} response has no 'text' field", key=request.key)
        return body["text"]


class MockJudge:
    """Canned verdicts: ``{key: {order: {mode: verdict}}}``."""

    def __init__(self, verdicts: dict):
        self.verdicts = verdicts

    @classmethod
    def from_file(cls, path: str | Path) -> "MockJudge":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def __call__(self, request) -> str:
        try:
            return str(self.verdicts[request.key][request.order][request.mode])
        except KeyError:
            raise CannedLookupError(
                f"no canned verdict for ({request.key!r}, {request.order!r}, {request.mode!r})"
            ) from None


def first_position_judge(request) -> str:
    return "-1"


def longer_answer_judge(request) -> str:
    first, second = len(request.first), len(request.second)
    return "-1" if first > second else "1" if second > first else "0"


def tie_always_judge(request) -> str:
    return "0"


_RULES = {
    "first-position": first_position_judge,
    "longer-answer": longer_answer_judge,
    "tie-always": tie_always_judge,
}


def judge_from_spec(spec: str, url: str | None = None, api_key: str | None = None):
    """
    ``mock:<file.json>``, ``rule:<name>`` or ``http`` (which needs ``url``).
    """
    kind, _, arg = spec.partition(":")
    if kind == "mock" and arg:
        return MockJudge.from_file(arg)
    if kind == "rule":
        if arg not in _RULES:
            raise ParameterError(f"unknown rule judge {arg!r}, expected one of {', '.join(RULE_JUDGES)}")
        return _RULES[arg]
    if kind == "http":
        url = arg or url
        if not url:
            raise ParameterError("the http judge needs an endpoint url")
        return HTTPJudge(url, api_key)
    raise ParameterError(f"cannot understand judge {spec!r}, use mock:<file>, rule:<name> or http")


##################################################
#  Scorers
##################################################


def word_count_scorer(question: str, answer: str) -> float:
    return float(len(answer.split()))


class HTTPScorer:
    def __init__(self, url: str, api_key: str | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, question: str, answer: str) -> float:
        body = post_json(self.url, {"question": question, "answer": answer}, self.api_key, None, self.timeout)
        try:
            return float(body["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"{self.url} response has no numeric 'score' field") from exc


def scorer_from_spec(spec: str, url: str | None = None, api_key: str | None = None):
    """``word-count`` or ``http`` (which needs ``url``)."""
    kind, _, arg = spec.partition(":")
    if kind == "word-count":
        return word_count_scorer
    if kind == "http":
        url = arg or url
        if not url:
            raise ParameterError("the http scorer needs an endpoint url")
        return HTTPScorer(url, api_key)
    raise ParameterError(f"cannot understand scorer {spec!r}, use word-count or http")
