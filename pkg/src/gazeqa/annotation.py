"""
Post-processing of generated grounded QA annotations: marker parsing, trace
segment alignment, the keyword and reward filters and dataset assembly, plus
the driver that replays the frozen annotation prompt against a generator.
"""
from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

from gazeqa.backends import GenerationRequest, with_retries
from gazeqa.errors import (
    GenerationFormatError,
    MarkerParseError,
    ParameterError,
    SpanRangeError,
)
from gazeqa.gaze import PointTrack


logger = logging.getLogger(__name__)

DEFAULT_KEYWORDS = frozenset({"prompt", "this picture", "reference caption", "the description", "the narrative"})
REASONS = ("malformed", "ungrounded", "unaligned", "keyword", "reward", "quarantined")

MARKER = re.compile(r"<(/?)Q(\d+)>")
WORD = re.compile(r"\S+")
SEPARATOR = re.compile(r"^[ \t]*===[ \t]*$", re.MULTILINE)
LABELLED = re.compile(r"\A(Refer|Question|Indirect Question|Answer):[ \t]*(.*)\Z", re.DOTALL)
QUESTION_TAG = re.compile(r"\A<Q(\d*)>\s*")

Scorer = Callable[[str, str], float]


@dataclass(frozen=True)
class TaggedSpan:
    tag_number: int
    char_start: int
    char_end: int
    text: str


@dataclass(frozen=True)
class Narrative:
    image_id: str
    text: str
    trace: PointTrack
    word_times: tuple[tuple[float, float], ...] | None = None
    captions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.word_times is None:
            return
        n_words = len(WORD.findall(self.text))
        if len(self.word_times) != n_words:
            raise ParameterError(
                f"narrative {self.image_id}: {len(self.word_times)} word times for {n_words} words"
            )
        previous_end = -math.inf
        for start, end in self.word_times:
            if start > end or start < previous_end:
                raise ParameterError(f"narrative {self.image_id}: word times must be ascending and non-overlapping")
            previous_end = end

    @classmethod
    def from_json(cls, row: dict) -> "Narrative":
        word_times = row.get("word_times")
        return cls(
            image_id=str(row["image_id"]),
            text=row["text"],
            trace=PointTrack.from_points(row.get("points", []), source=row.get("source", "trace")),
            word_times=None if word_times is None else tuple((float(s), float(e)) for s, e in word_times),
            captions=tuple(row.get("captions", ())),
        )


@dataclass(frozen=True, eq=False)
class QARecord:
    image_id: str
    tag_number: int
    fact: str
    trace_segment: PointTrack
    direct_question: str
    indirect_question: str
    answer: str
    reward: float | None = None

    def texts(self) -> tuple[str, str, str]:
        return self.direct_question, self.indirect_question, self.answer

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "tag_number": self.tag_number,
            "fact": self.fact,
            "trace_segment": self.trace_segment.to_json(),
            "direct_question": self.direct_question,
            "indirect_question": self.indirect_question,
            "answer": self.answer,
            "reward": self.reward,
        }

    @classmethod
    def from_json(cls, row: dict) -> "QARecord":
        segment = row.get("trace_segment") or {"points": []}
        return cls(
            image_id=str(row["image_id"]),
            tag_number=int(row["tag_number"]),
            fact=row.get("fact", ""),
            trace_segment=PointTrack.from_points(segment["points"], source=segment.get("source", "trace")),
            direct_question=row["direct_question"],
            indirect_question=row.get("indirect_question", ""),
            answer=row["answer"],
            reward=row.get("reward"),
        )


@dataclass(frozen=True)
class Removal:
    image_id: str
    tag_number: int | None
    reason: str
    detail: str = ""

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "tag_number": self.tag_number, "reason": self.reason, "detail": self.detail}


@dataclass
class Partition:
    kept: list[QARecord] = field(default_factory=list)
    removed: list[QARecord] = field(default_factory=list)
    quarantined: list[QARecord] = field(default_factory=list)


@dataclass
class PipelineStats:
    raw_count: int
    kept_count: int
    removals: list[Removal] = field(default_factory=list)

    @property
    def survival_rate(self) -> float:
        return self.kept_count / self.raw_count if self.raw_count else 1.0

    def removed_by_reason(self) -> dict[str, int]:
        counts = {reason: 0 for reason in REASONS}
        for r in self.removals:
            counts[r.reason] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "raw_count": self.raw_count,
            "kept_count": self.kept_count,
            "survival_rate": self.survival_rate,
            "removed": self.removed_by_reason(),
            "removals": [r.to_json() for r in self.removals],
        }


##################################################
#  Markers
##################################################


def parse_markers(annotated: str) -> tuple[str, list[TaggedSpan]]:
    """
    Strips ``<Qn>...</Qn>`` tags and returns the clean text with the tagged
    spans, offsets relative to the clean text. Tags may not nest or cross.
    """
    clean: list[str] = []
    length = 0
    spans: list[TaggedSpan] = []
    open_tag: tuple[int, int, int] | None = None  # (number, clean start, raw position)
    seen: set[int] = set()
    cursor = 0

    for m in MARKER.finditer(annotated):
        piece = annotated[cursor:m.start()]
        clean.append(piece)
        length += len(piece)
        cursor = m.end()
        closing, number = m.group(1) == "/", int(m.group(2))
        if number < 1:
            raise MarkerParseError(f"tag number must be at least 1, got {m.group(0)}", m.start())
        if not closing:
            if open_tag is not None:
                raise MarkerParseError(f"{m.group(0)} opened inside <Q{open_tag[0]}>", m.start())
            if number in seen:
                raise MarkerParseError(f"duplicate tag <Q{number}>", m.start())
            open_tag = (number, length, m.start())
            seen.add(number)
        else:
            if open_tag is None:
                raise MarkerParseError(f"{m.group(0)} closes a tag that was never opened", m.start())
            if open_tag[0] != number:
                raise MarkerParseError(f"<Q{open_tag[0]}> closed by {m.group(0)}", m.start())
            text = "".join(clean)[open_tag[1]:length]
            spans.append(TaggedSpan(number, open_tag[1], length, text))
            open_tag = None

    if open_tag is not None:
        raise MarkerParseError(f"<Q{open_tag[0]}> is never closed", open_tag[2])
    clean.append(annotated[cursor:])
    return "".join(clean), spans


def render_markers(clean_text: str, spans: Iterable[TaggedSpan]) -> str:
    out, cursor = [], 0
    for span in sorted(spans, key=lambda s: s.char_start):
        if span.char_start < cursor or span.char_end > len(clean_text) or span.char_start > span.char_end:
            raise SpanRangeError(f"span <Q{span.tag_number}> [{span.char_start}, {span.char_end}) does not fit")
        out += [clean_text[cursor:span.char_start], f"<Q{span.tag_number}>",
                clean_text[span.char_start:span.char_end], f"</Q{span.tag_number}>"]
        cursor = span.char_end
    out.append(clean_text[cursor:])
    return "".join(out)


##################################################
#  Generation grammar
##################################################


@dataclass(frozen=True)
class QABlock:
    tag_number: int | None
    question: str
    indirect_question: str
    answer: str


@dataclass
class ParsedGeneration:
    refer_text: str
    spans: list[TaggedSpan]
    blocks: list[QABlock]
    malformed: list[str]

    @property
    def raw_count(self) -> int:
        return len(self.blocks) + len(self.malformed)


def _group_to_block(group: list[tuple[str, str]]) -> QABlock:
    labels = [label for label, _ in group]
    contents = dict(group)
    if any(not text for _, text in group):
        raise GenerationFormatError(f"empty {', '.join(l for l, t in group if not t)} block")
    tag = QUESTION_TAG.match(contents["Question"])
    if tag is None:
        raise GenerationFormatError("question does not start with a <Q#> or <Q> marker")
    number = int(tag.group(1)) if tag.group(1) else None
    full = ["Question", "Indirect Question", "Answer"]
    allowed = [full] if number is not None else [full, ["Question", "Answer"]]
    if labels not in allowed:
        raise GenerationFormatError(f"expected {' / '.join(allowed[-1])}, got {' / '.join(labels)}")
    return QABlock(
        tag_number=number,
        question=contents["Question"][tag.end():].strip(),
        indirect_question=contents.get("Indirect Question", ""),
        answer=contents["Answer"],
    )


def parse_generation(raw: str) -> ParsedGeneration:
    """
    Splits a generation into its ``Refer`` block and QA groups. Blocks are
    separated by lines holding only ``===``. A QA group that breaks the
    ``Question / Indirect Question / Answer`` grammar is reported as malformed;
    a generation without a parseable ``Refer`` block raises.
    """
    parts = [p.strip() for p in SEPARATOR.split(raw)]
    labelled = []
    for part in parts:
        m = LABELLED.match(part)
        labelled.append((m.group(1), m.group(2).strip()) if m else (None, part))

    if not labelled or labelled[0][0] != "Refer":
        raise GenerationFormatError("generation does not start with a Refer block")
    refer_text, spans = parse_markers(labelled[0][1])

    groups: list[list[tuple[str, str]]] = []
    for label, text in labelled[1:]:
        if label == "Question" or not groups:
            groups.append([])
        groups[-1].append((label, text))

    blocks, malformed = [], []
    for group in groups:
        try:
            if any(label is None for label, _ in group) or group[0][0] != "Question":
                raise GenerationFormatError("unlabelled or out-of-order block")
            blocks.append(_group_to_block(group))
        except GenerationFormatError as exc:
            malformed.append(str(exc))
    return ParsedGeneration(refer_text=refer_text, spans=spans, blocks=blocks, malformed=malformed)


##################################################
#  Alignment
##################################################


def _word_spans(text: str) -> list[tuple[int, int]]:
    return [(m.start(), m.end()) for m in WORD.finditer(text)]


def align_segments(narrative: Narrative, spans: Sequence[TaggedSpan]) -> list[tuple[TaggedSpan, PointTrack]]:
    """
    Trace points belonging to every span: by word timestamps when the
    narrative has them, otherwise by character fraction of the text mapped to
    index fraction of the trace.
    """
    n_chars, trace = len(narrative.text), narrative.trace
    n_points = len(trace)
    words = _word_spans(narrative.text) if narrative.word_times is not None else []
    out = []
    for span in spans:
        if not 0 <= span.char_start <= span.char_end <= n_chars:
            raise SpanRangeError(
                f"span <Q{span.tag_number}> [{span.char_start}, {span.char_end}) is outside "
                f"the {n_chars}-character narrative {narrative.image_id}"
            )
        if narrative.word_times is not None:
            covered = [i for i, (s, e) in enumerate(words) if s < span.char_end and e > span.char_start]
            if covered:
                t0 = narrative.word_times[covered[0]][0]
                t1 = narrative.word_times[covered[-1]][1]
                indices = [i for i, t in enumerate(trace.t) if t0 <= t <= t1]
            else:
                indices = []
        elif n_chars == 0:
            indices = []
        else:
            # i/n in [start/len, end/len), kept in integers
            indices = [
                i for i in range(n_points)
                if i * n_chars >= span.char_start * n_points and i * n_chars < span.char_end * n_points
            ]
        out.append((span, trace.take(indices)))
    return out


def locate_span(narrative: Narrative, refer_text: str, span: TaggedSpan, search_from: int = 0) -> TaggedSpan | None:
    """Moves a span of the generated ``Refer`` text onto the narrative text."""
    if refer_text == narrative.text:
        return span
    at = narrative.text.find(span.text, search_from)
    if at < 0:
        at = narrative.text.find(span.text)
    if at < 0 or not span.text:
        return None
    return TaggedSpan(span.tag_number, at, at + len(span.text), span.text)


##################################################
#  Filters
##################################################


def keyword_filter(records: Iterable[QARecord], keywords: Iterable[str] = DEFAULT_KEYWORDS) -> Partition:
    lowered = [k.lower() for k in keywords]
    result = Partition()
    for record in records:
        haystack = [t.lower() for t in record.texts()]
        if any(k in text for k in lowered for text in haystack):
            result.removed.append(record)
        else:
            result.kept.append(record)
    return result


def _score(scorer: Scorer, record: QARecord) -> float | None:
    try:
        score = float(scorer(record.direct_question, record.answer))
    except Exception as exc:
        logger.warning("scorer failed on %s/Q%s: %s", record.image_id, record.tag_number, exc)
        return None
    if math.isnan(score):
        logger.warning("scorer returned NaN on %s/Q%s", record.image_id, record.tag_number)
        return None
    return score


def reward_filter(records: Iterable[QARecord], scorer: Scorer, tau: float, jobs: int = 1) -> Partition:
    """
    Scores ``(direct question, answer)`` and drops records below ``tau``. Kept
    and removed records carry their score; records the scorer fails on are
    quarantined unscored.
    """
    records = list(records)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            scores = list(executor.map(lambda r: _score(scorer, r), records))
    else:
        scores = [_score(scorer, r) for r in records]

    result = Partition()
    for record, score in zip(records, scores):
        if score is None:
            result.quarantined.append(record)
        elif score < tau:
            result.removed.append(replace(record, reward=score))
        else:
            result.kept.append(replace(record, reward=score))
    return result


##################################################
#  Dataset assembly
##################################################


def _sort_key(item) -> tuple:
    return item.image_id, item.tag_number if item.tag_number is not None else -1


def records_from_generation(narrative: Narrative, raw: str) -> tuple[list[QARecord], list[Removal], int]:
    """Returns ``(records, removals, raw count)`` for one narrative."""
    image_id = narrative.image_id
    try:
        parsed = parse_generation(raw)
    except (GenerationFormatError, MarkerParseError) as exc:
        raw_count = max(1, len(re.findall(r"^Question:", raw, re.MULTILINE)))
        return [], [Removal(image_id, None, "malformed", str(exc))] * raw_count, raw_count

    removals = [Removal(image_id, None, "malformed", detail) for detail in parsed.malformed]
    spans = {s.tag_number: s for s in parsed.spans}
    located: dict[int, TaggedSpan] = {}
    cursor = 0
    for span in sorted(parsed.spans, key=lambda s: s.char_start):
        moved = locate_span(narrative, parsed.refer_text, span, cursor)
        if moved is not None:
            located[span.tag_number] = moved
            cursor = moved.char_end
    segments = {span.tag_number: track for span, track in align_segments(narrative, list(located.values()))}

    records = []
    for block in parsed.blocks:
        if block.tag_number is None:
            removals.append(Removal(image_id, None, "ungrounded", block.question))
        elif block.tag_number not in spans:
            removals.append(Removal(image_id, block.tag_number, "malformed", "question refers to an unknown tag"))
        elif block.tag_number not in located or len(segments[block.tag_number]) == 0:
            removals.append(Removal(image_id, block.tag_number, "unaligned", spans[block.tag_number].text))
        else:
            records.append(QARecord(
                image_id=image_id,
                tag_number=block.tag_number,
                fact=located[block.tag_number].text,
                trace_segment=segments[block.tag_number],
                direct_question=block.question,
                indirect_question=block.indirect_question,
                answer=block.answer,
            ))
    return records, removals, parsed.raw_count


def build_dataset(
        narratives: Iterable[Narrative],
        generated: Mapping[str, str],
        keywords: Iterable[str],
        scorer: Scorer,
        tau: float,
        jobs: int = 1,
) -> tuple[list[QARecord], PipelineStats]:
    """
    parse -> align -> keyword filter -> reward filter. Every generated QA
    group is counted in the raw total and either kept or logged in the stats
    removals with a reason.
    """
    narratives = list(narratives)
    known = {n.image_id for n in narratives}
    for image_id in sorted(set(generated) - known):
        logger.warning("generation for unknown narrative %s ignored", image_id)

    work = []
    for n in narratives:
        if n.image_id in generated:
            work.append(n)
        else:
            logger.warning("no generation for narrative %s", n.image_id)

    def process(n: Narrative):
        return records_from_generation(n, generated[n.image_id])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            per_narrative = list(executor.map(process, work))
    else:
        per_narrative = [process(n) for n in work]

    candidates, removals, raw_count = [], [], 0
    for records, removed, count in per_narrative:
        candidates += records
        removals += removed
        raw_count += count

    by_keyword = keyword_filter(candidates, keywords)
    removals += [Removal(r.image_id, r.tag_number, "keyword") for r in by_keyword.removed]
    by_reward = reward_filter(by_keyword.kept, scorer, tau, jobs=jobs)
    removals += [Removal(r.image_id, r.tag_number, "reward", f"{r.reward:.4f}") for r in by_reward.removed]
    removals += [Removal(r.image_id, r.tag_number, "quarantined", "scorer failed") for r in by_reward.quarantined]

    kept = sorted(by_reward.kept, key=_sort_key)
    removals.sort(key=lambda r: (r.image_id, r.tag_number if r.tag_number is not None else -1, r.reason))
    return kept, PipelineStats(raw_count=raw_count, kept_count=len(kept), removals=removals)


##################################################
#  Generation driver
##################################################


@dataclass(frozen=True)
class FrozenPrompt:
    system: str
    examples: tuple[tuple[str, str], ...]


def _data(name: str) -> str:
    return resources.files("gazeqa").joinpath("data", name).read_text(encoding="utf-8").strip()


def load_prompt() -> FrozenPrompt:
    return FrozenPrompt(
        system=_data("annotation_system.txt"),
        examples=tuple(
            (_data(f"example_{i}_user.txt"), _data(f"example_{i}_assistant.txt")) for i in (1, 2)
        ),
    )


def user_message(narrative: Narrative) -> str:
    return f"Background: {''.join(narrative.captions)}\nReferable:{narrative.text}"


def generation_request(narrative: Narrative, prompt: FrozenPrompt) -> GenerationRequest:
    messages = []
    for user, assistant in prompt.examples:
        messages += [{"role": "user", "content": user}, {"role": "assistant", "content": assistant}]
    messages.append({"role": "user", "content": user_message(narrative)})
    return GenerationRequest(key=narrative.image_id, system=prompt.system, messages=tuple(messages))


def generate_qa(
        narrative: Narrative,
        generator: Callable[[GenerationRequest], str],
        prompt: FrozenPrompt | None = None,
        retries: int = 3,
        base_delay: float = 1.0,
        sleep: Callable[[float], object] | None = None,
) -> str:
    """Raw generator output for one narrative, returned verbatim."""
    request = generation_request(narrative, prompt or load_prompt())
    kwargs = {} if sleep is None else {"sleep": sleep}
    return with_retries(lambda: generator(request), retries=retries, base_delay=base_delay, **kwargs)
