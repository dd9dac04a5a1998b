"""
Training chunks for the gaze-conditioned decoder.

One turn renders as

    {context }[image] User:[fixation]{instruction} GPT:<answer>{answer}.[endofchunk]

and the loss covers every token after ``<answer>`` up to and including the
next ``[endofchunk]``.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from enum import Enum
from itertools import groupby
from typing import Iterable, Literal

from gazeqa.annotation import QARecord
from gazeqa.errors import ChunkFormatError, InjectionError


class SpecialToken(str, Enum):
    IMAGE = "[image]"
    FIXATION = "[fixation]"
    ANSWER = "<answer>"
    ENDOFCHUNK = "[endofchunk]"

    def __str__(self):
        return self.value


SPECIAL_LITERALS = tuple(t.value for t in SpecialToken)
_SPECIAL = re.compile("(" + "|".join(re.escape(s) for s in SPECIAL_LITERALS) + ")")


class DegenerateChunkWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Chunk:
    instruction: str
    answer: str
    context: str = ""

    def __post_init__(self):
        if not self.instruction:
            raise ChunkFormatError("chunk instruction is empty")
        if not self.answer:
            raise ChunkFormatError("chunk answer is empty")


def _refuse_specials(field_name: str, text: str):
    for literal in SPECIAL_LITERALS:
        if literal in text:
            raise InjectionError(f"{field_name} contains the special token {literal}")


def render_chunk(chunk: Chunk) -> str:
    _refuse_specials("instruction", chunk.instruction)
    _refuse_specials("answer", chunk.answer)
    prefix = f"{chunk.context} " if chunk.context else ""
    return (
        f"{prefix}{SpecialToken.IMAGE} User:{SpecialToken.FIXATION}{chunk.instruction}"
        f" GPT:{SpecialToken.ANSWER}{chunk.answer}.{SpecialToken.ENDOFCHUNK}"
    )


def tokenize(text: str) -> list[str]:
    """Special literals become single tokens; everything else splits on whitespace."""
    tokens = []
    for piece in _SPECIAL.split(text):
        if piece in SPECIAL_LITERALS:
            tokens.append(piece)
        else:
            tokens += piece.split()
    return tokens


def loss_mask(tokens: Iterable[str]) -> list[bool]:
    tokens = list(tokens)
    if SpecialToken.ANSWER.value not in tokens:
        raise ChunkFormatError(f"token stream has no {SpecialToken.ANSWER} token")
    mask, inside = [], False
    for token in tokens:
        if token == SpecialToken.ANSWER.value:
            mask.append(False)
            inside = True
        elif inside:
            mask.append(True)
            if token == SpecialToken.ENDOFCHUNK.value:
                inside = False
        else:
            mask.append(False)
    if not any(mask):
        warnings.warn("chunk has an empty prediction region", DegenerateChunkWarning, stacklevel=2)
    return mask


def answer_text(answer: str) -> str:
    """Drops one trailing period, the template adds it back."""
    return answer[:-1] if answer.endswith(".") else answer


def records_to_chunks(
        records: Iterable[QARecord],
        question: Literal["direct", "indirect"] = "direct",
        in_context: int = 0,
) -> list[str]:
    """
    One rendered chunk per record. With ``in_context > 0`` each chunk is
    preceded by up to that many earlier turns of the same image.
    """
    if question not in ("direct", "indirect"):
        raise ChunkFormatError(f"question must be 'direct' or 'indirect', got {question!r}")
    if in_context < 0:
        raise ChunkFormatError(f"in_context must not be negative, got {in_context}")
    rendered = []
    for _, group in groupby(records, key=lambda r: r.image_id):
        turns: list[str] = []
        for record in group:
            text = record.direct_question if question == "direct" else record.indirect_question
            context = " ".join(turns[-in_context:]) if in_context else ""
            rendered.append(render_chunk(Chunk(instruction=text, answer=answer_text(record.answer), context=context)))
            turns.append(render_chunk(Chunk(instruction=text, answer=answer_text(record.answer))))
    return rendered
