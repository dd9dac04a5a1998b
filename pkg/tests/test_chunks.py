import warnings

import pytest

from gazeqa.annotation import QARecord
from gazeqa.chunks import (
    Chunk,
    DegenerateChunkWarning,
    SpecialToken,
    answer_text,
    loss_mask,
    records_to_chunks,
    render_chunk,
    tokenize,
)
from gazeqa.errors import ChunkFormatError, InjectionError
from gazeqa.gaze import PointTrack


GOLDEN = "[image] User:[fixation]what color is this? GPT:<answer>red.[endofchunk]"


def record(image_id, tag, question, answer, indirect="what is that?"):
    return QARecord(
        image_id=image_id,
        tag_number=tag,
        fact="fact",
        trace_segment=PointTrack.from_points([(0.5, 0.5, 0.0)]),
        direct_question=question,
        indirect_question=indirect,
        answer=answer,
    )


class TestRenderChunk:
    def test_matches_golden_string(self):
        rendered = render_chunk(Chunk(instruction="what color is this?", answer="red"))

        assert rendered.encode("utf-8") == GOLDEN.encode("utf-8")

    def test_prefixes_context(self):
        rendered = render_chunk(Chunk(instruction="and now?", answer="blue", context="earlier turn"))

        assert rendered.startswith("earlier turn [image] User:")

    @pytest.mark.parametrize("literal", [t.value for t in SpecialToken])
    def test_refuses_special_tokens_in_content(self, literal):
        with pytest.raises(InjectionError):
            render_chunk(Chunk(instruction=f"say {literal}", answer="ok"))

    def test_rejects_empty_fields(self):
        with pytest.raises(ChunkFormatError):
            Chunk(instruction="", answer="x")

    def test_special_tokens_print_as_their_literal(self):
        assert str(SpecialToken.ANSWER) == "<answer>"


class TestTokenize:
    def test_keeps_special_literals_whole(self):
        assert tokenize(GOLDEN) == [
            "[image]", "User:", "[fixation]", "what", "color", "is", "this?", "GPT:", "<answer>",
            "red.", "[endofchunk]",
        ]

    def test_special_literals_split_glued_words(self):
        assert tokenize("GPT:<answer>red.[endofchunk]") == ["GPT:", "<answer>", "red.", "[endofchunk]"]


class TestLossMask:
    def test_nine_token_fixture(self):
        tokens = ["[image]", "User:", "[fixation]", "what?", "GPT:", "<answer>", "red", "car.", "[endofchunk]"]

        assert loss_mask(tokens) == [False, False, False, False, False, False, True, True, True]

    def test_covers_every_answer_in_a_multi_turn_chunk(self):
        tokens = tokenize(
            "[image] User:[fixation]a? GPT:<answer>b.[endofchunk] [image] User:[fixation]c? GPT:<answer>d.[endofchunk]"
        )

        mask = loss_mask(tokens)

        assert [t for t, m in zip(tokens, mask) if m] == ["b.", "[endofchunk]", "d.", "[endofchunk]"]

    def test_raises_without_answer_token(self):
        with pytest.raises(ChunkFormatError):
            loss_mask(["[image]", "User:"])

    def test_warns_on_empty_prediction_region(self):
        with pytest.warns(DegenerateChunkWarning):
            assert loss_mask(["User:", "<answer>"]) == [False, False]

    def test_does_not_warn_for_regular_chunks(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            loss_mask(tokenize(GOLDEN))


class TestAnswerText:
    @pytest.mark.parametrize("answer,expected", [("red.", "red"), ("red", "red"), ("etc..", "etc.")])
    def test_strips_one_trailing_period(self, answer, expected):
        assert answer_text(answer) == expected


class TestRecordsToChunks:
    records = [
        record("a", 1, "what is the red thing?", "A hydrant.", indirect="what is it?"),
        record("a", 2, "is it deep?", "Yes."),
        record("b", 1, "what color?", "Grey."),
    ]

    def test_one_chunk_per_record(self):
        chunks = records_to_chunks(self.records)

        assert chunks[0] == "[image] User:[fixation]what is the red thing? GPT:<answer>A hydrant.[endofchunk]"
        assert len(chunks) == 3

    def test_indirect_questions(self):
        assert records_to_chunks(self.records, question="indirect")[0].startswith("[image] User:[fixation]what is it?")

    def test_in_context_turns_stay_within_one_image(self):
        chunks = records_to_chunks(self.records, in_context=2)

        assert chunks[1].startswith(chunks[0] + " [image]")
        assert chunks[2].startswith("[image] User:[fixation]what color?")

    @pytest.mark.parametrize("kwargs", [{"question": "both"}, {"in_context": -1}])
    def test_rejects_bad_options(self, kwargs):
        with pytest.raises(ChunkFormatError):
            records_to_chunks(self.records, **kwargs)
