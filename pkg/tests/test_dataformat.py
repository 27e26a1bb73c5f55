import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetkit.dataformat import (
    INSTRUCTIONS,
    FormatError,
    VocabLayout,
    Word,
    choose_instruction,
    deinterleave,
    format_asr,
    format_record,
    format_sqa,
    format_text,
    format_tts,
    interleave,
    make_words,
)

LAYOUT = VocabLayout(text_vocab_size=900, speech_token_count=10_000)
TWO_WORDS = make_words([([10, 11], [900]), ([12], [901, 902])])
INSTR = [1, 2, 3]

word_st = st.builds(
    lambda t, s: Word(tuple(t), tuple(s)),
    st.lists(st.integers(0, 899), min_size=1, max_size=4),
    st.lists(st.integers(900, 10_899), min_size=1, max_size=6),
)
words_st = st.lists(word_st, max_size=12)


def text_run_of(seq):
    return [t for t in seq if LAYOUT.is_text(t)]


# -- layout -----------------------------------------------------------------------

def test_layout_ranges():
    assert LAYOUT.speech_offset == 900 and LAYOUT.size == 10_900
    assert LAYOUT.is_text(899) and not LAYOUT.is_text(900)
    assert LAYOUT.is_speech(900) and LAYOUT.is_speech(10_899) and not LAYOUT.is_speech(10_900)
    with pytest.raises(FormatError):
        VocabLayout(1000, 10, speech_offset=500)
    assert VocabLayout.from_json(LAYOUT.to_json()) == LAYOUT


# -- interleave -------------------------------------------------------------------

def test_interleave_empty():
    assert interleave([]) == []


def test_interleave_two_words():
    assert interleave(TWO_WORDS) == [10, 11, 900, 12, 901, 902]


def test_interleave_rejects_empty_word():
    with pytest.raises(FormatError):
        interleave([Word((), (900,))])
    with pytest.raises(FormatError):
        interleave([Word((1,), ())])


def test_deinterleave_examples():
    assert deinterleave([10, 900], LAYOUT) == [Word((10,), (900,))]
    assert deinterleave([10, 11, 900, 12, 901, 902], LAYOUT) == TWO_WORDS
    assert deinterleave([], LAYOUT) == []


@pytest.mark.parametrize("seq", [[900, 10], [10, 11], [10, 900, 12], [10, 20_000]])
def test_deinterleave_errors(seq):
    with pytest.raises(FormatError):
        deinterleave(seq, LAYOUT)


@settings(max_examples=300, deadline=None)
@given(words_st)
def test_round_trip(words):
    seq = interleave(words)
    assert deinterleave(seq, LAYOUT) == list(words)
    assert interleave(deinterleave(seq, LAYOUT)) == seq


# -- stage formats ------------------------------------------------------------------

def test_asr_example():
    ex = format_asr(INSTR, [900, 901], [10], layout=LAYOUT)
    assert ex.prompt == (1, 2, 3, 900, 901) and ex.response == (10,)
    assert ex.loss_mask == [False] * 5 + [True]


@pytest.mark.parametrize("args", [([], [900], [10]), (INSTR, [], [10]), (INSTR, [900], [])])
def test_asr_empty_fields(args):
    with pytest.raises(FormatError):
        format_asr(*args)


def test_asr_range_check():
    with pytest.raises(FormatError):
        format_asr(INSTR, [10], [11], layout=LAYOUT)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 899), min_size=1, max_size=10), st.lists(st.integers(900, 10_899), min_size=1, max_size=10), st.lists(st.integers(0, 899), min_size=1, max_size=10))
def test_asr_lengths(instr, speech, transcript):
    ex = format_asr(instr, speech, transcript, layout=LAYOUT)
    assert len(ex.prompt) == len(instr) + len(speech)
    assert len(ex.response) == len(transcript)


def test_tts_examples():
    ex = format_tts(INSTR, [([10], [900])])
    assert ex.prompt == (1, 2, 3, 10) and ex.response == (10, 900)
    ex = format_tts(INSTR, TWO_WORDS)
    assert ex.response == (10, 11, 900, 12, 901, 902)
    assert ex.prompt == (1, 2, 3, 10, 11, 12)
    with pytest.raises(FormatError):
        format_tts(INSTR, [])


@settings(max_examples=150, deadline=None)
@given(words_st.filter(bool))
def test_tts_projection(words):
    ex = format_tts(INSTR, words, layout=LAYOUT)
    assert list(ex.prompt[len(INSTR):]) == text_run_of(ex.response)
    # speech runs grouped by word equal the input speech tokens
    assert [list(w.speech) for w in deinterleave(ex.response, LAYOUT)] == [list(w.speech) for w in words]
    assert ex.loss_mask == [False] * len(ex.prompt) + [True] * len(ex.response)


def test_sqa_example():
    ex = format_sqa([900], [10], [([20], [910])])
    assert ex.prompt == (900,) and ex.response == (10, 20, 20, 910)
    with pytest.raises(FormatError):
        format_sqa([900], [10], [])
    with pytest.raises(FormatError):
        format_sqa([], [10], [([20], [910])])


def test_sqa_separator():
    ex = format_sqa([900], [10], [([20], [910])], separator=5)
    assert ex.response == (10, 5, 20, 5, 20, 910)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(900, 10_899), min_size=1, max_size=8), st.lists(st.integers(0, 899), min_size=1, max_size=8), words_st.filter(bool))
def test_sqa_structure(q_speech, q_text, answer):
    ex = format_sqa(q_speech, q_text, answer, layout=LAYOUT)
    first_speech = next(k for k, t in enumerate(ex.response) if LAYOUT.is_speech(t))
    answer_text = [t for w in answer for t in w.text]
    prefix = list(ex.response[:first_speech])
    assert prefix[: len(q_text) + len(answer_text)] == list(q_text) + answer_text
    assert list(ex.prompt) == q_speech


def test_text_example():
    ex = format_text([10], [20])
    assert (ex.prompt, ex.response, ex.task) == ((10,), (20,), "text")
    assert ex.loss_mask == [False, True]
    with pytest.raises(FormatError):
        format_text([], [20])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 899), min_size=1, max_size=20), st.lists(st.integers(0, 899), min_size=1, max_size=20))
def test_text_has_no_speech(instr, resp):
    ex = format_text(instr, resp, layout=LAYOUT)
    assert not any(LAYOUT.is_speech(t) for t in ex.tokens)


def test_text_rejects_speech_ids_with_layout():
    with pytest.raises(FormatError):
        format_text([10], [901], layout=LAYOUT)


def test_format_record_dispatch_and_errors():
    ex = format_record({"id": "x", "task": "tts", "instruction": INSTR, "words": [{"t": [10, 11], "s": [900]}, {"t": [12], "s": [901, 902]}]})
    assert ex.to_json()["response"] == [10, 11, 900, 12, 901, 902]
    assert ex.to_json()["words"][1] == {"t": [12], "s": [901, 902]}
    with pytest.raises(FormatError, match="words"):
        format_record({"task": "sqa", "question_speech": [900], "question_text": [10]})
    with pytest.raises(FormatError):
        format_record({"task": "video"})
    with pytest.raises(FormatError):
        format_record({"task": "text", "instruction": "abc", "response": [1]})


def test_instruction_templates():
    assert len(INSTRUCTIONS["asr"]) == 10 and len(INSTRUCTIONS["tts"]) == 10
    assert INSTRUCTIONS["asr"][0] == "Please repeat the following words:"
    assert INSTRUCTIONS["tts"][0] == "Please speak out loud the following words:"
    picks = [choose_instruction("asr", f"utt{k}", seed=3) for k in range(500)]
    assert picks == [choose_instruction("asr", f"utt{k}", seed=3) for k in range(500)]
    assert set(picks) == set(INSTRUCTIONS["asr"])
    with pytest.raises(FormatError):
        choose_instruction("sqa", "x")
