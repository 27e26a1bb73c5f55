"""Stage-specific prompt/response token sequences for multi-stage speech-text tuning.

Text and speech tokens share one expanded vocabulary: text ids occupy
``[0, text_vocab_size)`` and speech ids occupy
``[speech_offset, speech_offset + speech_token_count)``.

Per-stage layouts (``P`` prompt, ``R`` response; loss only on ``R``):

========  ===========================  ==========================================
task      prompt                       response
========  ===========================  ==========================================
asr       instruction + speech         transcript
tts       instruction + transcript     t1 s1 t2 s2 ... tL sL
sqa       question speech              question text + answer text + t1 s1 ...
text      instruction                  response
========  ===========================  ==========================================
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TASKS = ("asr", "tts", "sqa", "text")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class VocabLayout:
    text_vocab_size: int
    speech_token_count: int = 10_000
    speech_offset: int | None = None

    def __post_init__(self):
        if self.speech_offset is None:
            object.__setattr__(self, "speech_offset", self.text_vocab_size)
        if self.text_vocab_size <= 0 or self.speech_token_count <= 0:
            raise FormatError("vocabulary sizes must be positive")
        if self.speech_offset < self.text_vocab_size:
            raise FormatError("speech id range overlaps the text vocabulary")

    @property
    def size(self) -> int:
        return self.speech_offset + self.speech_token_count

    def is_text(self, tok: int) -> bool:
        return 0 <= tok < self.text_vocab_size

    def is_speech(self, tok: int) -> bool:
        return self.speech_offset <= tok < self.speech_offset + self.speech_token_count

    def to_json(self) -> dict:
        return {
            "text_vocab_size": self.text_vocab_size,
            "speech_token_count": self.speech_token_count,
            "speech_offset": self.speech_offset,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "VocabLayout":
        return cls(int(raw["text_vocab_size"]), int(raw.get("speech_token_count", 10_000)), raw.get("speech_offset"))

    @classmethod
    def load(cls, path) -> "VocabLayout":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Word:
    text: tuple[int, ...]
    speech: tuple[int, ...]


WordAligned = Sequence[Word]


def make_words(pairs) -> list[Word]:
    """``[(text_ids, speech_ids), ...]`` or ``[{"t": [...], "s": [...]}, ...]`` to ``Word`` objects."""
    out = []
    for p in pairs:
        if isinstance(p, Word):
            out.append(p)
        elif isinstance(p, dict):
            out.append(Word(tuple(int(x) for x in p["t"]), tuple(int(x) for x in p["s"])))
        else:
            t, s = p
            out.append(Word(tuple(int(x) for x in t), tuple(int(x) for x in s)))
    return out


def check_words(words: WordAligned, layout: VocabLayout | None = None) -> None:
    for k, w in enumerate(words):
        if not w.text or not w.speech:
            raise FormatError(f"word {k} needs at least one text and one speech token")
        if layout is not None:
            if not all(layout.is_text(t) for t in w.text):
                raise FormatError(f"word {k} has a text token outside the text vocabulary")
            if not all(layout.is_speech(s) for s in w.speech):
                raise FormatError(f"word {k} has a speech token outside the speech range")


def interleave(words: WordAligned) -> list[int]:
    check_words(words)
    seq: list[int] = []
    for w in words:
        seq.extend(w.text)
        seq.extend(w.speech)
    return seq


def deinterleave(seq: Sequence[int], layout: VocabLayout) -> list[Word]:
    """Split a text-first alternating sequence back into words.

    A new word starts at every speech-to-text transition.
    """
    words: list[Word] = []
    text: list[int] = []
    speech: list[int] = []
    for pos, tok in enumerate(seq):
        tok = int(tok)
        if layout.is_text(tok):
            if speech:
                words.append(Word(tuple(text), tuple(speech)))
                text, speech = [], []
            text.append(tok)
        elif layout.is_speech(tok):
            if not text:
                raise FormatError(f"speech token at position {pos} has no preceding text run")
            speech.append(tok)
        else:
            raise FormatError(f"token {tok} at position {pos} is outside the vocabulary")
    if text and not speech:
        raise FormatError("sequence ends with a text run that has no speech tokens")
    if text:
        words.append(Word(tuple(text), tuple(speech)))
    return words


@dataclass(frozen=True)
class Example:
    id: str
    task: str
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    words: tuple[Word, ...] = field(default=())

    @property
    def tokens(self) -> list[int]:
        return [*self.prompt, *self.response]

    @property
    def loss_mask(self) -> list[bool]:
        return [False] * len(self.prompt) + [True] * len(self.response)

    def to_json(self) -> dict:
        out = {"id": self.id, "task": self.task, "prompt": list(self.prompt), "response": list(self.response)}
        if self.words:
            out["words"] = [{"t": list(w.text), "s": list(w.speech)} for w in self.words]
        return out


def _need(name: str, seq) -> tuple[int, ...]:
    if seq is None or len(seq) == 0:
        raise FormatError(f"{name} must be non-empty")
    return tuple(int(x) for x in seq)


def _check_range(layout: VocabLayout | None, name: str, seq, want: str) -> None:
    if layout is None:
        return
    ok = layout.is_text if want == "text" else layout.is_speech
    bad = [t for t in seq if not ok(t)]
    if bad:
        raise FormatError(f"{name} has ids outside the {want} range: {bad[:5]}")


def format_asr(instruction, speech, transcript, *, id: str = "", layout: VocabLayout | None = None) -> Example:
    instruction = _need("instruction", instruction)
    speech = _need("speech", speech)
    transcript = _need("transcript", transcript)
    _check_range(layout, "instruction", instruction, "text")
    _check_range(layout, "speech", speech, "speech")
    _check_range(layout, "transcript", transcript, "text")
    return Example(id, "asr", instruction + speech, transcript)


def format_tts(instruction, words, *, id: str = "", layout: VocabLayout | None = None) -> Example:
    instruction = _need("instruction", instruction)
    words = tuple(make_words(words))
    if not words:
        raise FormatError("aligned words must be non-empty")
    check_words(words, layout)
    _check_range(layout, "instruction", instruction, "text")
    transcript = tuple(t for w in words for t in w.text)
    return Example(id, "tts", instruction + transcript, tuple(interleave(words)), words)


def format_sqa(
    question_speech,
    question_text,
    answer_words,
    *,
    id: str = "",
    layout: VocabLayout | None = None,
    separator: int | None = None,
) -> Example:
    """Prompt is the spoken question alone (no instruction).

    ``separator``, when given, is placed between question text, answer text
    and the interleaved block.
    """
    question_speech = _need("question_speech", question_speech)
    question_text = _need("question_text", question_text)
    words = tuple(make_words(answer_words))
    if not words:
        raise FormatError("answer must be non-empty")
    check_words(words, layout)
    _check_range(layout, "question_speech", question_speech, "speech")
    _check_range(layout, "question_text", question_text, "text")
    answer_text = tuple(t for w in words for t in w.text)
    sep = () if separator is None else (int(separator),)
    response = question_text + sep + answer_text + sep + tuple(interleave(words))
    return Example(id, "sqa", question_speech, response, words)


def format_text(instruction, response, *, id: str = "", layout: VocabLayout | None = None) -> Example:
    instruction = _need("instruction", instruction)
    response = _need("response", response)
    _check_range(layout, "instruction", instruction, "text")
    _check_range(layout, "response", response, "text")
    return Example(id, "text", instruction, response)


def format_record(raw: dict, task: str | None = None, *, layout: VocabLayout | None = None, separator: int | None = None) -> Example:
    """Build an :class:`Example` from one input manifest line.

    Expected fields per task: ``asr`` instruction/speech/transcript; ``tts``
    instruction/words; ``sqa`` question_speech/question_text/words; ``text``
    instruction/response. ``words`` is a list of ``{"t": [...], "s": [...]}``.
    """
    task = task or raw.get("task")
    if task not in TASKS:
        raise FormatError(f"unknown task {task!r}")
    ex_id = str(raw.get("id", ""))
    try:
        if task == "asr":
            return format_asr(raw["instruction"], raw["speech"], raw["transcript"], id=ex_id, layout=layout)
        if task == "tts":
            return format_tts(raw["instruction"], raw["words"], id=ex_id, layout=layout)
        if task == "sqa":
            return format_sqa(
                raw["question_speech"], raw["question_text"], raw["words"], id=ex_id, layout=layout, separator=separator
            )
        return format_text(raw["instruction"], raw["response"], id=ex_id, layout=layout)
    except KeyError as exc:
        raise FormatError(f"missing field {exc.args[0]!r} for task {task}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed {task} record: {exc}") from None


# -- instruction templates ---------------------------------------------------

INSTRUCTIONS = {
    "asr": (
        "Please repeat the following words:",
        "Transcribe the following audio:",
        "Write down what is said in this recording:",
        "Convert the following speech into text:",
        "What does the speaker say?",
        "Listen and transcribe:",
        "Provide a transcript of this speech:",
        "Turn the spoken words below into written text:",
        "Recognize the speech and output the words:",
        "Type out the following utterance:",
    ),
    "tts": (
        "Please speak out loud the following words:",
        "Read the following sentence aloud:",
        "Say the following text:",
        "Convert this text into speech:",
        "Pronounce the following words:",
        "Speak this sentence:",
        "Produce speech for the following text:",
        "Read this out loud:",
        "Voice the following words:",
        "Synthesize speech for this sentence:",
    ),
}


def choose_instruction(task: str, example_id: str, seed: int = 0) -> str:
    """Seeded per-example choice among the ten templates of a task."""
    if task not in INSTRUCTIONS:
        raise FormatError(f"no instruction templates for task {task!r}")
    digest = hashlib.blake2b(f"{seed}\x00{example_id}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return INSTRUCTIONS[task][int(rng.integers(len(INSTRUCTIONS[task])))]
