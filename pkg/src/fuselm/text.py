"""Character-level vocabulary, prompt templates, and the dataset file format.

Tokenization is character level with ten reserved control tokens occupying
ids 0-9. Control tokens are written in text form as markers such as "<SEP>"
or "[KNOWLEDGE]"; the marker characters '<', '>', '[', ']' are not part of
the base alphabet, so marker collapse is unambiguous and tokenize/detokenize
round-trips exactly.

Datasets are line-delimited JSON records (UTF-8, one sample per line) with
the field order: id, query, documents, positive_index, answer, y_safe, turns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DatasetParseError, ValidationError, VocabularyError

# Reserved control tokens, in id order 0..9.
SPECIAL_TOKENS = (
    "<PAD>",
    "<BOS>",
    "<EOS>",
    "<SEP>",
    "[KNOWLEDGE]",
    "[QUESTION]",
    "[USER]",
    "[SYSTEM]",
    "<SAFE>",
    "<REJECT>",
)

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3
KNOWLEDGE_ID, QUESTION_ID, USER_ID, SYSTEM_ID = 4, 5, 6, 7
SAFE_ID, REJECT_ID = 8, 9

BASE_ALPHABET = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    " .,?!':;-()="
)

DEFAULT_PREAMBLE = (
    "You are a helpful assistant for public service questions. "
    "Answer clearly and refuse unsafe requests."
)


class Vocabulary:
    """Bijective token<->id table: ten reserved specials, then characters."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValidationError("vocabulary must start with the ten reserved control tokens")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        # control markers sorted longest-first so greedy marker matching is unambiguous
        self._markers = sorted(SPECIAL_TOKENS, key=len, reverse=True)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + list(BASE_ALPHABET))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def tokenize(self, s: str) -> list[int]:
        """Encode a string; control markers collapse to single ids."""
        ids: list[int] = []
        i = 0
        while i < len(s):
            if s[i] in "<[":
                for marker in self._markers:
                    if s.startswith(marker, i):
                        ids.append(self.token_to_id[marker])
                        i += len(marker)
                        break
                else:
                    self._unknown(s, i)
            else:
                tok_id = self.token_to_id.get(s[i])
                if tok_id is None:
                    self._unknown(s, i)
                ids.append(tok_id)
                i += 1
        return ids

    def _unknown(self, s: str, i: int) -> None:
        byte_offset = len(s[:i].encode("utf-8"))
        raise VocabularyError(
            f"unknown character {s[i]!r} at index {i} (byte offset {byte_offset})"
        )

    def detokenize(self, ids: Iterable[int]) -> str:
        parts = []
        for tok_id in ids:
            if not 0 <= tok_id < len(self.tokens):
                raise VocabularyError(f"token id {tok_id} outside vocabulary of {len(self.tokens)}")
            parts.append(self.tokens[tok_id])
        return "".join(parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line[:-1] if line.endswith("\n") else line for line in fh]
        return cls(tokens)


@dataclass
class Sample:
    """One QA instance: query, candidate documents, gold answer, safety label."""

    id: str
    query: str
    documents: list[str]
    positive_index: int
    answer: str
    y_safe: int
    turns: list[tuple[str, str]] | None = None

    def __post_init__(self):
        if not self.documents:
            raise ValidationError(f"sample {self.id}: document list is empty")
        if not 0 <= self.positive_index < len(self.documents):
            raise ValidationError(
                f"sample {self.id}: positive_index {self.positive_index} "
                f"outside [0, {len(self.documents)})"
            )
        if self.y_safe not in (0, 1):
            raise ValidationError(f"sample {self.id}: y_safe must be 0 or 1, got {self.y_safe}")
        if (self.answer != "") != (self.y_safe == 0):
            raise ValidationError(
                f"sample {self.id}: answer must be nonempty exactly when y_safe == 0"
            )
        if self.turns is not None:
            self.turns = [tuple(t) for t in self.turns]
            for speaker, _ in self.turns:
                if speaker not in ("USER", "SYSTEM"):
                    raise ValidationError(f"sample {self.id}: unknown speaker {speaker!r}")


@dataclass
class PromptEncoding:
    """Token ids of a rendered prompt plus the recorded context length."""

    ids: list[int]
    t_ctx: int = field(init=False)

    def __post_init__(self):
        self.t_ctx = len(self.ids)


def build_prompt(
    sample: Sample,
    vocab: Vocabulary,
    preamble: str = DEFAULT_PREAMBLE,
    include_documents: bool = True,
) -> PromptEncoding:
    """Render the single-turn template.

    Layout: <BOS> preamble [KNOWLEDGE] d1 <SEP> d2 ... dN [QUESTION] query.
    With include_documents=False (no-retrieval configurations) the knowledge
    segment is omitted entirely. The context length is the full prompt
    length; generation starts at the next position.
    """
    if include_documents and not sample.documents:
        raise ValidationError(f"sample {sample.id}: cannot build prompt with no documents")
    ids = [BOS_ID] + vocab.tokenize(preamble)
    if include_documents:
        ids.append(KNOWLEDGE_ID)
        for i, doc in enumerate(sample.documents):
            if i > 0:
                ids.append(SEP_ID)
            ids.extend(vocab.tokenize(doc))
    ids.append(QUESTION_ID)
    ids.extend(vocab.tokenize(sample.query))
    return PromptEncoding(ids)


def build_multiturn_prompt(
    sample: Sample,
    vocab: Vocabulary,
    preamble: str = DEFAULT_PREAMBLE,
    include_documents: bool = True,
) -> PromptEncoding:
    """Render the dialogue template for samples carrying turns.

    Each turn becomes speaker-marker + utterance; a trailing [SYSTEM] marker
    is the generation cue. Turns must alternate USER/SYSTEM and end on USER.
    """
    if not sample.turns:
        raise ValidationError(f"sample {sample.id}: multiturn prompt requires turns")
    expected = "USER"
    for speaker, _ in sample.turns:
        if speaker != expected:
            raise ValidationError(
                f"sample {sample.id}: turns must alternate USER/SYSTEM, got {speaker!r}"
            )
        expected = "SYSTEM" if expected == "USER" else "USER"
    if sample.turns[-1][0] != "USER":
        raise ValidationError(f"sample {sample.id}: dialogue must end with a USER turn")

    ids = [BOS_ID] + vocab.tokenize(preamble)
    if include_documents:
        ids.append(KNOWLEDGE_ID)
        for i, doc in enumerate(sample.documents):
            if i > 0:
                ids.append(SEP_ID)
            ids.extend(vocab.tokenize(doc))
    for speaker, utterance in sample.turns:
        ids.append(USER_ID if speaker == "USER" else SYSTEM_ID)
        ids.extend(vocab.tokenize(utterance))
    ids.append(SYSTEM_ID)
    return PromptEncoding(ids)


def encode_prompt(
    sample: Sample,
    vocab: Vocabulary,
    preamble: str = DEFAULT_PREAMBLE,
    include_documents: bool = True,
) -> PromptEncoding:
    """Dispatch to the dialogue template when the sample carries turns."""
    if sample.turns:
        return build_multiturn_prompt(sample, vocab, preamble, include_documents)
    return build_prompt(sample, vocab, preamble, include_documents)


# ---------------------------------------------------------------------------
# dataset file format

_FIELDS = ("id", "query", "documents", "positive_index", "answer", "y_safe", "turns")


def write_dataset(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "query": s.query,
                "documents": s.documents,
                "positive_index": s.positive_index,
                "answer": s.answer,
                "y_safe": s.y_safe,
                "turns": [list(t) for t in s.turns] if s.turns is not None else None,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_dataset(path) -> list[Sample]:
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(
                    f"line {line_number}: invalid record ({e.msg})", line_number
                ) from e
            if not isinstance(record, dict) or any(k not in record for k in _FIELDS):
                raise DatasetParseError(
                    f"line {line_number}: record missing required fields", line_number
                )
            try:
                sample = Sample(
                    id=record["id"],
                    query=record["query"],
                    documents=list(record["documents"]),
                    positive_index=record["positive_index"],
                    answer=record["answer"],
                    y_safe=record["y_safe"],
                    turns=[tuple(t) for t in record["turns"]] if record["turns"] else None,
                )
            except (TypeError, ValidationError) as e:
                raise DatasetParseError(f"line {line_number}: {e}", line_number) from e
            if sample.id in seen:
                raise ValidationError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples
