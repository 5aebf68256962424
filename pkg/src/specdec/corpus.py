"""Synthetic training corpus: a seeded probabilistic grammar over bytes.

The grammar mixes near-deterministic stretches (inside words) with genuine
branch points (word choices), so a trained model has both easy positions
and real sampling uncertainty.  Some sentences repeat their subject noun
in a second clause, giving the data a longer-range dependency that rewards
context-bearing features over raw tokens.

Corpus files are JSON lines: each line either {"tokens": [ints]} or
{"text": "..."} (byte-level tokenization is applied to text).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

BYTE_VOCAB = 256

_NOUNS = ["fox", "crow", "otter", "heron", "lynx", "mole", "wren", "hare"]
_VERBS = ["watches", "follows", "circles", "skirts", "crosses"]
_VERBS2 = ["rests", "waits", "hides", "calls"]
_ADJS = ["quiet", "silver", "distant", "narrow", "cold"]
_PLACES = ["river", "meadow", "harbor", "ridge", "orchard", "marsh"]


def encode_text(text: str) -> list[int]:
    """Byte-level tokenization: UTF-8 bytes as token ids 0..255."""
    return list(text.encode("utf-8"))


def decode_tokens(tokens: list[int]) -> str:
    return bytes(int(t) & 0xFF for t in tokens).decode("utf-8", errors="replace")


@dataclass(eq=False)
class Corpus:
    sequences: list[list[int]]
    source: str = ""
    tokenizer: str = "byte"

    def __post_init__(self):
        if not self.sequences:
            raise ValidationError(f"empty corpus ({self.source or 'unnamed'})")

    @property
    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def _sentence(rng: np.random.Generator) -> str:
    noun = _NOUNS[rng.integers(len(_NOUNS))]
    verb = _VERBS[rng.integers(len(_VERBS))]
    place = _PLACES[rng.integers(len(_PLACES))]
    parts = [f"the {noun} {verb} the "]
    if rng.random() < 0.5:
        parts.append(f"{_ADJS[rng.integers(len(_ADJS))]} ")
    parts.append(place)
    roll = rng.random()
    if roll < 0.35:
        # Second clause reuses the subject noun: a long-range copy.
        parts.append(f", and the {noun} {_VERBS2[rng.integers(len(_VERBS2))]} there")
    elif roll < 0.5:
        parts.append(" at dusk")
    parts.append(". ")
    return "".join(parts)


def make_corpus(seed: int, size_tokens: int, doc_sentences: tuple[int, int] = (2, 5)) -> Corpus:
    """Generate at least ``size_tokens`` tokens of grammar text, one document
    (a few sentences) per sequence.  Deterministic per seed."""
    if size_tokens < 1:
        raise ValidationError("size_tokens must be >= 1")
    rng = np.random.default_rng(seed)
    sequences: list[list[int]] = []
    total = 0
    while total < size_tokens:
        n = int(rng.integers(doc_sentences[0], doc_sentences[1] + 1))
        doc = "".join(_sentence(rng) for _ in range(n)).rstrip()
        toks = encode_text(doc)
        sequences.append(toks)
        total += len(toks)
    return Corpus(sequences, source=f"grammar(seed={seed})")


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in corpus.sequences:
            fh.write(json.dumps({"tokens": seq}) + "\n")


def ingest_corpus(path, vocab_size: int = BYTE_VOCAB) -> Corpus:
    """Load and validate a JSONL corpus; deterministic order.

    Raises with the offending line number on malformed lines, and rejects
    token ids outside the vocabulary.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    sequences: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected an object")
            if "tokens" in obj:
                toks = obj["tokens"]
                if not isinstance(toks, list) or not toks:
                    raise ValidationError(f"{path}:{lineno}: 'tokens' must be a non-empty list")
                toks = [int(t) for t in toks]
            elif "text" in obj:
                toks = encode_text(str(obj["text"]))
                if not toks:
                    raise ValidationError(f"{path}:{lineno}: 'text' is empty")
            else:
                raise ValidationError(f"{path}:{lineno}: need a 'tokens' or 'text' key")
            bad = [t for t in toks if t < 0 or t >= vocab_size]
            if bad:
                raise ValidationError(
                    f"{path}:{lineno}: token {bad[0]} outside vocabulary [0, {vocab_size})"
                )
            sequences.append(toks)
    if not sequences:
        raise ValidationError(f"{path}: empty corpus")
    return Corpus(sequences, source=str(path))
