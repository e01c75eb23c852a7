"""Toy text conditioning: word tokenizer, verb lexicon, learned embeddings.

There is no pretrained language model here — captions are lowercased word
sequences, action tokens are detected by lexicon lookup, and each network owns
a small learned embedding table over the corpus vocabulary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tensor, gather_rows, mean

EMBED_DIM = 64
CONNECTIVES = {"while", "and"}
OOV = "<oov>"

_WORD_RE = re.compile(r"[a-z']+|,")


class PromptError(ValueError):
    """Raised for prompts the composition loop cannot decompose."""


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; commas survive as their own connective token."""
    if not isinstance(text, str):
        raise PromptError("prompt must be a string")
    tokens = _WORD_RE.findall(text.lower())
    if not any(t != "," for t in tokens):
        raise PromptError(f"empty prompt: {text!r}")
    return tokens


def load_lexicon(path) -> frozenset[str]:
    """Plain-text verb lexicon, one surface form per line."""
    words = [w.strip().lower() for w in Path(path).read_text().splitlines()]
    lex = frozenset(w for w in words if w)
    if not lex:
        raise ValueError(f"{path}: empty verb lexicon")
    return lex


@dataclass(frozen=True)
class Prompt:
    """Tokenized prompt with detected action tokens and their sub-prompts.

    ``action_indices[i]`` is the token position of action token c_i and
    ``sub_prompts[i]`` is the token span (connectives excluded) describing it.
    """

    text: str
    tokens: tuple[str, ...]
    action_indices: tuple[int, ...]
    sub_prompts: tuple[tuple[str, ...], ...]

    @property
    def action_tokens(self) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in self.action_indices)


def parse_prompt(
    text: str,
    lexicon: frozenset[str],
    action_indices_override: tuple[int, ...] | None = None,
) -> Prompt:
    """Tokenize, detect action tokens, and split sub-prompts at connectives.

    Raises PromptError when no action token is found (or an override points
    outside the token list).
    """
    raw = tokenize(text)
    # Connective positions partition the word tokens into spans.
    spans: list[list[tuple[int, str]]] = [[]]
    words: list[str] = []
    for tok in raw:
        if tok == "," or tok in CONNECTIVES:
            if tok != ",":
                words.append(tok)
            if spans[-1]:
                spans.append([])
            continue
        words.append(tok)
        spans[-1].append((len(words) - 1, tok))
    tokens = tuple(words)

    if action_indices_override is not None:
        action_indices = tuple(int(i) for i in action_indices_override)
        for i in action_indices:
            if not 0 <= i < len(tokens):
                raise PromptError(
                    f"action index {i} outside token range 0..{len(tokens) - 1}"
                )
    else:
        action_indices = tuple(i for i, t in enumerate(tokens) if t in lexicon)
    if not action_indices:
        raise PromptError(f"no action token found in {text!r}")

    span_of: dict[int, tuple[str, ...]] = {}
    for span in spans:
        body = tuple(t for _, t in span)
        for idx, _ in span:
            span_of[idx] = body
    sub_prompts = tuple(
        span_of.get(i, (tokens[i],)) for i in action_indices
    )
    return Prompt(
        text=text, tokens=tokens, action_indices=action_indices, sub_prompts=sub_prompts
    )


@dataclass
class TextFeatures:
    """Per-token embedding rows plus their mean pooling."""

    tokens: tuple[str, ...]
    rows: Tensor      # [tokens, EMBED_DIM]
    pooled: Tensor    # [EMBED_DIM]


class Vocabulary:
    """Word -> row index map with a shared out-of-vocabulary slot."""

    def __init__(self, words: list[str]):
        uniq = sorted(set(w.lower() for w in words))
        self.words = [OOV] + uniq
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def encode(self, tokens) -> np.ndarray:
        return np.asarray([self.index.get(t, 0) for t in tokens], dtype=np.int64)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(list(words))


class TextEmbedding:
    """Learned embedding table over a vocabulary."""

    def __init__(self, vocab: Vocabulary, rng: np.random.Generator, dim: int = EMBED_DIM):
        self.vocab = vocab
        self.dim = dim
        self.table = Parameter(
            (rng.standard_normal((len(vocab), dim)) * 0.1).astype(np.float32),
            name="text.table",
        )

    def params(self) -> dict[str, Parameter]:
        return {"text.table": self.table}

    def embed(self, tokens) -> TextFeatures:
        """Look up rows for a token sequence (a permutation of tokens permutes
        the rows); pooled = mean over tokens."""
        tokens = tuple(tokens)
        if not tokens:
            raise PromptError("cannot embed an empty token sequence")
        idx = self.vocab.encode(tokens)
        rows = gather_rows(self.table, idx)
        return TextFeatures(tokens=tokens, rows=rows, pooled=mean(rows, axis=0))

    def embed_batch(self, token_seqs) -> tuple[Tensor, Tensor]:
        """Embed same-length token sequences: rows [B, T, dim], pooled [B, dim]."""
        lengths = {len(t) for t in token_seqs}
        if len(lengths) != 1:
            raise ValueError(f"batched token sequences must share a length, got {lengths}")
        idx = np.stack([self.vocab.encode(t) for t in token_seqs])
        b, t = idx.shape
        rows = gather_rows(self.table, idx.reshape(-1)).reshape(b, t, self.dim)
        return rows, mean(rows, axis=1)
