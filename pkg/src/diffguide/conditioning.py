"""Prompt construction, text encoding, and word-level alignment.

Prompts are treated at word granularity: whitespace splits, punctuation
stays attached to the preceding word.  Encoders report, for every word,
the contiguous token range it occupies so attention maps can be edited
per word even when tokenization splits words apart.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import torch


class PromptError(ValueError):
    """Raised for malformed prompts or ambiguous class-name edits."""


@dataclass
class ConditioningMatrix:
    """Text-encoder output: one row per token, plus word-span bookkeeping.

    ``token_spans`` maps the index of each word in the source prompt to the
    half-open token range [start, end) it was encoded into.  Token positions
    outside every span are special tokens (sequence markers, padding).
    """

    values: torch.Tensor
    token_spans: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return int(self.values.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.values.shape[1])

    def clone_detached(self) -> "ConditioningMatrix":
        return ConditioningMatrix(self.values.detach().clone(), dict(self.token_spans))

    def word_vector(self, word_index: int) -> torch.Tensor:
        """Mean of the token embeddings belonging to one word."""
        start, end = self.token_spans[word_index]
        return self.values[start:end].mean(dim=0)


@dataclass
class PromptPair:
    """A prompt and its class-name-swapped counterpart."""

    source_prompt: str
    target_prompt: str
    source_class_words: list[int]
    target_class_words: list[int]


class TextEncoderInterface(ABC):
    """Deterministic prompt -> matrix encoder."""

    token_count: int
    feature_dim: int

    @abstractmethod
    def encode(self, prompt: str) -> ConditioningMatrix:
        ...

    def null_text(self) -> ConditioningMatrix:
        return self.encode("")


class CaptionExtenderInterface(ABC):
    """Adds a scene description after a generic class prompt.

    Implementations must return a caption that begins with the generic
    prompt verbatim, so the class name always survives extension.
    """

    @abstractmethod
    def extend(self, image, generic_prompt: str) -> str:
        ...


_TEMPLATES = {
    "generation": "a photograph of a {name}",
    "uvce": "an image of a {name}",
}


def build_generic_prompt(classname: str, task: str) -> str:
    """Fill the per-task prompt template with a class name, verbatim."""
    if not classname or not classname.strip():
        raise PromptError("class name must be non-empty")
    if task not in _TEMPLATES:
        raise PromptError(f"unknown task {task!r}; expected one of {sorted(_TEMPLATES)}")
    return _TEMPLATES[task].format(name=classname)


def _find_word_span(words: list[str], target_words: list[str]) -> list[int]:
    hits = []
    n = len(target_words)
    for i in range(len(words) - n + 1):
        if words[i : i + n] == target_words:
            hits.append(list(range(i, i + n)))
    if len(hits) != 1:
        raise PromptError(
            f"class name {' '.join(target_words)!r} occurs {len(hits)} times as a word "
            "sequence; need exactly one for an unambiguous edit"
        )
    return hits[0]


def swap_classname(prompt: str, old: str, new: str) -> PromptPair:
    """Replace the single occurrence of ``old`` by ``new`` in a prompt."""
    if not old or not new:
        raise PromptError("class names must be non-empty")
    count = prompt.count(old)
    if count != 1:
        raise PromptError(f"{old!r} occurs {count} times in {prompt!r}; need exactly one")
    target_prompt = prompt.replace(old, new)
    src_span = _find_word_span(prompt.split(), old.split())
    tgt_span = _find_word_span(target_prompt.split(), new.split())
    return PromptPair(prompt, target_prompt, src_span, tgt_span)


def extend_caption(extender: CaptionExtenderInterface, image, generic: str) -> str:
    """Run a caption extender and enforce the verbatim-prefix contract."""
    caption = extender.extend(image, generic)
    if not caption.startswith(generic):
        raise PromptError(
            f"caption extender violated the prefix contract: {caption!r} does not "
            f"start with {generic!r}"
        )
    return caption


def _word_embedding(encoder: TextEncoderInterface, word: str) -> torch.Tensor:
    mat = encoder.encode(word)
    if not mat.token_spans:
        raise PromptError(f"encoder produced no word span for {word!r}")
    return mat.word_vector(min(mat.token_spans))


def word_alignment(
    encoder: TextEncoderInterface,
    old_words: list[str],
    new_words: list[str],
    temperature: float = 0.1,
) -> torch.Tensor:
    """Row-stochastic map from new words onto old words by embedding similarity.

    Entry (i, j) is the softmax over cosine similarities between new word i
    and every old word, taken at the given temperature.  Rows sum to one, so
    the matrix can redistribute stored attention columns by weighted
    averaging.
    """
    if not old_words or not new_words:
        raise PromptError("word lists must be non-empty")
    old_vecs = torch.stack([_word_embedding(encoder, w) for w in old_words])
    new_vecs = torch.stack([_word_embedding(encoder, w) for w in new_words])
    for name, vecs in (("old", old_vecs), ("new", new_vecs)):
        norms = vecs.norm(dim=1)
        if bool((norms == 0).any()):
            raise PromptError(f"zero-norm embedding among {name} words")
    old_unit = old_vecs / old_vecs.norm(dim=1, keepdim=True)
    new_unit = new_vecs / new_vecs.norm(dim=1, keepdim=True)
    cos = new_unit @ old_unit.T
    return torch.softmax(cos / temperature, dim=1)


def expand_alignment_to_tokens(
    word_weights: torch.Tensor,
    new_spans: dict[int, tuple[int, int]],
    old_spans: dict[int, tuple[int, int]],
    num_tokens: int,
) -> torch.Tensor:
    """Lift word-to-word weights onto token positions.

    Each word's weight is split equally among the tokens of the old word it
    maps from; token positions outside every span (special tokens) map to
    themselves.  The result stays row-stochastic.
    """
    new_order = sorted(new_spans)
    old_order = sorted(old_spans)
    if word_weights.shape != (len(new_order), len(old_order)):
        raise ValueError(
            f"weight matrix {tuple(word_weights.shape)} does not match spans "
            f"({len(new_order)} new x {len(old_order)} old words)"
        )
    A = torch.zeros(num_tokens, num_tokens, dtype=word_weights.dtype)
    covered = set()
    for i, wi in enumerate(new_order):
        ns, ne = new_spans[wi]
        for p in range(ns, ne):
            covered.add(p)
            for j, wj in enumerate(old_order):
                os_, oe = old_spans[wj]
                A[p, os_:oe] = word_weights[i, j] / (oe - os_)
    for p in range(num_tokens):
        if p not in covered:
            A[p, p] = 1.0
    return A
