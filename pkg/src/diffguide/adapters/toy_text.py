"""Hash-seeded text encoder for the desk-scale stack.

Every token gets a fixed random embedding derived from a keyed hash of its
text, plus a fixed positional component.  No training, no vocabulary: the
same string always encodes to the same matrix, which is all the guidance
machinery needs.
"""

from __future__ import annotations

import hashlib

import torch

from ..conditioning import ConditioningMatrix, PromptError, TextEncoderInterface

_BOS = "<s>"
_EOS = "</s>"
_PAD = "<pad>"
_CHUNK = 4


def _split_tokens(word: str) -> list[str]:
    return [word[i : i + _CHUNK] for i in range(0, len(word), _CHUNK)]


class ToyTextEncoder(TextEncoderInterface):
    """Deterministic prompt encoder with word-span bookkeeping.

    Words are lowercased, split on whitespace, and chopped into 4-character
    tokens; sequences are padded to a fixed token count so every prompt
    yields the same matrix shape.
    """

    def __init__(self, seed: int = 0, token_count: int = 24, feature_dim: int = 48):
        self.seed = seed
        self.token_count = token_count
        self.feature_dim = feature_dim
        self._cache: dict[str, torch.Tensor] = {}
        self._positions = self._rand_matrix("<positions>", token_count) * 0.3

    def _rand_matrix(self, text: str, rows: int) -> torch.Tensor:
        digest = hashlib.blake2b(
            text.encode("utf-8"), key=str(self.seed).encode("utf-8"), digest_size=8
        ).digest()
        gen = torch.Generator().manual_seed(int.from_bytes(digest, "big") % (2**63))
        return torch.randn(rows, self.feature_dim, generator=gen)

    def _token_vector(self, token: str) -> torch.Tensor:
        if token not in self._cache:
            self._cache[token] = self._rand_matrix("tok:" + token, 1)[0]
        return self._cache[token]

    def encode(self, prompt: str) -> ConditioningMatrix:
        words = prompt.lower().split()
        tokens = [_BOS]
        spans: dict[int, tuple[int, int]] = {}
        for i, word in enumerate(words):
            pieces = _split_tokens(word)
            spans[i] = (len(tokens), len(tokens) + len(pieces))
            tokens.extend(pieces)
        tokens.append(_EOS)
        if len(tokens) > self.token_count:
            raise PromptError(
                f"prompt needs {len(tokens)} tokens but the encoder is fixed at "
                f"{self.token_count}: {prompt!r}"
            )
        tokens.extend([_PAD] * (self.token_count - len(tokens)))
        values = torch.stack([self._token_vector(tok) for tok in tokens]) + self._positions
        return ConditioningMatrix(values, spans)
