"""Character-level providers that score one subword token at a time.

These back the plain subword fusion mode and the character half of the
multi-level mode. A provider owns an opaque per-hypothesis state; ``log_probs``
returns a natural-log row over the full token dictionary (``<pad>`` floored,
everything else a proper distribution).
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Tuple

import numpy as np

from .token_dict import TokenDictionary, EOS_TOKEN
from .word_lm import BackoffNgram, END_WORD, START_WORD, load_arpa_model

SCORE_FLOOR = -30.0


class CharLM:
    """Common surface: start() -> state, log_probs(state), advance(state, token)."""

    def start(self):
        raise NotImplementedError

    def log_probs(self, state) -> np.ndarray:
        raise NotImplementedError

    def advance(self, state, token_id: int):
        raise NotImplementedError


class UniformCharLM(CharLM):
    """Uniform over every non-pad token; history-free."""

    def __init__(self, token_dict: TokenDictionary):
        self.dict_size = len(token_dict)
        row = np.full(self.dict_size, math.log(1.0 / (self.dict_size - 1)))
        row[token_dict.pad_id] = SCORE_FLOOR
        row.setflags(write=False)
        self._row = row

    def start(self):
        return ()

    def log_probs(self, state) -> np.ndarray:
        return self._row

    def advance(self, state, token_id: int):
        return ()


class NgramCharLM(CharLM):
    """Back-off n-gram over token strings; ``<eos>`` maps to the ARPA ``</s>``."""

    def __init__(self, model: BackoffNgram, token_dict: TokenDictionary):
        self.model = model
        self.dict_size = len(token_dict)
        self._pad_id = token_dict.pad_id
        # Token strings as the n-gram symbols; the eos token queries </s>.
        self._symbols: Tuple[str, ...] = tuple(
            END_WORD if tok == EOS_TOKEN else tok for tok in token_dict.tokens
        )
        self._row_cache = lru_cache(maxsize=4096)(self._row_uncached)

    @classmethod
    def from_file(cls, path: str, token_dict: TokenDictionary) -> "NgramCharLM":
        return cls(load_arpa_model(path), token_dict)

    def start(self) -> Tuple[str, ...]:
        if self.model.order <= 1:
            return ()
        return (START_WORD,)

    def log_probs(self, state) -> np.ndarray:
        return self._row_cache(tuple(state))

    def _row_uncached(self, state: Tuple[str, ...]) -> np.ndarray:
        probs = np.fromiter(
            (self.model.word_prob(state, sym) for sym in self._symbols),
            dtype=np.float64, count=self.dict_size)
        probs[self._pad_id] = 0.0
        total = probs.sum()
        with np.errstate(divide="ignore"):
            row = np.log(probs / total)
        row[row < SCORE_FLOOR] = SCORE_FLOOR
        row.setflags(write=False)
        return row

    def advance(self, state, token_id: int) -> Tuple[str, ...]:
        if self.model.order <= 1:
            return ()
        symbol = self._symbols[token_id]
        return (tuple(state) + (symbol,))[-(self.model.order - 1):]
