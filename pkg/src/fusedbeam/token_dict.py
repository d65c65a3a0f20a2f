"""Subword token dictionary with ASR-specific special tokens.

The dictionary is the index space for everything the decoder emits: acoustic
score rows, fusion score rows, and hypothesis token sequences all use these ids.
Words are sequences of single-character tokens separated by ``<space>``.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence

from .errors import FormatError

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPACE_TOKEN = "<space>"

# <pad>, <eos>, <unk> are prepended in this order when absent from the token
# file; <space> is appended last when absent. This keeps ids deterministic and
# independent of corpus statistics.
_PREPENDED_SPECIALS = (PAD_TOKEN, EOS_TOKEN, UNK_TOKEN)


class TokenDictionary:
    """Maps subword strings (plus the four specials) to contiguous integer ids."""

    def __init__(self, file_tokens: Sequence[str]):
        seen = set()
        for tok in file_tokens:
            if tok in seen:
                raise FormatError(f"duplicate token {tok!r}")
            seen.add(tok)
        tokens: List[str] = [s for s in _PREPENDED_SPECIALS if s not in seen]
        tokens.extend(file_tokens)
        if SPACE_TOKEN not in seen:
            tokens.append(SPACE_TOKEN)
        self._tokens = tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        self.pad_id = self._index[PAD_TOKEN]
        self.eos_id = self._index[EOS_TOKEN]
        self.unk_id = self._index[UNK_TOKEN]
        self.space_id = self._index[SPACE_TOKEN]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self) -> tuple:
        return self._tokens

    def index(self, token: str) -> int:
        """Strict lookup; raises KeyError for unknown tokens."""
        return self._index[token]

    def index_or_unk(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, index: int) -> str:
        return self._tokens[index]

    def tokenize(self, text: str) -> List[int]:
        """Character-level ids with ``<space>`` between whitespace-separated words.

        Characters missing from the dictionary map to ``<unk>``.
        """
        ids: List[int] = []
        for w, word in enumerate(text.split()):
            if w > 0:
                ids.append(self.space_id)
            ids.extend(self.index_or_unk(ch) for ch in word)
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        """Inverse of tokenize for in-dictionary text; drops <pad>/<eos>."""
        parts: List[str] = []
        for i in ids:
            if i == self.pad_id or i == self.eos_id:
                continue
            parts.append(" " if i == self.space_id else self._tokens[i])
        return "".join(parts)


def load_dictionary(path: str) -> TokenDictionary:
    """Loads a token list: one token per line, optional second field ignored.

    Lines beginning with ``#`` and blank lines are skipped. Duplicate tokens and
    empty files are format errors.
    """
    file_tokens: List[str] = []
    seen = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            token = line.split()[0]
            if token in seen:
                raise FormatError(
                    f"{path}:{lineno}: duplicate token {token!r}"
                    f" (first seen on line {seen[token]})"
                )
            seen[token] = lineno
            file_tokens.append(token)
    if not file_tokens:
        raise FormatError(f"{path}: empty dictionary file")
    return TokenDictionary(file_tokens)
