"""Word-probability providers for fusion: ARPA back-off n-grams and explicit tables.

Both providers expose the same surface: an opaque history handle (a tuple of
word strings), a full probability distribution over the closed vocabulary in
rank order (renormalized to sum to 1), and a separate end-of-sentence log
probability. Only relative mass inside the vocabulary matters to the look-ahead
ratios, which is what makes the renormalization safe.
"""

from __future__ import annotations

import math
import re
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError

START_WORD = "<s>"
END_WORD = "</s>"
UNK_WORD = "<unk>"

# extend_history() accepts this pseudo-rank to close an out-of-vocabulary word.
UNK_RANK = -1

# Mass assigned when a model has no <unk>/</s> entry to fall back on.
_PROB_FLOOR = 1e-12

History = Tuple[str, ...]


class BackoffNgram:
    """Raw back-off n-gram tables parsed from an ARPA file (order <= 3)."""

    def __init__(self, order: int,
                 logprob: Dict[Tuple[str, ...], float],
                 backoff: Dict[Tuple[str, ...], float]):
        self.order = order
        self.logprob = logprob
        self.backoff = backoff

    def has_unigram(self, word: str) -> bool:
        return (word,) in self.logprob

    def word_prob(self, context: Tuple[str, ...], word: str,
                  fallback: float = _PROB_FLOOR) -> float:
        """Back-off probability P(word | context); linear domain.

        ``fallback`` is the unigram-level probability used for words absent
        from the unigram section.
        """
        context = context[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(context, word, fallback)

    def _prob(self, context: Tuple[str, ...], word: str, fallback: float) -> float:
        ngram = context + (word,)
        lp = self.logprob.get(ngram)
        if lp is not None:
            return 10.0 ** lp
        if context:
            bow = self.backoff.get(context, 0.0)
            return (10.0 ** bow) * self._prob(context[1:], word, fallback)
        return fallback


_NGRAM_COUNT_RE = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_RE = re.compile(r"^\\(\d+)-grams:$")


def load_arpa_model(path: str) -> BackoffNgram:
    """Parses an ARPA file (log10 probabilities, optional back-off weights)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    declared: Dict[int, int] = {}
    logprob: Dict[Tuple[str, ...], float] = {}
    backoff: Dict[Tuple[str, ...], float] = {}
    counts: Dict[int, int] = {}
    section: Optional[int] = None
    in_data = False
    saw_data = False
    saw_end = False

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "\\data\\":
            in_data = True
            saw_data = True
            continue
        if line == "\\end\\":
            saw_end = True
            section = None
            in_data = False
            continue
        m = _SECTION_RE.match(line)
        if m:
            n = int(m.group(1))
            if n not in declared:
                raise FormatError(f"{path}:{lineno}: section \\{n}-grams: not declared")
            section = n
            in_data = False
            continue
        if in_data:
            m = _NGRAM_COUNT_RE.match(line)
            if not m:
                raise FormatError(f"{path}:{lineno}: bad count line {line!r}")
            n, count = int(m.group(1)), int(m.group(2))
            if n > 3:
                raise FormatError(
                    f"{path}:{lineno}: order-{n} n-grams not supported (max 3)"
                )
            declared[n] = count
            continue
        if section is None:
            raise FormatError(f"{path}:{lineno}: entry outside any n-gram section")
        fields = line.split()
        if len(fields) < 1 + section:
            raise FormatError(
                f"{path}:{lineno}: expected logprob plus {section} words"
            )
        try:
            lp = float(fields[0])
        except ValueError:
            raise FormatError(
                f"{path}:{lineno}: non-numeric log probability {fields[0]!r}"
            ) from None
        ngram = tuple(fields[1:1 + section])
        if ngram in logprob:
            raise FormatError(f"{path}:{lineno}: duplicate n-gram {' '.join(ngram)!r}")
        logprob[ngram] = lp
        if len(fields) > 1 + section:
            try:
                backoff[ngram] = float(fields[1 + section])
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: non-numeric back-off weight"
                    f" {fields[1 + section]!r}"
                ) from None
        counts[section] = counts.get(section, 0) + 1

    if not saw_data:
        raise FormatError(f"{path}: missing \\data\\ section")
    if not saw_end:
        raise FormatError(f"{path}: missing \\end\\ marker")
    if not declared:
        raise FormatError(f"{path}: no n-gram orders declared")
    for n, declared_count in declared.items():
        actual = counts.get(n, 0)
        if actual != declared_count:
            raise FormatError(
                f"{path}: declared ngram {n}={declared_count} but found {actual}"
            )
    return BackoffNgram(max(declared), logprob, backoff)


class WordLM:
    """Common surface of the word-probability providers."""

    def __init__(self, vocab: Sequence[str]):
        if not vocab:
            raise FormatError("empty word vocabulary")
        self.vocab: Tuple[str, ...] = tuple(vocab)
        self.vocab_size = len(self.vocab)

    def start_history(self) -> History:
        raise NotImplementedError

    def extend_history(self, history: History, word_rank: int) -> History:
        raise NotImplementedError

    def full_distribution(self, history: History) -> np.ndarray:
        raise NotImplementedError

    def eos_log_prob(self, history: History) -> float:
        raise NotImplementedError

    def _word_of_rank(self, word_rank: int) -> str:
        if word_rank == UNK_RANK:
            return UNK_WORD
        if not 0 <= word_rank < self.vocab_size:
            raise ValueError(f"word rank {word_rank} out of range")
        return self.vocab[word_rank]


class ArpaLM(WordLM):
    """Back-off n-gram provider over a closed vocabulary in rank order."""

    def __init__(self, model: BackoffNgram, vocab: Sequence[str]):
        super().__init__(vocab)
        self.model = model
        missing = [w for w in self.vocab if not model.has_unigram(w)]
        if missing:
            unk_lp = model.logprob.get((UNK_WORD,))
            unk_mass = 10.0 ** unk_lp if unk_lp is not None else _PROB_FLOOR
            self._fallback = unk_mass / len(missing)
        else:
            self._fallback = _PROB_FLOOR
        self._dist_cache = lru_cache(maxsize=4096)(self._distribution_uncached)
        self._eos_cache = lru_cache(maxsize=4096)(self._eos_uncached)

    def start_history(self) -> History:
        if self.model.order <= 1:
            return ()
        return (START_WORD,)

    def extend_history(self, history: History, word_rank: int) -> History:
        word = self._word_of_rank(word_rank)
        if self.model.order <= 1:
            return ()
        return (history + (word,))[-(self.model.order - 1):]

    def full_distribution(self, history: History) -> np.ndarray:
        return self._dist_cache(tuple(history))

    def _distribution_uncached(self, history: History) -> np.ndarray:
        probs = np.fromiter(
            (self.model.word_prob(history, w, self._fallback) for w in self.vocab),
            dtype=np.float64, count=self.vocab_size)
        total = probs.sum()
        out = probs / total
        out.setflags(write=False)
        return out

    def eos_log_prob(self, history: History) -> float:
        return self._eos_cache(tuple(history))

    def _eos_uncached(self, history: History) -> float:
        return math.log(self.model.word_prob(history, END_WORD, _PROB_FLOOR))


def load_arpa(path: str, vocab: Sequence[str]) -> ArpaLM:
    return ArpaLM(load_arpa_model(path), vocab)


class TableLM(WordLM):
    """Explicit per-history probability rows; unseen histories are uniform."""

    def __init__(self, vocab: Sequence[str],
                 rows: Optional[Mapping[History, Sequence[float]]] = None,
                 eos: Optional[Mapping[History, float]] = None):
        super().__init__(vocab)
        self._rows: Dict[History, np.ndarray] = {}
        for history, row in (rows or {}).items():
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (self.vocab_size,):
                raise FormatError(
                    f"history {history!r}: row length {arr.size}"
                    f" does not match vocabulary size {self.vocab_size}"
                )
            if (arr < 0).any():
                raise FormatError(f"history {history!r}: negative probability")
            self._rows[tuple(history)] = arr
        self._eos = {tuple(h): float(p) for h, p in (eos or {}).items()}
        self._default_eos = 1.0 / (self.vocab_size + 1)
        self._uniform = np.full(self.vocab_size, 1.0 / self.vocab_size)
        self._uniform.setflags(write=False)
        self._dist_cache: Dict[History, np.ndarray] = {}

    @classmethod
    def from_file(cls, path: str, vocab: Sequence[str]) -> "TableLM":
        """TSV rows ``history-words<TAB>word<TAB>prob`` with ``-`` for no history."""
        ranks = {w: r for r, w in enumerate(vocab)}
        rows: Dict[History, np.ndarray] = {}
        eos: Dict[History, float] = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise FormatError(
                        f"{path}:{lineno}: expected 3 tab-separated fields"
                    )
                hist_text, word, prob_text = fields
                history: History = ()
                if hist_text.strip() != "-":
                    history = tuple(hist_text.split())
                try:
                    prob = float(prob_text)
                except ValueError:
                    raise FormatError(
                        f"{path}:{lineno}: non-numeric probability {prob_text!r}"
                    ) from None
                if prob < 0:
                    raise FormatError(f"{path}:{lineno}: negative probability")
                if word == END_WORD:
                    eos[history] = prob
                    continue
                rank = ranks.get(word)
                if rank is None:
                    raise FormatError(
                        f"{path}:{lineno}: word {word!r} not in the vocabulary"
                    )
                rows.setdefault(history, np.zeros(len(vocab)))[rank] = prob
        return cls(vocab, rows, eos)

    def start_history(self) -> History:
        return ()

    def extend_history(self, history: History, word_rank: int) -> History:
        return tuple(history) + (self._word_of_rank(word_rank),)

    def full_distribution(self, history: History) -> np.ndarray:
        history = tuple(history)
        cached = self._dist_cache.get(history)
        if cached is not None:
            return cached
        row = self._rows.get(history)
        if row is None:
            out = self._uniform
        else:
            total = row.sum()
            if total <= 0.0:
                out = self._uniform
            else:
                out = row / total
                out.setflags(write=False)
        self._dist_cache[history] = out
        return out

    def eos_log_prob(self, history: History) -> float:
        prob = self._eos.get(tuple(history), self._default_eos)
        return math.log(max(prob, _PROB_FLOOR))
