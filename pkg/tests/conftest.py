"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the package's vectorized code paths:
look-ahead probabilities come from direct summation over the vocabulary,
edit distance from a plain DP table, and decoding from exhaustive
enumeration of all token sequences. Tests compare the fast implementations
against these slow references.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pytest

from fusedbeam.decoder import DecodeConfig, _TraceTable
from fusedbeam.fusion import LookaheadBatch, LookaheadFusion
from fusedbeam.lexicon_trie import PrefixTreeAutomaton, build_trie
from fusedbeam.token_dict import TokenDictionary
from fusedbeam.word_lm import TableLM


# ---------------------------------------------------------------------------
# Small fixed vocabulary used by most hand-computed examples.

@pytest.fixture
def char_dict() -> TokenDictionary:
    return TokenDictionary(["e", "h", "i", "r", "s"])


@pytest.fixture
def three_words() -> List[str]:
    return ["her", "here", "his"]


@pytest.fixture
def three_word_trie(three_words, char_dict) -> PrefixTreeAutomaton:
    return build_trie(three_words, char_dict)


def uniform_table_lm(vocab_ranked: Sequence[str]) -> TableLM:
    """Uniform word LM in rank order (empty table falls back to uniform)."""
    return TableLM(vocab=tuple(vocab_ranked), rows={}, eos={})


# ---------------------------------------------------------------------------
# Random corpus generators.

_LETTERS = "abcdefghij"


def random_vocab(rng: np.random.Generator, max_words: int = 200,
                 alphabet: int = 10, max_len: int = 6) -> Tuple[List[str], List[str]]:
    """Returns (alphabet letters, unique words) for a random lexicon."""
    letters = list(_LETTERS[:alphabet])
    # Small alphabets cannot supply max_words distinct words of bounded
    # length; cap the target so the sampling loop always terminates.
    distinct = sum(alphabet ** k for k in range(1, max_len + 1))
    n_words = int(rng.integers(2, min(max_words, distinct) + 1))
    words = set()
    while len(words) < n_words:
        length = int(rng.integers(1, max_len + 1))
        words.add("".join(rng.choice(letters, size=length)))
    return letters, sorted(words)


def random_distribution(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


def make_lookahead(rng: np.random.Generator, max_words: int = 200,
                   alphabet: int = 10):
    """Random (dict, trie, lm, fusion) with a random start-history row."""
    letters, words = random_vocab(rng, max_words, alphabet)
    token_dict = TokenDictionary(letters)
    trie = build_trie(words, token_dict)
    ranked = trie.words(token_dict)
    lm = TableLM(vocab=tuple(ranked),
                 rows={(): random_distribution(rng, len(ranked))}, eos={})
    fusion = LookaheadFusion(trie, lm, token_dict)
    return token_dict, trie, ranked, lm, fusion


def state_at_prefixes(fusion: LookaheadFusion, token_dict: TokenDictionary,
                      prefixes: Sequence[str],
                      histories: Optional[Sequence[tuple]] = None
                      ) -> LookaheadBatch:
    """Builds a batch positioned at the given in-lexicon prefixes."""
    trie = fusion.trie
    states = [trie.state_of_prefix([token_dict.index(c) for c in p])
              for p in prefixes]
    if histories is None:
        histories = [fusion.word_lm.start_history()] * len(prefixes)
    g = np.stack([np.cumsum(fusion.word_lm.full_distribution(h))
                  for h in histories])
    return LookaheadBatch(trie_states=np.asarray(states, dtype=np.int64),
                          histories=list(histories), g=g)


# ---------------------------------------------------------------------------
# Brute-force look-ahead oracle: direct summation over the vocabulary.

def prefix_mass(ranked_words: Sequence[str], probs: np.ndarray,
                prefix: str) -> float:
    return float(sum(p for w, p in zip(ranked_words, probs)
                     if w.startswith(prefix)))


def brute_char_prob(ranked_words: Sequence[str], probs: np.ndarray,
                    prefix: str, char: str) -> float:
    num = prefix_mass(ranked_words, probs, prefix + char)
    den = prefix_mass(ranked_words, probs, prefix)
    return num / den


def brute_word_end(ranked_words: Sequence[str], probs: np.ndarray,
                   prefix: str) -> float:
    word_p = float(probs[list(ranked_words).index(prefix)])
    return word_p / prefix_mass(ranked_words, probs, prefix)


def trie_continuations(trie: PrefixTreeAutomaton, token_dict: TokenDictionary,
                       prefix: str) -> List[str]:
    state = trie.state_of_prefix([token_dict.index(c) for c in prefix])
    labels = trie.edge_labels[state]
    return [token_dict.token(int(c)) for c in labels if c >= 0]


# ---------------------------------------------------------------------------
# Edit-distance oracle: distance only, no backtrace to share with align().

def oracle_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    m, n = len(ref), len(hyp)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[n]


# ---------------------------------------------------------------------------
# Exhaustive decoding oracle: enumerates every token sequence.

def exhaustive_decode(table: _TraceTable, token_dict: TokenDictionary,
                      config: DecodeConfig, fusion=None):
    """Best (tokens, total) over all sequences, mirroring decoder scoring.

    Enumerates every non-pad token sequence up to the length bound, applying
    the same end-of-sentence gate, coverage bonus, and tie-break key as the
    beam decoder, and picks the best finished hypothesis (falling back to the
    best full-length unfinished one).
    """
    eos_id, pad_id = token_dict.eos_id, token_dict.pad_id
    vocab = len(token_dict)
    max_len = max(1, int(math.floor(config.max_len_ratio * table.t_enc)))
    cov_on = config.coverage_mode != "off"
    finished: List[Tuple[float, int, Tuple[int, ...]]] = []
    live: List[Tuple[float, int, Tuple[int, ...]]] = []

    def row_for(prefix):
        row = table.rows.get(prefix)
        return row if row is not None else table.default

    def rec(prefix: Tuple[int, ...], base: float, accum: np.ndarray, fstate):
        logp, attn = row_for(prefix)
        frow = fusion.char_scores(fstate)[0] if fusion is not None else None
        gate_max = float(logp.max())
        for tok in range(vocab):
            if tok == pad_id:
                continue
            if (tok == eos_id and config.eos_gamma is not None
                    and logp[eos_id] <= config.eos_gamma * gate_max):
                continue
            step = float(logp[tok])
            if frow is not None:
                step = step + config.lm_weight * frow[tok]
            new_base = base + step
            new_accum = accum + attn
            total = new_base
            if cov_on:
                total = new_base + config.coverage_weight \
                    * config.coverage(new_accum)
            seq = prefix + (tok,)
            if tok == eos_id:
                finished.append((total, len(seq), seq))
            elif len(seq) >= max_len:
                live.append((total, len(seq), seq))
            else:
                child = (fusion.advance(fstate, np.array([tok]))
                         if fusion is not None else None)
                rec(seq, new_base, new_accum, child)

    t_enc = table.t_enc
    start_state = fusion.start(1) if fusion is not None else None
    rec((), 0.0, np.zeros(t_enc), start_state)
    pool = finished if finished else live
    assert pool, "oracle found no hypotheses"
    total, _, seq = min(pool, key=lambda e: (-e[0], e[1], e[2]))
    tokens = list(seq)
    if tokens and tokens[-1] == eos_id:
        tokens.pop()
    return tokens, total, bool(finished)


# ---------------------------------------------------------------------------
# Random trace-table generator for decoder tests.

def random_trace_table(rng: np.random.Generator, token_dict: TokenDictionary,
                       utt_id: str, t_enc: int, depth: int = 2,
                       quantized: bool = False) -> _TraceTable:
    """Random acoustic table: explicit rows for short prefixes plus a default.

    ``quantized`` draws probabilities from a tiny value set so exact score
    ties happen often, exercising the deterministic tie-break.
    """
    vocab = len(token_dict)

    def dist() -> np.ndarray:
        if quantized:
            raw = rng.choice([1.0, 2.0, 4.0], size=vocab)
            return raw / raw.sum()
        return rng.dirichlet(np.ones(vocab))

    def attn() -> np.ndarray:
        return rng.dirichlet(np.ones(t_enc))

    rows: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]] = {}
    prefixes: List[Tuple[int, ...]] = [()]
    frontier = [()]
    for _ in range(depth):
        nxt = []
        for p in frontier:
            for tok in range(vocab):
                if tok in (token_dict.pad_id, token_dict.eos_id):
                    continue
                nxt.append(p + (tok,))
        frontier = nxt
        prefixes.extend(nxt)
    for p in prefixes:
        rows[p] = (np.log(dist()), attn())
    default = (np.log(dist()), attn())
    return _TraceTable(utt_id=utt_id, t_enc=t_enc, vocab_size=vocab,
                       rows=rows, default=default)
