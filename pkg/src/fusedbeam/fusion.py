"""Per-token fusion scorers that blend external language models into the beam.

The look-ahead scorer turns a word-level distribution into per-character
probabilities through the prefix-tree automaton: with ``g`` the cumulative word
probabilities in rank order, the probability of continuing prefix ``p`` with
character ``c`` is

    P(c | p, h) = (g[ub(pc)] - g[lb(pc)]) / (g[ub(p)] - g[lb(p)])

with ``g[-1]`` defined as 0. Finishing a word at a final state ``p`` carries the
remaining mass P_W(p | h) / (g[ub(p)] - g[lb(p)]) on ``<space>``, so the
character scores along a word's spelling telescope to exactly log P_W(w | h).

All scorers share one batched surface: ``start(n)`` builds a state holding n
hypothesis rows, ``char_scores(state)`` returns an [n, dict_size] natural-log
matrix, ``advance(state, tokens)`` applies one chosen token per row, and
``reorder(state, parent_indices)`` re-selects rows after beam pruning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .char_lm import CharLM, SCORE_FLOOR
from .errors import ConfigError
from .lexicon_trie import NO_STATE, PrefixTreeAutomaton
from .token_dict import TokenDictionary
from .word_lm import UNK_RANK, WordLM

# Trie-state sentinel for hypotheses whose current word left the lexicon; the
# next <space> closes it as <unk> and returns to the root.
OOV_STATE = -2

DEFAULT_OOV_PENALTY = -10.0


def cumsum_distribution(dist: np.ndarray) -> np.ndarray:
    """Running prefix sums of a word distribution in vocabulary rank order."""
    return np.cumsum(np.asarray(dist, dtype=np.float64))


class FusionScorer:
    """Common surface of the batched fusion scorers."""

    # True when every score this scorer can emit is <= 0, which is what makes
    # the decoder's early-stop bound admissible.
    nonpositive_scores = True

    def start(self, n: int):
        raise NotImplementedError

    def char_scores(self, state) -> np.ndarray:
        raise NotImplementedError

    def advance(self, state, tokens: Sequence[int]):
        raise NotImplementedError

    def reorder(self, state, parent_indices: Sequence[int]):
        raise NotImplementedError


@dataclass
class LookaheadBatch:
    """Per-hypothesis fusion state: trie position, word history, cumulative mass."""

    trie_states: np.ndarray          # [n] int64; >= 0, or OOV_STATE
    histories: list                  # [n] word-history handles
    g: np.ndarray                    # [n, |V|] cumulative probabilities

    def __len__(self) -> int:
        return len(self.histories)


class LookaheadFusion(FusionScorer):
    """Word-LM look-ahead over the prefix-tree automaton, fully batched."""

    def __init__(self, trie: PrefixTreeAutomaton, word_lm: WordLM,
                 token_dict: TokenDictionary,
                 oov_penalty: float = DEFAULT_OOV_PENALTY,
                 score_floor: float = SCORE_FLOOR):
        if word_lm.vocab_size != trie.num_words:
            raise ConfigError(
                f"word LM vocabulary ({word_lm.vocab_size}) does not match"
                f" the automaton ({trie.num_words} words)"
            )
        if trie.alphabet_size != len(token_dict):
            raise ConfigError(
                f"automaton alphabet ({trie.alphabet_size}) does not match"
                f" the token dictionary ({len(token_dict)})"
            )
        self.trie = trie
        self.word_lm = word_lm
        self.oov_penalty = float(oov_penalty)
        self.score_floor = float(score_floor)
        self.space_id = token_dict.space_id
        self.eos_id = token_dict.eos_id
        self.pad_id = token_dict.pad_id
        self.dict_size = len(token_dict)
        self.diagnostics = {"floored_scores": 0}
        self._children = trie.char_children.astype(np.int64)
        self._ub = trie.ub_index.astype(np.int64)
        self._lb = trie.lb_index.astype(np.int64)
        self._final = trie.is_final.copy()
        self._rank = trie.word_index.astype(np.int64)

    def start(self, n: int) -> LookaheadBatch:
        history = self.word_lm.start_history()
        g0 = cumsum_distribution(self.word_lm.full_distribution(history))
        return LookaheadBatch(
            trie_states=np.zeros(n, dtype=np.int64),
            histories=[history] * n,
            g=np.tile(g0, (n, 1)),
        )

    def char_scores(self, state: LookaheadBatch) -> np.ndarray:
        n = len(state)
        out = np.full((n, self.dict_size), self.oov_penalty, dtype=np.float64)
        if n == 0:
            return out
        states = state.trie_states
        valid = states >= 0
        if not valid.any():
            return out
        safe = np.where(valid, states, 0)
        g = state.g
        rows = np.arange(n)

        # Successor states for every character, then their mass bounds.
        children = self._children[safe]                       # [n, |dict|]
        has_edge = children >= 0
        child = np.where(has_edge, children, 0)
        upper = np.take_along_axis(g, self._ub[child], axis=1)
        lb_child = self._lb[child]
        lower = np.take_along_axis(g, np.maximum(lb_child, 0), axis=1)
        lower = np.where(lb_child >= 0, lower, 0.0)
        numer = upper - lower                                 # [n, |dict|]

        # Mass under the current prefix (the shared denominator per row).
        ub_s = self._ub[safe]
        lb_s = self._lb[safe]
        den_up = g[rows, ub_s]
        den_lo = np.where(lb_s >= 0, g[rows, np.maximum(lb_s, 0)], 0.0)
        denom = den_up - den_lo                               # [n]

        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(numer) - np.log(denom)[:, None]
        defined = (numer > 0) & (denom > 0)[:, None]
        flooring = has_edge & valid[:, None] & ~defined
        if flooring.any():
            self.diagnostics["floored_scores"] += int(np.count_nonzero(flooring))
        logs = np.where(defined, logs, self.score_floor)
        scorable = valid[:, None] & has_edge
        out = np.where(scorable, logs, out)

        # Word-end mass on <space> at final states.
        final = self._final[safe] & valid
        rank = np.maximum(self._rank[safe], 0)
        word_hi = g[rows, rank]
        word_lo = np.where(rank > 0, g[rows, np.maximum(rank - 1, 0)], 0.0)
        word_mass = word_hi - word_lo
        with np.errstate(divide="ignore", invalid="ignore"):
            word_end = np.log(word_mass) - np.log(denom)
        end_defined = (word_mass > 0) & (denom > 0)
        if (final & ~end_defined).any():
            self.diagnostics["floored_scores"] += int(
                np.count_nonzero(final & ~end_defined))
        word_end = np.where(end_defined, word_end, self.score_floor)
        out[:, self.space_id] = np.where(final, word_end, self.oov_penalty)

        # <eos>: end-of-sentence mass at the root, word-end times the extended
        # history's end-of-sentence mass at final states, penalty elsewhere.
        eos_col = np.full(n, self.oov_penalty)
        lm = self.word_lm
        for b in np.nonzero(valid)[0]:
            st = int(states[b])
            if st == 0:
                eos_col[b] = lm.eos_log_prob(state.histories[b])
            elif self._final[st]:
                extended = lm.extend_history(state.histories[b], int(self._rank[st]))
                eos_col[b] = word_end[b] + lm.eos_log_prob(extended)
        out[:, self.eos_id] = eos_col
        return out

    def advance(self, state: LookaheadBatch, tokens: Sequence[int]
                ) -> LookaheadBatch:
        tokens = np.asarray(tokens, dtype=np.int64)
        n = len(state)
        if tokens.shape != (n,):
            raise ValueError("one chosen token per hypothesis row required")
        states = state.trie_states
        valid = states >= 0
        safe = np.where(valid, states, 0)

        # Every row advances speculatively; the boundary mask then restores the
        # rows whose token is not an in-word character.
        is_char = ((tokens != self.space_id) & (tokens != self.eos_id)
                   & (tokens != self.pad_id))
        stepped = self._children[safe, np.clip(tokens, 0, self.dict_size - 1)]
        stepped = np.where(valid, stepped, NO_STATE)
        stepped = np.where(stepped == NO_STATE, OOV_STATE, stepped)
        new_states = np.where(is_char, stepped, states)

        boundary = tokens == self.space_id
        new_states = np.where(boundary, 0, new_states)

        histories = list(state.histories)
        g = state.g.copy()
        refresh = np.nonzero(boundary)[0]
        if refresh.size:
            # Only the unmasked rows get a fresh word distribution.
            dists = []
            for b in refresh:
                st = int(states[b])
                if st >= 0 and self._final[st]:
                    rank = int(self._rank[st])
                else:
                    rank = UNK_RANK
                histories[b] = self.word_lm.extend_history(histories[b], rank)
                dists.append(self.word_lm.full_distribution(histories[b]))
            g[refresh] = np.cumsum(np.stack(dists), axis=1)
        return LookaheadBatch(new_states, histories, g)

    def reorder(self, state: LookaheadBatch, parent_indices: Sequence[int]
                ) -> LookaheadBatch:
        idx = np.asarray(parent_indices, dtype=np.int64)
        return LookaheadBatch(
            trie_states=state.trie_states[idx],
            histories=[state.histories[i] for i in idx],
            g=state.g[idx],
        )


@dataclass
class SubwordBatch:
    char_states: list

    def __len__(self) -> int:
        return len(self.char_states)


class SubwordFusion(FusionScorer):
    """Plain token-level LM fusion: the character provider's rows, unchanged."""

    def __init__(self, char_lm: CharLM):
        self.char_lm = char_lm
        self.diagnostics: dict = {}

    def start(self, n: int) -> SubwordBatch:
        s0 = self.char_lm.start()
        return SubwordBatch([s0] * n)

    def char_scores(self, state: SubwordBatch) -> np.ndarray:
        return np.stack([self.char_lm.log_probs(s) for s in state.char_states])

    def advance(self, state: SubwordBatch, tokens: Sequence[int]) -> SubwordBatch:
        return SubwordBatch([
            self.char_lm.advance(s, int(t))
            for s, t in zip(state.char_states, tokens)
        ])

    def reorder(self, state: SubwordBatch, parent_indices: Sequence[int]
                ) -> SubwordBatch:
        return SubwordBatch([state.char_states[i] for i in parent_indices])


@dataclass
class MultilevelBatch:
    char_states: list
    trie_states: np.ndarray          # [n] int64; >= 0, or OOV_STATE
    histories: list
    char_accum: np.ndarray           # [n] sum of char log-probs in the open word

    def __len__(self) -> int:
        return len(self.char_states)


class MultilevelFusion(FusionScorer):
    """Character-LM scoring with word-LM rescoring at word boundaries.

    Closing a known word through <space> or <eos> adjusts the score by
    log P_W(w | h) minus the character log-probabilities already paid for its
    spelling; unknown words get a flat factor instead. The adjustment rides on
    the boundary token's column so pruning sees it. Because the adjustment can
    be positive, scores from this scorer are not bounded by zero.
    """

    nonpositive_scores = False

    def __init__(self, char_lm: CharLM, word_lm: WordLM,
                 trie: PrefixTreeAutomaton, token_dict: TokenDictionary,
                 oov_factor: float = DEFAULT_OOV_PENALTY):
        if word_lm.vocab_size != trie.num_words:
            raise ConfigError(
                f"word LM vocabulary ({word_lm.vocab_size}) does not match"
                f" the automaton ({trie.num_words} words)"
            )
        self.char_lm = char_lm
        self.word_lm = word_lm
        self.trie = trie
        self.oov_factor = float(oov_factor)
        self.space_id = token_dict.space_id
        self.eos_id = token_dict.eos_id
        self.pad_id = token_dict.pad_id
        self.dict_size = len(token_dict)
        self.diagnostics = {"empty_words": 0}
        self._children = trie.char_children.astype(np.int64)
        self._final = trie.is_final.copy()
        self._rank = trie.word_index.astype(np.int64)

    def start(self, n: int) -> MultilevelBatch:
        return MultilevelBatch(
            char_states=[self.char_lm.start()] * n,
            trie_states=np.zeros(n, dtype=np.int64),
            histories=[self.word_lm.start_history()] * n,
            char_accum=np.zeros(n),
        )

    def _boundary_adjustment(self, state: MultilevelBatch, b: int) -> float:
        st = int(state.trie_states[b])
        if st == 0 and state.char_accum[b] == 0.0:
            return 0.0  # empty word: no adjustment
        if st >= 0 and self._final[st]:
            dist = self.word_lm.full_distribution(state.histories[b])
            word_prob = float(dist[int(self._rank[st])])
            word_log = np.log(word_prob) if word_prob > 0 else SCORE_FLOOR
            return float(word_log - state.char_accum[b])
        return self.oov_factor

    def char_scores(self, state: MultilevelBatch) -> np.ndarray:
        rows = np.stack([self.char_lm.log_probs(s) for s in state.char_states])
        rows = rows.astype(np.float64, copy=True)
        for b in range(len(state)):
            adj = self._boundary_adjustment(state, b)
            rows[b, self.space_id] += adj
            rows[b, self.eos_id] += adj
        return rows

    def advance(self, state: MultilevelBatch, tokens: Sequence[int]
                ) -> MultilevelBatch:
        tokens = np.asarray(tokens, dtype=np.int64)
        n = len(state)
        char_states = [self.char_lm.advance(s, int(t))
                       for s, t in zip(state.char_states, tokens)]
        trie_states = state.trie_states.copy()
        histories = list(state.histories)
        accum = state.char_accum.copy()
        for b in range(n):
            tok = int(tokens[b])
            if tok == self.pad_id:
                continue
            if tok == self.space_id or tok == self.eos_id:
                st = int(trie_states[b])
                if st == 0 and accum[b] == 0.0:
                    self.diagnostics["empty_words"] += 1
                rank = int(self._rank[st]) if st >= 0 and self._final[st] \
                    else UNK_RANK
                histories[b] = self.word_lm.extend_history(histories[b], rank)
                trie_states[b] = 0
                accum[b] = 0.0
                continue
            # Accumulate the unadjusted char-LM mass paid for this character
            # (rows are cached by the provider, so this lookup is cheap).
            accum[b] += float(self.char_lm.log_probs(state.char_states[b])[tok])
            st = int(trie_states[b])
            nxt = int(self._children[st, tok]) if st >= 0 else NO_STATE
            trie_states[b] = nxt if nxt != NO_STATE else OOV_STATE
        return MultilevelBatch(char_states, trie_states, histories, accum)

    def reorder(self, state: MultilevelBatch, parent_indices: Sequence[int]
                ) -> MultilevelBatch:
        idx = np.asarray(parent_indices, dtype=np.int64)
        return MultilevelBatch(
            char_states=[state.char_states[i] for i in idx],
            trie_states=state.trie_states[idx],
            histories=[state.histories[i] for i in idx],
            char_accum=state.char_accum[idx],
        )
