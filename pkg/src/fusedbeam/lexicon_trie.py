"""Prefix-tree automaton over a word vocabulary, vectorized for batched lookups.

States are word prefixes (the root is the empty prefix, state 0). Each state
carries the rank range of the vocabulary words it prefixes: ``ub_index`` is the
rank of the lexicographically greatest word with this prefix, ``lb_index`` the
rank of the greatest word that precedes all of them (or -1 when none does).
Ranks are assigned after sorting the vocabulary by character-id sequence, so a
word always precedes its extensions. ``<space>`` is never an edge; word endings
are handled by the fusion layer.
"""

from __future__ import annotations

import struct
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .token_dict import TokenDictionary

NO_STATE = -1

_MAGIC = b"PTA1"


def word_char_ids(word: str, token_dict: TokenDictionary) -> Tuple[int, ...]:
    """Spells a word as character token ids; unknown characters are errors."""
    if not word:
        raise FormatError("empty word in vocabulary")
    ids = []
    for ch in word:
        try:
            ids.append(token_dict.index(ch))
        except KeyError:
            raise FormatError(
                f"word {word!r} contains character {ch!r} not in the dictionary"
            ) from None
    return tuple(ids)


def rank_order(vocab: Sequence[str], token_dict: TokenDictionary) -> List[str]:
    """Vocabulary sorted into rank order (by character-id sequence)."""
    return sorted(vocab, key=lambda w: word_char_ids(w, token_dict))


class PrefixTreeAutomaton:
    """Vectorized trie with per-state lexicographic rank bounds."""

    def __init__(self, transitions: np.ndarray, edge_labels: np.ndarray,
                 is_final: np.ndarray, word_index: np.ndarray,
                 ub_index: np.ndarray, lb_index: np.ndarray, alphabet_size: int):
        self.transitions = np.asarray(transitions, dtype=np.int32)
        self.edge_labels = np.asarray(edge_labels, dtype=np.int32)
        self.is_final = np.asarray(is_final, dtype=bool)
        self.word_index = np.asarray(word_index, dtype=np.int32)
        self.ub_index = np.asarray(ub_index, dtype=np.int32)
        self.lb_index = np.asarray(lb_index, dtype=np.int32)
        self.alphabet_size = int(alphabet_size)
        self.num_states = int(self.transitions.shape[0])
        self.max_out_degree = int(self.transitions.shape[1])
        self.num_words = int(np.count_nonzero(self.is_final))
        self._validate()
        self._build_derived()

    def _validate(self) -> None:
        n, d = self.num_states, self.max_out_degree
        if n < 1 or d < 1:
            raise FormatError("automaton must have at least one state and slot")
        shapes_ok = (
            self.edge_labels.shape == (n, d)
            and self.is_final.shape == (n,)
            and self.word_index.shape == (n,)
            and self.ub_index.shape == (n,)
            and self.lb_index.shape == (n,)
        )
        if not shapes_ok:
            raise FormatError("automaton arrays have inconsistent shapes")
        t = self.transitions
        used = t != NO_STATE
        if ((t[used] < 1) | (t[used] >= n)).any():
            raise FormatError("transition target out of range (or pointing at root)")
        labels = self.edge_labels[used]
        if ((labels < 0) | (labels >= self.alphabet_size)).any():
            raise FormatError("edge label out of range")
        if (self.edge_labels[~used] != NO_STATE).any():
            raise FormatError("unused transition slot with a live edge label")
        targets = t[used]
        if len(np.unique(targets)) != n - 1 or len(targets) != n - 1:
            raise FormatError("every non-root state needs exactly one parent")
        ranks = np.sort(self.word_index[self.is_final])
        if self.num_words < 1 or not np.array_equal(ranks, np.arange(self.num_words)):
            raise FormatError("final-state word ranks are not 0..num_words-1")
        if (self.word_index[~self.is_final] != -1).any():
            raise FormatError("non-final state carries a word rank")
        if ((self.ub_index < 0) | (self.ub_index >= self.num_words)).any():
            raise FormatError("upper-bound rank out of range")
        if ((self.lb_index < -1) | (self.lb_index > self.ub_index)).any():
            raise FormatError("lower-bound rank out of range")

    def _build_derived(self) -> None:
        n = self.num_states
        # Dense [num_states, alphabet] child map for vectorized advance/scoring.
        self.char_children = np.full((n, self.alphabet_size), NO_STATE,
                                     dtype=np.int32)
        self.parent_state = np.full(n, NO_STATE, dtype=np.int32)
        self.parent_char = np.full(n, NO_STATE, dtype=np.int32)
        used = self.transitions != NO_STATE
        src = np.nonzero(used)[0]
        children = self.transitions[used]
        labels = self.edge_labels[used]
        self.char_children[src, labels] = children
        self.parent_state[children] = src
        self.parent_char[children] = labels
        self.final_state_of_rank = np.full(self.num_words, NO_STATE, dtype=np.int32)
        finals = np.nonzero(self.is_final)[0]
        self.final_state_of_rank[self.word_index[finals]] = finals
        # Reachability from the root (parents are unique, so count suffices).
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = self.char_children[frontier]
            nxt = np.unique(nxt[nxt != NO_STATE])
            frontier = [s for s in nxt.tolist() if not seen[s]]
            for s in frontier:
                seen[s] = True
        if not seen.all():
            raise FormatError("automaton has states unreachable from the root")

    def advance(self, states: np.ndarray, chars: np.ndarray) -> np.ndarray:
        """Elementwise transition; NO_STATE marks missing edges."""
        states = np.asarray(states, dtype=np.int64)
        chars = np.asarray(chars, dtype=np.int64)
        if states.shape != chars.shape:
            raise ValueError("states and chars must have equal length")
        if states.size == 0:
            return states.astype(np.int32)
        if ((states < 0) | (states >= self.num_states)).any():
            raise ValueError("state index out of range")
        if ((chars < 0) | (chars >= self.alphabet_size)).any():
            raise ValueError("character id out of range")
        return self.char_children[states, chars]

    def bounds(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-state (upper, lower) word-rank bounds."""
        states = np.asarray(states, dtype=np.int64)
        if states.size and ((states < 0) | (states >= self.num_states)).any():
            raise ValueError("bounds() requires valid (non-sentinel) states")
        return self.ub_index[states].copy(), self.lb_index[states].copy()

    def child(self, state: int, char: int) -> int:
        return int(self.char_children[state, char])

    def state_of_prefix(self, char_ids: Sequence[int]) -> int:
        """Walks a character sequence from the root; NO_STATE if absent."""
        state = 0
        for c in char_ids:
            state = int(self.char_children[state, c])
            if state == NO_STATE:
                return NO_STATE
        return state

    def spell(self, rank: int) -> List[int]:
        """Character ids of the word with the given rank."""
        state = int(self.final_state_of_rank[rank])
        chars: List[int] = []
        while state != 0:
            chars.append(int(self.parent_char[state]))
            state = int(self.parent_state[state])
        return chars[::-1]

    def words(self, token_dict: TokenDictionary) -> List[str]:
        """Vocabulary strings in rank order."""
        return ["".join(token_dict.token(c) for c in self.spell(r))
                for r in range(self.num_words)]

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<4i", self.num_states, self.num_words,
                                self.max_out_degree, self.alphabet_size))
            f.write(self.transitions.astype("<i4").tobytes())
            f.write(self.edge_labels.astype("<i4").tobytes())
            f.write(self.is_final.astype(np.uint8).tobytes())
            f.write(self.word_index.astype("<i4").tobytes())
            f.write(self.ub_index.astype("<i4").tobytes())
            f.write(self.lb_index.astype("<i4").tobytes())

    @classmethod
    def load(cls, path: str) -> "PrefixTreeAutomaton":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _MAGIC:
            raise FormatError(f"{path}: bad magic {blob[:4]!r}")
        if len(blob) < 20:
            raise FormatError(f"{path}: truncated header")
        num_states, num_words, max_out, alphabet = struct.unpack("<4i", blob[4:20])
        if num_states < 1 or max_out < 1 or num_words < 1 or alphabet < 1:
            raise FormatError(f"{path}: bad counts in header")
        pos = 20

        def take(count: int, dtype) -> np.ndarray:
            nonlocal pos
            nbytes = count * np.dtype(dtype).itemsize
            if pos + nbytes > len(blob):
                raise FormatError(f"{path}: truncated array data")
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
            pos += nbytes
            return arr

        transitions = take(num_states * max_out, "<i4").reshape(num_states, max_out)
        edge_labels = take(num_states * max_out, "<i4").reshape(num_states, max_out)
        is_final = take(num_states, np.uint8).astype(bool)
        word_index = take(num_states, "<i4")
        ub_index = take(num_states, "<i4")
        lb_index = take(num_states, "<i4")
        if pos != len(blob):
            raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
        trie = cls(transitions, edge_labels, is_final, word_index,
                   ub_index, lb_index, alphabet)
        if trie.num_words != num_words:
            raise FormatError(f"{path}: header word count mismatch")
        return trie


def build_trie(vocab: Sequence[str], token_dict: TokenDictionary
               ) -> PrefixTreeAutomaton:
    """Builds the automaton from word strings, assigning lexicographic ranks."""
    if not vocab:
        raise FormatError("empty vocabulary")
    seqs = {}
    for word in vocab:
        if word in seqs:
            raise FormatError(f"duplicate word {word!r} in vocabulary")
        seqs[word] = word_char_ids(word, token_dict)
    ranked = sorted(seqs.values())

    children: List[dict] = [{}]  # per state: char id -> child state
    lo: List[int] = [0]          # rank of the first word through this state
    hi: List[int] = [0]          # rank of the last word through this state
    final: List[bool] = [False]
    word_rank: List[int] = [-1]
    for rank, seq in enumerate(ranked):
        hi[0] = rank
        state = 0
        for c in seq:
            nxt = children[state].get(c)
            if nxt is None:
                nxt = len(children)
                children[state][c] = nxt
                children.append({})
                lo.append(rank)
                hi.append(rank)
                final.append(False)
                word_rank.append(-1)
            else:
                hi[nxt] = rank
            state = nxt
        final[state] = True
        word_rank[state] = rank

    num_states = len(children)
    max_out = max(len(kids) for kids in children)
    transitions = np.full((num_states, max_out), NO_STATE, dtype=np.int32)
    edge_labels = np.full((num_states, max_out), NO_STATE, dtype=np.int32)
    for state, kids in enumerate(children):
        for slot, (char, child) in enumerate(kids.items()):
            edge_labels[state, slot] = char
            transitions[state, slot] = child
    ub_index = np.asarray(hi, dtype=np.int32)
    lb_index = np.asarray(lo, dtype=np.int32) - 1
    return PrefixTreeAutomaton(transitions, edge_labels,
                               np.asarray(final, dtype=bool),
                               np.asarray(word_rank, dtype=np.int32),
                               ub_index, lb_index, len(token_dict))
