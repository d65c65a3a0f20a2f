"""Batched beam-search decoding with look-ahead word-LM fusion for ASR.

The package decodes subword hypotheses against acoustic score traces, fusing an
external word-level language model through a vectorized prefix-tree automaton,
with attention-coverage bonuses, an end-of-sentence gate, Kaldi SCP/ARK feature
ingestion, and edit-distance WER scoring.
"""

__version__ = "0.1.0"

from .decoder import (DecodeConfig, DecodeResult, TraceScorer, coverage_improved,
                      coverage_original, decode_batch, decode_corpus,
                      eos_allowed)
from .errors import ConfigError, FormatError, FusedBeamError
from .fusion import (LookaheadFusion, MultilevelFusion, SubwordFusion,
                     cumsum_distribution)
from .lexicon_trie import NO_STATE, PrefixTreeAutomaton, build_trie
from .scoring import align, corpus_wer, write_aligned, write_raw
from .token_dict import TokenDictionary, load_dictionary
from .word_lm import ArpaLM, TableLM, load_arpa

__all__ = [
    "ArpaLM",
    "ConfigError",
    "DecodeConfig",
    "DecodeResult",
    "FormatError",
    "FusedBeamError",
    "LookaheadFusion",
    "MultilevelFusion",
    "NO_STATE",
    "PrefixTreeAutomaton",
    "SubwordFusion",
    "TableLM",
    "TokenDictionary",
    "TraceScorer",
    "align",
    "build_trie",
    "corpus_wer",
    "coverage_improved",
    "coverage_original",
    "cumsum_distribution",
    "decode_batch",
    "decode_corpus",
    "eos_allowed",
    "load_arpa",
    "load_dictionary",
    "write_aligned",
    "write_raw",
]
