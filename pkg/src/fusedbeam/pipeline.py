"""End-to-end runs shared by the service endpoints: decode, score, probe, build.

Every function here works on file paths plus plain parameter objects, so the
FastAPI layer stays a thin mapping from request models to these calls. Loaded
resources (dictionaries, automata, LMs, trace tables) can be cached across
calls keyed by path and file stat, which is what makes a long-running service
worthwhile.
"""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Tuple

import numpy as np

from .char_lm import NgramCharLM, UniformCharLM
from .decoder import DecodeConfig, DecodeResult, TraceScorer, decode_corpus
from .errors import ConfigError
from .fusion import (DEFAULT_OOV_PENALTY, LookaheadFusion, MultilevelFusion,
                     SubwordFusion)
from .kaldi_io import FeatureMatrix, read_feature, read_scp
from .lexicon_trie import NO_STATE, PrefixTreeAutomaton, build_trie, rank_order
from .scoring import (AlignmentRecord, WerSummary, align, corpus_wer,
                      format_summary, read_raw_file, write_aligned, write_raw)
from .token_dict import TokenDictionary, load_dictionary
from .word_lm import TableLM, WordLM, load_arpa

LM_MODES = ("none", "subword", "multilevel", "lookahead")


class ResourceCache:
    """Caches loaded resources keyed by (kind, path, mtime, size)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: Dict[tuple, object] = {}

    def get(self, kind: Hashable, path: str, loader: Callable[[str], object]):
        st = os.stat(path)
        key = (kind, os.path.realpath(path), st.st_mtime_ns, st.st_size)
        with self._lock:
            cached = self._items.get(key)
        if cached is not None:
            return cached
        value = loader(path)
        with self._lock:
            self._items[key] = value
        return value


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is required for this run")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


@dataclass
class LmSpec:
    """Which language model to fuse and where its resources live."""

    mode: str = "none"
    arpa_path: Optional[str] = None
    table_lm_path: Optional[str] = None
    char_arpa_path: Optional[str] = None
    word_vocab_path: Optional[str] = None
    trie_path: Optional[str] = None
    oov_penalty: float = DEFAULT_OOV_PENALTY

    def validate(self) -> None:
        if self.mode not in LM_MODES:
            raise ConfigError(f"unknown LM mode {self.mode!r}")


def _load_vocab(path: str) -> List[str]:
    words: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if line and not line.startswith("#"):
                words.append(line.split()[0])
    if not words:
        raise ConfigError(f"{path}: empty word vocabulary")
    return words


def load_trie(spec: LmSpec, token_dict: TokenDictionary,
              cache: Optional[ResourceCache]) -> PrefixTreeAutomaton:
    if spec.trie_path:
        path = _require(spec.trie_path, "automaton file (--trie)")
        if cache is not None:
            return cache.get("trie", path, PrefixTreeAutomaton.load)
        return PrefixTreeAutomaton.load(path)
    path = _require(spec.word_vocab_path, "word vocabulary (--word-vocab)")
    return build_trie(_load_vocab(path), token_dict)


def load_word_lm(spec: LmSpec, vocab_ranked: List[str],
                 cache: Optional[ResourceCache]) -> WordLM:
    if spec.arpa_path and spec.table_lm_path:
        raise ConfigError("--arpa and --table-lm are mutually exclusive")
    if spec.arpa_path:
        path = _require(spec.arpa_path, "ARPA file (--arpa)")
        loader = lambda p: load_arpa(p, vocab_ranked)
        if cache is not None:
            return cache.get(("arpa", tuple(vocab_ranked)), path, loader)
        return loader(path)
    if spec.table_lm_path:
        path = _require(spec.table_lm_path, "table LM file (--table-lm)")
        loader = lambda p: TableLM.from_file(p, vocab_ranked)
        if cache is not None:
            return cache.get(("table", tuple(vocab_ranked)), path, loader)
        return loader(path)
    raise ConfigError("this LM mode needs --arpa or --table-lm")


def _load_char_lm(spec: LmSpec, token_dict: TokenDictionary,
                  cache: Optional[ResourceCache]):
    if spec.char_arpa_path:
        path = _require(spec.char_arpa_path, "character ARPA file (--char-arpa)")
        loader = lambda p: NgramCharLM.from_file(p, token_dict)
        if cache is not None:
            return cache.get(("char-arpa", tuple(token_dict.tokens)), path, loader)
        return loader(path)
    return UniformCharLM(token_dict)


def make_fusion_factory(spec: LmSpec, token_dict: TokenDictionary,
                        cache: Optional[ResourceCache] = None
                        ) -> Optional[Callable[[], object]]:
    """Builds a per-batch fusion-scorer factory for the requested LM mode."""
    spec.validate()
    if spec.mode == "none":
        return None
    if spec.mode == "subword":
        char_lm = _load_char_lm(spec, token_dict, cache)
        return lambda: SubwordFusion(char_lm)
    trie = load_trie(spec, token_dict, cache)
    vocab_ranked = trie.words(token_dict)
    word_lm = load_word_lm(spec, vocab_ranked, cache)
    if spec.mode == "lookahead":
        return lambda: LookaheadFusion(trie, word_lm, token_dict,
                                       oov_penalty=spec.oov_penalty)
    char_lm = _load_char_lm(spec, token_dict, cache)
    return lambda: MultilevelFusion(char_lm, word_lm, trie, token_dict,
                                    oov_factor=spec.oov_penalty)


@dataclass
class DecodeRun:
    results: List[DecodeResult]
    texts: List[str]            # detokenized hypothesis per result
    raw_text: str
    aligned_text: Optional[str]
    summary: Optional[WerSummary]
    warnings: List[str]
    wall_seconds: float

    @property
    def utterances_per_second(self) -> float:
        if self.wall_seconds <= 0:
            return float("inf")
        return len(self.results) / self.wall_seconds


def run_decode(token_dict_path: str, scp_path: Optional[str],
               trace_dir: Optional[str], lm_spec: LmSpec, config: DecodeConfig,
               batch_size: int = 8, workers: int = 1,
               ref_path: Optional[str] = None,
               cache: Optional[ResourceCache] = None) -> DecodeRun:
    """Reads inputs, decodes every utterance, renders the reports."""
    config.validate()
    token_dict = load_dictionary(_require(token_dict_path, "token dictionary"))
    if trace_dir is None:
        raise ConfigError(
            "decoding requires --trace-dir: acoustic scores come from trace"
            " files (feature matrices alone carry no scorer)"
        )
    if not os.path.isdir(trace_dir):
        raise ConfigError(f"trace directory not found: {trace_dir}")
    scorer = TraceScorer.from_dir(trace_dir)
    for utt_id, table in scorer.tables.items():
        if table.vocab_size != len(token_dict):
            raise ConfigError(
                f"trace for {utt_id!r} scores {table.vocab_size} tokens but the"
                f" dictionary has {len(token_dict)}"
            )

    if scp_path is not None:
        entries = read_scp(_require(scp_path, "SCP file"))
        features = [read_feature(e) for e in entries]
        missing = [f.utt_id for f in features if f.utt_id not in scorer.tables]
        if missing:
            raise ConfigError(
                f"no trace files for utterances: {', '.join(missing)}"
            )
    else:
        features = [FeatureMatrix(utt_id, np.zeros((1, 1), dtype=np.float32))
                    for utt_id in scorer.utt_ids]

    fusion_factory = make_fusion_factory(lm_spec, token_dict, cache)
    started = time.perf_counter()
    results = decode_corpus(features, scorer, fusion_factory, config,
                            token_dict, batch_size=batch_size, workers=workers)
    wall = time.perf_counter() - started

    texts = [token_dict.detokenize(r.tokens) for r in results]
    raw_text = write_raw(zip((r.utt_id for r in results), texts))
    warnings = [f"utterance {r.utt_id!r} never emitted <eos>; best open"
                f" hypothesis reported" for r in results if not r.finished]
    aligned_text = None
    summary = None
    if ref_path is not None:
        refs = dict(read_raw_file(_require(ref_path, "reference file")))
        hyps = [(r.utt_id, text.split())
                for r, text in zip(results, texts)]
        records, score_warnings = _score_pairs(refs, hyps)
        warnings.extend(score_warnings)
        summary = corpus_wer(records) if records else None
        blocks = [write_aligned(rec) for rec in records]
        if summary is not None:
            blocks.append(format_summary(summary))
        aligned_text = "\n".join(blocks)
    return DecodeRun(results, texts, raw_text, aligned_text, summary, warnings,
                     wall)


def _score_pairs(refs: Dict[str, List[str]],
                 hyps: List[Tuple[str, List[str]]]
                 ) -> Tuple[List[AlignmentRecord], List[str]]:
    records: List[AlignmentRecord] = []
    warnings: List[str] = []
    seen = set()
    for utt_id, hyp_words in hyps:
        seen.add(utt_id)
        ref_words = refs.get(utt_id)
        if ref_words is None:
            warnings.append(f"utterance {utt_id!r} missing from the reference;"
                            f" skipped")
            continue
        if not ref_words:
            warnings.append(f"utterance {utt_id!r} has an empty reference;"
                            f" skipped")
            continue
        records.append(align(ref_words, hyp_words, utt_id))
    for utt_id, ref_words in refs.items():
        if utt_id in seen or not ref_words:
            continue
        warnings.append(f"utterance {utt_id!r} missing from the hypothesis;"
                        f" scored as all deletions")
        records.append(align(ref_words, [], utt_id))
    return records, warnings


@dataclass
class ScoreRun:
    records: List[AlignmentRecord]
    aligned_text: str
    summary: WerSummary
    warnings: List[str]


def run_score(ref_path: str, hyp_path: str) -> ScoreRun:
    """Aligns a hypothesis file against a reference file, in reference order."""
    refs = read_raw_file(_require(ref_path, "reference file"))
    hyps = read_raw_file(_require(hyp_path, "hypothesis file"))
    ref_map = dict(refs)
    hyp_map = dict(hyps)
    records: List[AlignmentRecord] = []
    warnings: List[str] = []
    for utt_id, ref_words in refs:
        if not ref_words:
            warnings.append(f"utterance {utt_id!r} has an empty reference;"
                            f" skipped")
            continue
        hyp_words = hyp_map.get(utt_id)
        if hyp_words is None:
            warnings.append(f"utterance {utt_id!r} missing from the hypothesis;"
                            f" scored as all deletions")
            hyp_words = []
        records.append(align(ref_words, hyp_words, utt_id))
    for utt_id, _ in hyps:
        if utt_id not in ref_map:
            warnings.append(f"utterance {utt_id!r} missing from the reference;"
                            f" ignored")
    if not records:
        raise ConfigError("no scorable utterances (empty reference file?)")
    summary = corpus_wer(records)
    blocks = [write_aligned(rec) for rec in records]
    blocks.append(format_summary(summary))
    return ScoreRun(records, "\n".join(blocks), summary, warnings)


@dataclass
class TrieBuild:
    num_states: int
    num_words: int
    out_path: str


def run_build_trie(word_vocab_path: str, token_dict_path: str,
                   out_path: str) -> TrieBuild:
    token_dict = load_dictionary(_require(token_dict_path, "token dictionary"))
    vocab = _load_vocab(_require(word_vocab_path, "word vocabulary"))
    trie = build_trie(vocab, token_dict)
    out = Path(out_path)
    if out.parent and not out.parent.exists():
        raise ConfigError(f"output directory not found: {out.parent}")
    trie.save(out_path)
    return TrieBuild(trie.num_states, trie.num_words, out_path)


@dataclass
class ProbeEntry:
    token: str
    prob: float


@dataclass
class ProbeRun:
    entries: List[ProbeEntry]
    word_end_mass: Optional[float]
    eos_prob: float
    note: Optional[str]


def run_probe(token_dict_path: str, lm_spec: LmSpec, history: List[str],
              prefix: str, cache: Optional[ResourceCache] = None) -> ProbeRun:
    """Per-character continuation probabilities for one prefix and history."""
    token_dict = load_dictionary(_require(token_dict_path, "token dictionary"))
    trie = load_trie(lm_spec, token_dict, cache)
    vocab_ranked = trie.words(token_dict)
    word_lm = load_word_lm(lm_spec, vocab_ranked, cache)
    fusion = LookaheadFusion(trie, word_lm, token_dict,
                             oov_penalty=lm_spec.oov_penalty)

    ranks = {w: r for r, w in enumerate(vocab_ranked)}
    hist = word_lm.start_history()
    note = None
    for word in history:
        rank = ranks.get(word, -1)
        if rank < 0:
            note = f"history word {word!r} is out of vocabulary; treated as <unk>"
        hist = word_lm.extend_history(hist, rank)

    state = fusion.start(1)
    state.histories[0] = hist
    state.g[0] = np.cumsum(word_lm.full_distribution(hist))
    prefix_ids = [token_dict.index_or_unk(ch) for ch in prefix]
    trie_state = trie.state_of_prefix(prefix_ids)
    if trie_state == NO_STATE:
        return ProbeRun([], None, 0.0,
                        f"prefix {prefix!r} is not in the lexicon; every"
                        f" continuation takes the flat penalty"
                        f" exp({fusion.oov_penalty:g})")
    state.trie_states[0] = trie_state
    row = fusion.char_scores(state)[0]

    entries = []
    for char in range(len(token_dict)):
        if trie.child(trie_state, char) != NO_STATE:
            entries.append(ProbeEntry(token_dict.token(char),
                                      float(math.exp(row[char]))))
    word_end = None
    if trie.is_final[trie_state]:
        word_end = float(math.exp(row[token_dict.space_id]))
    eos_prob = float(math.exp(row[token_dict.eos_id]))
    return ProbeRun(entries, word_end, eos_prob, note)
