"""Batched beam search with fusion, attention-coverage bonuses, and an EOS gate.

Scores live in the natural-log domain. At each step a hypothesis's candidate
for token ``c`` is ranked by

    parent_total + am_log_prob[c] + lm_weight * fusion_log_prob[c]

where ``parent_total`` already contains the parent's coverage bonus. After
selection, each surviving child's total is rebuilt as its accumulated base
score plus ``coverage_weight * coverage(attn_accum)`` computed from its own
accumulated attention, so coverage acts as a state-dependent bonus that is
replaced (not re-added) every step. Hypotheses that emit ``<eos>`` move to a
finished set capped at the beam size; the search stops early once no live
hypothesis can still beat the worst finished one, or when the output length
reaches ``max_len_ratio`` times the encoder length.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError
from .fusion import FusionScorer
from .kaldi_io import FeatureMatrix
from .token_dict import TokenDictionary

_NEG_INF = float("-inf")


def coverage_original(attn_accum: np.ndarray, tau1: float) -> float:
    """Count of encoder frames whose accumulated attention exceeds the threshold."""
    return float(np.count_nonzero(np.asarray(attn_accum) > tau1))


def coverage_improved(attn_accum: np.ndarray, tau1: float, tau2: float,
                      cov_margin: float) -> float:
    """Frame count above tau1 minus a growing penalty for frames above tau2."""
    acc = np.asarray(attn_accum, dtype=np.float64)
    attended = np.count_nonzero(acc > tau1)
    over = acc > tau2
    penalty = np.where(over, cov_margin + acc - tau2, 0.0).sum()
    return float(attended - penalty)


def eos_allowed(log_probs_row: np.ndarray, gamma: Optional[float],
                eos_id: int) -> bool:
    """End-of-sentence gate: log P(eos) must exceed gamma times the row maximum.

    The maximum runs over the full vocabulary including eos itself. A gamma of
    None disables the gate.
    """
    if gamma is None:
        return True
    row = np.asarray(log_probs_row)
    return bool(row[eos_id] > gamma * row.max())


@dataclass
class DecodeConfig:
    beam_size: int = 50
    lm_weight: float = 0.9
    coverage_mode: str = "off"            # off | original | improved
    coverage_weight: float = 0.01
    tau1: float = 0.5
    tau2: float = 1.0
    cov_margin: float = 0.7
    eos_gamma: Optional[float] = None     # None = gate off
    max_len_ratio: float = 1.0

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError(f"beam size must be positive, got {self.beam_size}")
        if self.lm_weight < 0:
            raise ConfigError(f"LM weight must be >= 0, got {self.lm_weight}")
        if self.coverage_mode not in ("off", "original", "improved"):
            raise ConfigError(f"unknown coverage mode {self.coverage_mode!r}")
        if self.coverage_weight < 0:
            raise ConfigError("coverage weight must be >= 0")
        if self.coverage_mode == "original" and self.tau1 <= 0:
            raise ConfigError("original coverage requires tau1 > 0")
        if self.coverage_mode == "improved":
            if not (self.tau2 > self.tau1 > 0):
                raise ConfigError(
                    f"improved coverage requires tau2 > tau1 > 0,"
                    f" got tau1={self.tau1} tau2={self.tau2}"
                )
            if self.cov_margin <= 0:
                raise ConfigError("improved coverage requires cov_margin > 0")
        if self.eos_gamma is not None and self.eos_gamma < 0:
            raise ConfigError("eos gamma must be >= 0 (or off)")
        if self.max_len_ratio <= 0:
            raise ConfigError("max length ratio must be positive")

    def coverage(self, attn_accum: np.ndarray) -> float:
        if self.coverage_mode == "original":
            return coverage_original(attn_accum, self.tau1)
        if self.coverage_mode == "improved":
            return coverage_improved(attn_accum, self.tau1, self.tau2,
                                     self.cov_margin)
        return 0.0


class AcousticScorer:
    """Behavioral contract for the acoustic model side of the search.

    ``init`` builds a per-utterance state with a single live row. ``step``
    consumes one chosen token per row (-1 marks the sequence start on the first
    call) and returns log-probability rows over the token dictionary plus one
    attention row per hypothesis. ``reorder`` re-selects rows after pruning.
    """

    def init(self, features: FeatureMatrix):
        raise NotImplementedError

    def enc_length(self, state) -> int:
        raise NotImplementedError

    def step(self, state, last_tokens: Sequence[int]):
        raise NotImplementedError

    def reorder(self, state, parent_indices: Sequence[int]):
        raise NotImplementedError


@dataclass
class _TraceTable:
    utt_id: str
    t_enc: int
    vocab_size: int
    rows: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]]
    default: Optional[Tuple[np.ndarray, np.ndarray]]


@dataclass
class _TraceState:
    table: _TraceTable
    prefixes: List[Tuple[int, ...]]


class TraceScorer(AcousticScorer):
    """Deterministic file-backed acoustic scorer: rows are a pure function of
    the token prefix, which makes decoder behavior reproducible and checkable
    against exhaustive enumeration."""

    def __init__(self, tables: Dict[str, _TraceTable]):
        self.tables = tables

    @classmethod
    def from_dir(cls, trace_dir: str) -> "TraceScorer":
        paths = sorted(Path(trace_dir).glob("*.trace"))
        if not paths:
            raise ConfigError(f"no .trace files found in {trace_dir}")
        tables = {}
        for p in paths:
            table = _parse_trace_file(str(p))
            if table.utt_id in tables:
                raise FormatError(f"{p}: duplicate utterance id {table.utt_id!r}")
            tables[table.utt_id] = table
        return cls(tables)

    @classmethod
    def from_file(cls, path: str) -> "TraceScorer":
        table = _parse_trace_file(path)
        return cls({table.utt_id: table})

    @property
    def utt_ids(self) -> List[str]:
        return sorted(self.tables)

    def init(self, features: FeatureMatrix) -> _TraceState:
        table = self.tables.get(features.utt_id)
        if table is None:
            raise ConfigError(f"no trace table for utterance {features.utt_id!r}")
        return _TraceState(table, [()])

    def enc_length(self, state: _TraceState) -> int:
        return state.table.t_enc

    def step(self, state: _TraceState, last_tokens: Sequence[int]):
        table = state.table
        prefixes = []
        logps = np.empty((len(state.prefixes), table.vocab_size))
        attns = np.empty((len(state.prefixes), table.t_enc))
        for i, (prefix, tok) in enumerate(zip(state.prefixes, last_tokens)):
            if tok >= 0:
                prefix = prefix + (int(tok),)
            prefixes.append(prefix)
            entry = table.rows.get(prefix, table.default)
            if entry is None:
                raise FormatError(
                    f"trace for {table.utt_id!r} has no row for prefix"
                    f" {list(prefix)} and no default row"
                )
            logps[i] = entry[0]
            attns[i] = entry[1]
        return logps, attns, _TraceState(table, prefixes)

    def reorder(self, state: _TraceState, parent_indices: Sequence[int]
                ) -> _TraceState:
        return _TraceState(state.table,
                           [state.prefixes[i] for i in parent_indices])


def _parse_trace_file(path: str) -> _TraceTable:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    body = [(i, ln.strip()) for i, ln in enumerate(lines, start=1) if ln.strip()]
    if not body:
        raise FormatError(f"{path}: empty trace file")
    lineno, header = body[0]
    fields = header.split()
    if len(fields) != 4 or fields[0] != "TRACE1":
        raise FormatError(f"{path}:{lineno}: bad header (want"
                          f" 'TRACE1 <utt_id> <T_enc> <vocab_size>')")
    utt_id = fields[1]
    try:
        t_enc, vocab_size = int(fields[2]), int(fields[3])
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-integer header counts") from None
    if t_enc < 1 or vocab_size < 1:
        raise FormatError(f"{path}:{lineno}: non-positive header counts")
    rows: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]] = {}
    default = None
    for lineno, line in body[1:]:
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise FormatError(
                f"{path}:{lineno}: expected 'prefix | log_probs | attention'"
            )
        prefix_text, logp_text, attn_text = parts
        try:
            logp = np.array([float(x) for x in logp_text.split()])
            attn = np.array([float(x) for x in attn_text.split()])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
        if logp.size != vocab_size:
            raise FormatError(
                f"{path}:{lineno}: {logp.size} log-probs, expected {vocab_size}"
            )
        if attn.size != t_enc:
            raise FormatError(
                f"{path}:{lineno}: {attn.size} attention weights, expected {t_enc}"
            )
        mass = np.exp(logp).sum()
        if not math.isclose(mass, 1.0, rel_tol=0.0, abs_tol=1e-5):
            raise FormatError(
                f"{path}:{lineno}: log-probs are not a distribution"
                f" (exp-sum {mass:.8f})"
            )
        if (attn < 0).any() or not math.isclose(attn.sum(), 1.0, rel_tol=0.0,
                                                abs_tol=1e-5):
            raise FormatError(
                f"{path}:{lineno}: attention row is not a distribution"
            )
        logp.setflags(write=False)
        attn.setflags(write=False)
        if prefix_text == "default":
            if default is not None:
                raise FormatError(f"{path}:{lineno}: duplicate default row")
            default = (logp, attn)
            continue
        prefix: Tuple[int, ...] = ()
        if prefix_text != "-":
            try:
                prefix = tuple(int(x) for x in prefix_text.split())
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: bad prefix field {prefix_text!r}"
                ) from None
        if prefix in rows:
            raise FormatError(
                f"{path}:{lineno}: duplicate row for prefix {list(prefix)}"
            )
        rows[prefix] = (logp, attn)
    return _TraceTable(utt_id, t_enc, vocab_size, rows, default)


def write_trace_file(path: str, utt_id: str, t_enc: int, vocab_size: int,
                     rows: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]],
                     default: Optional[Tuple[np.ndarray, np.ndarray]] = None
                     ) -> None:
    """Writes a trace table in the text format read by TraceScorer."""
    def fmt(prefix_text, logp, attn):
        return (prefix_text + " | "
                + " ".join(repr(float(x)) for x in logp) + " | "
                + " ".join(repr(float(x)) for x in attn) + "\n")

    with open(path, "w", encoding="utf-8") as f:
        f.write(f"TRACE1 {utt_id} {t_enc} {vocab_size}\n")
        for prefix in sorted(rows):
            logp, attn = rows[prefix]
            text = " ".join(str(t) for t in prefix) if prefix else "-"
            f.write(fmt(text, logp, attn))
        if default is not None:
            f.write(fmt("default", default[0], default[1]))


@dataclass
class _Hyp:
    tokens: Tuple[int, ...]
    base: float                 # accumulated am + lm_weight * fusion terms
    total: float                # base + coverage bonus
    attn_accum: np.ndarray


@dataclass
class DecodeResult:
    utt_id: str
    tokens: List[int]           # best hypothesis, trailing <eos> stripped
    score: float
    attn_accum: np.ndarray
    finished: bool
    steps: int


def _hyp_sort_key(h: _Hyp):
    return (-h.total, len(h.tokens), h.tokens)


@dataclass
class _UttSearch:
    utt_id: str
    am_state: object
    t_enc: int
    max_len: int
    live: List[_Hyp] = field(default_factory=list)
    finished: List[_Hyp] = field(default_factory=list)
    last_tokens: List[int] = field(default_factory=lambda: [-1])
    active: bool = True
    steps: int = 0


def decode_batch(features: Sequence[FeatureMatrix], scorer: AcousticScorer,
                 fusion: Optional[FusionScorer], config: DecodeConfig,
                 token_dict: TokenDictionary) -> List[DecodeResult]:
    """Decodes a batch of utterances in lockstep; results follow input order."""
    config.validate()
    dict_size = len(token_dict)
    eos_id, pad_id = token_dict.eos_id, token_dict.pad_id
    cov_on = config.coverage_mode != "off"
    # Early stopping needs every future per-step term to be <= 0.
    can_stop_early = fusion is None or fusion.nonpositive_scores

    searches: List[_UttSearch] = []
    for feats in features:
        if feats.data.size == 0:
            raise ConfigError(f"utterance {feats.utt_id!r}: empty feature matrix")
        am_state = scorer.init(feats)
        t_enc = scorer.enc_length(am_state)
        max_len = max(1, int(math.floor(config.max_len_ratio * t_enc)))
        search = _UttSearch(feats.utt_id, am_state, t_enc, max_len)
        search.live = [_Hyp((), 0.0, 0.0, np.zeros(t_enc))]
        searches.append(search)

    fusion_state = fusion.start(len(searches)) if fusion is not None else None

    while any(s.active for s in searches):
        active = [s for s in searches if s.active]
        # One flattened fusion call covers every live row, utterance-major.
        fusion_rows = None
        offsets: Dict[str, int] = {}
        if fusion is not None:
            pos = 0
            for s in active:
                offsets[s.utt_id] = pos
                pos += len(s.live)
            fusion_rows = fusion.char_scores(fusion_state)
            if fusion_rows.shape != (pos, dict_size):
                raise ConfigError(
                    f"fusion scorer returned shape {fusion_rows.shape},"
                    f" expected ({pos}, {dict_size})"
                )

        flat_parents: List[int] = []
        flat_tokens: List[int] = []
        for s in active:
            n_live = len(s.live)
            am_rows, attn_rows, s.am_state = scorer.step(s.am_state,
                                                         s.last_tokens)
            if am_rows.shape != (n_live, dict_size):
                raise ConfigError(
                    f"acoustic scorer returned shape {am_rows.shape},"
                    f" expected ({n_live}, {dict_size})"
                )
            step_scores = np.array(am_rows, dtype=np.float64, copy=True)
            if fusion is not None:
                off = offsets[s.utt_id]
                step_scores += config.lm_weight * fusion_rows[off:off + n_live]
            step_scores[:, pad_id] = _NEG_INF
            if config.eos_gamma is not None:
                gated = am_rows[:, eos_id] <= config.eos_gamma * am_rows.max(axis=1)
                step_scores[gated, eos_id] = _NEG_INF

            totals = np.array([h.total for h in s.live])
            cand = totals[:, None] + step_scores
            # Token-major flattening plus a stable sort makes ties fall to the
            # lower token id first, then the earlier beam slot.
            flat = cand.T.ravel()
            order = np.argsort(-flat, kind="stable")
            new_live: List[_Hyp] = []
            parents: List[int] = []
            chosen: List[int] = []
            taken = 0
            for flat_idx in order:
                score = flat[flat_idx]
                if score == _NEG_INF:
                    break
                if taken == config.beam_size:
                    break
                taken += 1
                tok = int(flat_idx) // n_live
                parent = int(flat_idx) % n_live
                hyp = s.live[parent]
                new_base = hyp.base + float(step_scores[parent, tok])
                new_accum = hyp.attn_accum + attn_rows[parent]
                total = new_base
                if cov_on:
                    total = new_base + config.coverage_weight \
                        * config.coverage(new_accum)
                child = _Hyp(hyp.tokens + (tok,), new_base, total, new_accum)
                if tok == eos_id:
                    s.finished.append(child)
                else:
                    new_live.append(child)
                    parents.append(parent)
                    chosen.append(tok)
            if len(s.finished) > config.beam_size:
                s.finished.sort(key=_hyp_sort_key)
                del s.finished[config.beam_size:]

            s.steps += 1
            s.live = new_live
            s.last_tokens = chosen
            if not new_live or s.steps >= s.max_len:
                s.active = False
            elif s.finished and can_stop_early:
                slack = config.coverage_weight * s.t_enc if cov_on else 0.0
                best_possible = max(h.base for h in new_live) + slack
                worst_finished = min(h.total for h in s.finished)
                # Strict comparison: a future hypothesis that ties the bound
                # could still win the deterministic tie-break, so only stop
                # when no continuation can even tie.
                if best_possible < worst_finished:
                    s.active = False
            if s.active:
                s.am_state = scorer.reorder(s.am_state, parents)
                if fusion is not None:
                    off = offsets[s.utt_id]
                    flat_parents.extend(off + p for p in parents)
                    flat_tokens.extend(chosen)

        if fusion is not None:
            fusion_state = fusion.reorder(fusion_state, flat_parents)
            if flat_tokens:
                fusion_state = fusion.advance(
                    fusion_state, np.asarray(flat_tokens, dtype=np.int64))

    results = []
    for s in searches:
        pool = s.finished
        finished = bool(pool)
        if not pool:
            pool = s.live
        if not pool:
            raise ConfigError(
                f"utterance {s.utt_id!r}: no hypotheses survived decoding"
            )
        best = min(pool, key=_hyp_sort_key)
        tokens = list(best.tokens)
        if tokens and tokens[-1] == eos_id:
            tokens.pop()
        results.append(DecodeResult(s.utt_id, tokens, best.total,
                                    best.attn_accum, finished, s.steps))
    return results


def decode_corpus(features: Sequence[FeatureMatrix], scorer: AcousticScorer,
                  fusion_factory, config: DecodeConfig,
                  token_dict: TokenDictionary, batch_size: int = 8,
                  workers: int = 1) -> List[DecodeResult]:
    """Chunks utterances into batches; output order always matches input order."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    if workers < 1:
        raise ConfigError(f"worker count must be positive, got {workers}")
    batches = [features[i:i + batch_size]
               for i in range(0, len(features), batch_size)]

    def run(batch):
        fusion = fusion_factory() if fusion_factory is not None else None
        return decode_batch(batch, scorer, fusion, config, token_dict)

    if workers == 1 or len(batches) <= 1:
        chunks = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, batches))
    return [result for chunk in chunks for result in chunk]
