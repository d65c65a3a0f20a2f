"""Minimal-edit-distance alignment, word error rate, and report writers.

The aligned report is a 5-row record per utterance: the utterance id, the
reference and hypothesis rows padded column-by-column to the wider word, a step
row marking substitutions/insertions/deletions at each column's first
character, and the utterance WER rounded half-up to two decimals. Scoring is
case-sensitive; no text normalization happens here.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from typing import Iterable, List, Sequence, Tuple

from .errors import FormatError

OK, SUB, INS, DEL = "OK", "S", "I", "D"


@dataclass
class AlignmentRecord:
    utt_id: str
    ref_words: List[str]
    hyp_words: List[str]
    steps: List[str]          # one op per alignment column, in order

    @property
    def substitutions(self) -> int:
        return self.steps.count(SUB)

    @property
    def insertions(self) -> int:
        return self.steps.count(INS)

    @property
    def deletions(self) -> int:
        return self.steps.count(DEL)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / len(self.ref_words)


def align(ref: Sequence[str], hyp: Sequence[str], utt_id: str = ""
          ) -> AlignmentRecord:
    """Levenshtein alignment with unit costs and a deterministic backtrace.

    On cost ties the backtrace prefers match/substitution over deletion over
    insertion, which fixes the step row across platforms.
    """
    if not ref:
        raise ValueError("empty reference: WER is undefined")
    m, n = len(ref), len(hyp)
    dist = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        dist[i][0] = i
    for j in range(1, n + 1):
        dist[0][j] = j
    for i in range(1, m + 1):
        row, prev = dist[i], dist[i - 1]
        ref_word = ref[i - 1]
        for j in range(1, n + 1):
            diag = prev[j - 1] + (ref_word != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    steps: List[str] = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and \
                dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            steps.append(OK if ref[i - 1] == hyp[j - 1] else SUB)
            i -= 1
            j -= 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            steps.append(DEL)
            i -= 1
        else:
            steps.append(INS)
            j -= 1
    steps.reverse()
    return AlignmentRecord(utt_id, list(ref), list(hyp), steps)


def format_percent(value: float) -> str:
    """Two-decimal percentage with half-up rounding, e.g. ``42.86%``."""
    return f"{Decimal(value).quantize(Decimal('0.01'), rounding=ROUND_HALF_UP)}%"


def write_raw(entries: Iterable[Tuple[str, str]]) -> str:
    """One line per utterance: id, a single space, the detokenized hypothesis."""
    return "".join(f"{utt_id} {text}\n" for utt_id, text in entries)


def write_aligned(record: AlignmentRecord) -> str:
    """The 5-row aligned record for one utterance."""
    ref_cells: List[str] = []
    hyp_cells: List[str] = []
    step_cells: List[str] = []
    ref_iter = iter(record.ref_words)
    hyp_iter = iter(record.hyp_words)
    for op in record.steps:
        ref_word = next(ref_iter) if op != INS else ""
        hyp_word = next(hyp_iter) if op != DEL else ""
        width = max(len(ref_word), len(hyp_word), 1)
        ref_cells.append(ref_word.ljust(width))
        hyp_cells.append(hyp_word.ljust(width))
        marker = "" if op == OK else op
        step_cells.append(marker.ljust(width))
    lines = [
        record.utt_id,
        ("REF: " + " ".join(ref_cells)).rstrip(),
        ("HYP: " + " ".join(hyp_cells)).rstrip(),
        ("STP: " + " ".join(step_cells)).rstrip(),
        f"WER: {format_percent(record.wer)}",
    ]
    return "\n".join(lines) + "\n"


@dataclass
class WerSummary:
    ref_words: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words


def corpus_wer(records: Sequence[AlignmentRecord]) -> WerSummary:
    """Aggregates per-utterance alignments: total errors over total ref words."""
    if not records:
        raise ValueError("no alignment records to aggregate")
    return WerSummary(
        ref_words=sum(len(r.ref_words) for r in records),
        substitutions=sum(r.substitutions for r in records),
        insertions=sum(r.insertions for r in records),
        deletions=sum(r.deletions for r in records),
    )


def format_summary(summary: WerSummary) -> str:
    return (
        f"WER: {format_percent(summary.wer)}"
        f" [ {summary.errors} errors / {summary.ref_words} words:"
        f" {summary.substitutions} sub, {summary.insertions} ins,"
        f" {summary.deletions} del ]\n"
    )


def read_raw_file(path: str) -> List[Tuple[str, List[str]]]:
    """Reads ``utt_id <text>`` lines, preserving order; duplicate ids rejected."""
    out: List[Tuple[str, List[str]]] = []
    seen = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split()
            utt_id, words = fields[0], fields[1:]
            if utt_id in seen:
                raise FormatError(
                    f"{path}:{lineno}: duplicate utterance id {utt_id!r}"
                    f" (first seen on line {seen[utt_id]})"
                )
            seen[utt_id] = lineno
            out.append((utt_id, words))
    return out
