"""Request/response models for the decoding service."""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class TrieBuildRequest(BaseModel):
    word_vocab_path: str
    dict_path: str
    out_path: str


class TrieBuildResponse(BaseModel):
    num_states: int
    num_words: int
    out_path: str


class DecodeParams(BaseModel):
    beam: int = 50
    lm_weight: float = 0.9
    coverage: Literal["off", "original", "improved"] = "off"
    coverage_weight: float = 0.01
    tau1: float = 0.5
    tau2: float = 1.0
    cov_margin: float = 0.7
    eos_gamma: Optional[float] = None
    max_len_ratio: float = 1.0


class LmParams(BaseModel):
    mode: Literal["none", "subword", "multilevel", "lookahead"] = "none"
    arpa_path: Optional[str] = None
    table_lm_path: Optional[str] = None
    char_arpa_path: Optional[str] = None
    word_vocab_path: Optional[str] = None
    trie_path: Optional[str] = None
    oov_penalty: float = -10.0


class DecodeRequest(BaseModel):
    dict_path: str
    scp_path: Optional[str] = None
    trace_dir: Optional[str] = None
    lm: LmParams = Field(default_factory=LmParams)
    params: DecodeParams = Field(default_factory=DecodeParams)
    batch_size: int = 8
    workers: int = 1
    seed: int = 0
    ref_path: Optional[str] = None


class UtteranceResult(BaseModel):
    utt_id: str
    text: str
    score: float
    finished: bool
    steps: int


class WerSummaryModel(BaseModel):
    ref_words: int
    substitutions: int
    insertions: int
    deletions: int
    errors: int
    wer: float
    wer_text: str


class DecodeResponse(BaseModel):
    utterances: List[UtteranceResult]
    raw_text: str
    aligned_text: Optional[str] = None
    summary: Optional[WerSummaryModel] = None
    warnings: List[str]
    wall_seconds: float
    utterances_per_second: float


class ScoreRequest(BaseModel):
    ref_path: str
    hyp_path: str


class ScoreResponse(BaseModel):
    aligned_text: str
    summary: WerSummaryModel
    warnings: List[str]


class LmProbeRequest(BaseModel):
    dict_path: str
    lm: LmParams = Field(default_factory=LmParams)
    history: List[str] = Field(default_factory=list)
    prefix: str = ""


class ProbeEntryModel(BaseModel):
    token: str
    prob: float


class LmProbeResponse(BaseModel):
    entries: List[ProbeEntryModel]
    word_end_mass: Optional[float] = None
    eos_prob: float
    note: Optional[str] = None
