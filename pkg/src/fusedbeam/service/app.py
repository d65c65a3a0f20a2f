"""FastAPI service exposing trie building, decoding, scoring, and LM probes.

Paths in requests are resolved on the machine running the service. Loaded
resources are cached across requests keyed by path and file stat, so repeated
decodes against the same lexicon/LM skip the load cost.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..decoder import DecodeConfig
from ..errors import ConfigError, FormatError
from ..pipeline import (LmSpec, ResourceCache, run_build_trie, run_decode,
                        run_probe, run_score)
from ..scoring import WerSummary, format_percent
from .schemas import (DecodeRequest, DecodeResponse, HealthResponse,
                      LmProbeRequest, LmProbeResponse, ProbeEntryModel,
                      ScoreRequest, ScoreResponse, TrieBuildRequest,
                      TrieBuildResponse, UtteranceResult, WerSummaryModel)

logger = logging.getLogger("fusedbeam.service")


def _summary_model(summary: WerSummary) -> WerSummaryModel:
    return WerSummaryModel(
        ref_words=summary.ref_words,
        substitutions=summary.substitutions,
        insertions=summary.insertions,
        deletions=summary.deletions,
        errors=summary.errors,
        wer=summary.wer,
        wer_text=format_percent(summary.wer),
    )


def _lm_spec(req) -> LmSpec:
    return LmSpec(
        mode=req.mode,
        arpa_path=req.arpa_path,
        table_lm_path=req.table_lm_path,
        char_arpa_path=req.char_arpa_path,
        word_vocab_path=req.word_vocab_path,
        trie_path=req.trie_path,
        oov_penalty=req.oov_penalty,
    )


def _decode_config(params) -> DecodeConfig:
    return DecodeConfig(
        beam_size=params.beam,
        lm_weight=params.lm_weight,
        coverage_mode=params.coverage,
        coverage_weight=params.coverage_weight,
        tau1=params.tau1,
        tau2=params.tau2,
        cov_margin=params.cov_margin,
        eos_gamma=params.eos_gamma,
        max_len_ratio=params.max_len_ratio,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="fusedbeam", version=__version__)
    cache = ResourceCache()

    def fail(exc: Exception) -> HTTPException:
        # 400: unusable configuration or missing inputs (usage errors);
        # 422: inputs exist but their contents are malformed.
        if isinstance(exc, (ConfigError, FileNotFoundError, ValueError)):
            return HTTPException(status_code=400, detail=str(exc))
        if isinstance(exc, FormatError):
            return HTTPException(status_code=422, detail=str(exc))
        logger.exception("internal error")
        return HTTPException(status_code=500, detail=str(exc))

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/build-trie", response_model=TrieBuildResponse)
    def build_trie_endpoint(req: TrieBuildRequest) -> TrieBuildResponse:
        try:
            built = run_build_trie(req.word_vocab_path, req.dict_path,
                                   req.out_path)
        except Exception as exc:
            raise fail(exc) from exc
        return TrieBuildResponse(num_states=built.num_states,
                                 num_words=built.num_words,
                                 out_path=built.out_path)

    @app.post("/decode", response_model=DecodeResponse)
    def decode_endpoint(req: DecodeRequest) -> DecodeResponse:
        try:
            run = run_decode(
                token_dict_path=req.dict_path,
                scp_path=req.scp_path,
                trace_dir=req.trace_dir,
                lm_spec=_lm_spec(req.lm),
                config=_decode_config(req.params),
                batch_size=req.batch_size,
                workers=req.workers,
                ref_path=req.ref_path,
                cache=cache,
            )
        except Exception as exc:
            raise fail(exc) from exc
        utterances = [
            UtteranceResult(utt_id=r.utt_id, text=text, score=r.score,
                            finished=r.finished, steps=r.steps)
            for r, text in zip(run.results, run.texts)
        ]
        return DecodeResponse(
            utterances=utterances,
            raw_text=run.raw_text,
            aligned_text=run.aligned_text,
            summary=_summary_model(run.summary) if run.summary else None,
            warnings=run.warnings,
            wall_seconds=run.wall_seconds,
            utterances_per_second=run.utterances_per_second,
        )

    @app.post("/score-wer", response_model=ScoreResponse)
    def score_endpoint(req: ScoreRequest) -> ScoreResponse:
        try:
            run = run_score(req.ref_path, req.hyp_path)
        except Exception as exc:
            raise fail(exc) from exc
        return ScoreResponse(aligned_text=run.aligned_text,
                             summary=_summary_model(run.summary),
                             warnings=run.warnings)

    @app.post("/lm-probe", response_model=LmProbeResponse)
    def probe_endpoint(req: LmProbeRequest) -> LmProbeResponse:
        try:
            run = run_probe(req.dict_path, _lm_spec(req.lm), req.history,
                            req.prefix, cache=cache)
        except Exception as exc:
            raise fail(exc) from exc
        return LmProbeResponse(
            entries=[ProbeEntryModel(token=e.token, prob=e.prob)
                     for e in run.entries],
            word_end_mass=run.word_end_mass,
            eos_prob=run.eos_prob,
            note=run.note,
        )

    return app


app = create_app()
