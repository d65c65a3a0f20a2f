"""HTTP service endpoints, error mapping, and resource caching."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

import fusedbeam
from fusedbeam.decoder import DecodeConfig, write_trace_file
from fusedbeam.lexicon_trie import PrefixTreeAutomaton, build_trie
from fusedbeam.pipeline import LmSpec, ResourceCache, run_decode
from fusedbeam.service.app import create_app
from fusedbeam.token_dict import TokenDictionary

V = 9  # <pad> <eos> <unk> <space> e h i r s
EOS, SPACE, E, H, I, R = 1, 3, 4, 5, 6, 7


def _dist_row(target, peak=0.9):
    p = np.full(V, (1.0 - peak) / (V - 1))
    p[target] = peak
    return np.log(p)


def _attn(t_enc):
    return np.full(t_enc, 1.0 / t_enc)


def _write_trace(path, utt_id, targets, t_enc=5):
    """One row per prefix of ``targets`` plus an eos-heavy default row."""
    rows = {}
    prefix = ()
    for tok in targets:
        rows[prefix] = (_dist_row(tok), _attn(t_enc))
        prefix = prefix + (tok,)
    write_trace_file(str(path), utt_id, t_enc, V, rows,
                     default=(_dist_row(EOS), _attn(t_enc)))


@pytest.fixture
def corpus(tmp_path):
    """Dictionary, lexicon, uniform word LM, and a two-utterance trace dir."""
    dict_path = tmp_path / "dict.txt"
    dict_path.write_text("<space>\ne\nh\ni\nr\ns\n", encoding="utf-8")
    vocab_path = tmp_path / "words.txt"
    vocab_path.write_text("her\nhere\nhis\n", encoding="utf-8")
    table_path = tmp_path / "table.lm"
    table_path.write_text("-\ther\t1\n-\there\t1\n-\this\t1\n",
                          encoding="utf-8")
    trace_dir = tmp_path / "traces"
    trace_dir.mkdir()
    _write_trace(trace_dir / "utt1.trace", "utt1", [H, I, EOS])
    _write_trace(trace_dir / "utt2.trace", "utt2", [H, E, R, EOS])
    ref_path = tmp_path / "ref.txt"
    ref_path.write_text("utt1 hi\nutt2 her\n", encoding="utf-8")
    return {
        "root": tmp_path,
        "dict": str(dict_path),
        "vocab": str(vocab_path),
        "table": str(table_path),
        "traces": str(trace_dir),
        "ref": str(ref_path),
    }


@pytest.fixture
def client():
    return TestClient(create_app())


def test_health_reports_version(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["version"] == fusedbeam.__version__


def test_build_trie_reports_counts(client, corpus):
    out = str(corpus["root"] / "lexicon.trie")
    resp = client.post("/build-trie", json={
        "word_vocab_path": corpus["vocab"],
        "dict_path": corpus["dict"],
        "out_path": out,
    })
    assert resp.status_code == 200
    body = resp.json()
    assert body["num_states"] == 7
    assert body["num_words"] == 3
    assert PrefixTreeAutomaton.load(out).num_states == 7


def test_build_trie_missing_vocab_is_400(client, corpus):
    resp = client.post("/build-trie", json={
        "word_vocab_path": str(corpus["root"] / "absent.txt"),
        "dict_path": corpus["dict"],
        "out_path": str(corpus["root"] / "out.trie"),
    })
    assert resp.status_code == 400
    assert "not found" in resp.json()["detail"]


def test_decode_returns_hypotheses(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "params": {"beam": 4},
    })
    assert resp.status_code == 200
    body = resp.json()
    assert [u["utt_id"] for u in body["utterances"]] == ["utt1", "utt2"]
    assert [u["text"] for u in body["utterances"]] == ["hi", "her"]
    assert all(u["finished"] for u in body["utterances"])
    assert body["raw_text"] == "utt1 hi\nutt2 her\n"
    assert body["warnings"] == []
    assert body["aligned_text"] is None and body["summary"] is None
    assert body["wall_seconds"] >= 0.0


def test_decode_with_reference_scores(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "params": {"beam": 4},
        "ref_path": corpus["ref"],
    })
    assert resp.status_code == 200
    body = resp.json()
    assert body["summary"]["errors"] == 0
    assert body["summary"]["wer_text"] == "0.00%"
    assert "WER: 0.00%" in body["aligned_text"]


def test_decode_matches_direct_pipeline(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "params": {"beam": 4},
    })
    run = run_decode(corpus["dict"], None, corpus["traces"], LmSpec(),
                     DecodeConfig(beam_size=4))
    body = resp.json()
    assert body["raw_text"] == run.raw_text
    assert [u["score"] for u in body["utterances"]] \
        == [r.score for r in run.results]


def test_decode_with_lookahead_lm(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "lm": {"mode": "lookahead", "word_vocab_path": corpus["vocab"],
               "table_lm_path": corpus["table"]},
        "params": {"beam": 4, "lm_weight": 0.5},
    })
    assert resp.status_code == 200
    run = run_decode(corpus["dict"], None, corpus["traces"],
                     LmSpec(mode="lookahead", word_vocab_path=corpus["vocab"],
                            table_lm_path=corpus["table"]),
                     DecodeConfig(beam_size=4, lm_weight=0.5))
    assert resp.json()["raw_text"] == run.raw_text


def test_decode_unfinished_warning(client, corpus, tmp_path):
    trace_dir = tmp_path / "open"
    trace_dir.mkdir()
    # Every row favors a letter; the eos gate then blocks <eos> everywhere.
    write_trace_file(str(trace_dir / "u.trace"), "u", 5, V, {},
                     default=(_dist_row(E), _attn(5)))
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": str(trace_dir),
        "params": {"beam": 2, "eos_gamma": 1.0, "max_len_ratio": 0.4},
    })
    assert resp.status_code == 200
    body = resp.json()
    assert not body["utterances"][0]["finished"]
    assert any("never emitted" in w for w in body["warnings"])


def test_decode_without_trace_dir_is_400(client, corpus):
    resp = client.post("/decode", json={"dict_path": corpus["dict"]})
    assert resp.status_code == 400
    assert "trace" in resp.json()["detail"]


def test_decode_malformed_trace_is_422(client, corpus, tmp_path):
    bad_dir = tmp_path / "bad"
    bad_dir.mkdir()
    (bad_dir / "u.trace").write_text("TRACE1 u\n", encoding="utf-8")
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": str(bad_dir),
    })
    assert resp.status_code == 422


def test_decode_invalid_params_is_422(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "params": {"beam": "wide"},
    })
    assert resp.status_code == 422


def test_unknown_lm_mode_is_422(client, corpus):
    resp = client.post("/decode", json={
        "dict_path": corpus["dict"],
        "trace_dir": corpus["traces"],
        "lm": {"mode": "bogus"},
    })
    assert resp.status_code == 422


def test_score_wer_endpoint(client, corpus, tmp_path):
    ref = tmp_path / "r.txt"
    hyp = tmp_path / "h.txt"
    ref.write_text("u1 a b c\nu2 x\n", encoding="utf-8")
    hyp.write_text("u1 a z c\n", encoding="utf-8")
    resp = client.post("/score-wer", json={"ref_path": str(ref),
                                           "hyp_path": str(hyp)})
    assert resp.status_code == 200
    body = resp.json()
    # u1: one substitution of three words; u2: one deletion (missing hyp).
    assert body["summary"]["substitutions"] == 1
    assert body["summary"]["deletions"] == 1
    assert body["summary"]["ref_words"] == 4
    assert body["summary"]["wer_text"] == "50.00%"
    assert "WER: 50.00%" in body["aligned_text"]
    assert any("missing from the hypothesis" in w for w in body["warnings"])


def test_score_wer_missing_file_is_400(client, tmp_path):
    resp = client.post("/score-wer", json={
        "ref_path": str(tmp_path / "nope.txt"),
        "hyp_path": str(tmp_path / "nope2.txt"),
    })
    assert resp.status_code == 400


def test_internal_error_maps_to_500(client, corpus, monkeypatch):
    import sys

    # The package re-exports the FastAPI instance as ``app``, which shadows
    # the submodule name on attribute access; go through sys.modules.
    app_module = sys.modules["fusedbeam.service.app"]

    def boom(ref_path, hyp_path):
        raise RuntimeError("boom")

    monkeypatch.setattr(app_module, "run_score", boom)
    resp = client.post("/score-wer", json={"ref_path": corpus["ref"],
                                           "hyp_path": corpus["ref"]})
    assert resp.status_code == 500
    assert "boom" in resp.json()["detail"]


def _probe(client, corpus, **overrides):
    payload = {
        "dict_path": corpus["dict"],
        "lm": {"mode": "lookahead", "word_vocab_path": corpus["vocab"],
               "table_lm_path": corpus["table"]},
        "history": [],
        "prefix": "",
    }
    payload.update(overrides)
    resp = client.post("/lm-probe", json=payload)
    assert resp.status_code == 200
    return resp.json()


def test_probe_distributes_prefix_mass(client, corpus):
    body = _probe(client, corpus, prefix="h")
    probs = {e["token"]: e["prob"] for e in body["entries"]}
    assert probs["e"] == pytest.approx(2 / 3, abs=1e-9)
    assert probs["i"] == pytest.approx(1 / 3, abs=1e-9)
    assert body["word_end_mass"] is None
    assert body["note"] is None


def test_probe_word_end_mass_at_final_state(client, corpus):
    body = _probe(client, corpus, prefix="her")
    probs = {e["token"]: e["prob"] for e in body["entries"]}
    assert probs["e"] == pytest.approx(0.5, abs=1e-9)
    assert body["word_end_mass"] == pytest.approx(0.5, abs=1e-9)


def test_probe_empty_prefix_concentrates_on_h(client, corpus):
    body = _probe(client, corpus)
    probs = {e["token"]: e["prob"] for e in body["entries"]}
    assert probs == {"h": pytest.approx(1.0, abs=1e-9)}


def test_probe_out_of_lexicon_prefix(client, corpus):
    body = _probe(client, corpus, prefix="hz")
    assert body["entries"] == []
    assert "not in the lexicon" in body["note"]


def test_probe_unknown_history_word_noted(client, corpus):
    body = _probe(client, corpus, history=["xylophone"], prefix="h")
    assert "<unk>" in body["note"]


def test_resource_cache_reloads_on_change(tmp_path):
    path = tmp_path / "res.txt"
    path.write_text("one", encoding="utf-8")
    calls = []

    def loader(p):
        calls.append(p)
        return path.read_text(encoding="utf-8")

    cache = ResourceCache()
    assert cache.get("kind", str(path), loader) == "one"
    assert cache.get("kind", str(path), loader) == "one"
    assert len(calls) == 1
    path.write_text("two-longer", encoding="utf-8")
    assert cache.get("kind", str(path), loader) == "two-longer"
    assert len(calls) == 2


def test_service_caches_trie_across_requests(corpus, monkeypatch):
    token_dict = TokenDictionary(["<space>", "e", "h", "i", "r", "s"])
    trie_path = str(corpus["root"] / "cached.trie")
    build_trie(["her", "here", "his"], token_dict).save(trie_path)

    real_load = PrefixTreeAutomaton.load
    calls = []

    def counting_load(path):
        calls.append(path)
        return real_load(path)

    monkeypatch.setattr(PrefixTreeAutomaton, "load", counting_load)
    client = TestClient(create_app())
    for _ in range(3):
        body = _probe(client, corpus, **{
            "lm": {"mode": "lookahead", "trie_path": trie_path,
                   "table_lm_path": corpus["table"]},
            "prefix": "h",
        })
        assert {e["token"] for e in body["entries"]} == {"e", "i"}
    assert len(calls) == 1
