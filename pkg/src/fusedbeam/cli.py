"""Command-line entry points: build-trie, decode, score-wer, lm-probe, serve.

The CLI is a thin client over the HTTP service. By default requests run
against an in-process application instance (same process, same filesystem, no
sockets); ``--server-url`` targets a running remote service instead, in which
case all paths are resolved where that server runs.

Exit codes: 0 success, 1 decode/score failure (malformed data, internal
errors), 2 usage or configuration errors. The ``FUSED_BEAM_LOG`` environment
variable sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import httpx

from . import __version__
from .errors import FormatError

logger = logging.getLogger("fusedbeam.cli")

_USAGE_EXIT = 2
_FAILURE_EXIT = 1


def _parse_gamma(text: str) -> Optional[float]:
    if text.lower() == "off":
        return None
    return float(text)


def _add_lm_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--lm", choices=["none", "subword", "multilevel",
                                      "lookahead"], default="none",
                     help="language model fusion mode")
    sub.add_argument("--arpa", help="word-level ARPA n-gram file")
    sub.add_argument("--table-lm", help="word-level table LM (TSV) file")
    sub.add_argument("--char-arpa",
                     help="token-level ARPA file for subword/multilevel modes")
    sub.add_argument("--word-vocab", help="word vocabulary, one word per line")
    sub.add_argument("--trie", help="serialized prefix-tree automaton")
    sub.add_argument("--oov-penalty", type=float, default=-10.0,
                     help="flat log-penalty for out-of-lexicon continuations")


def build_parser() -> Tuple[argparse.ArgumentParser,
                            Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="fusedbeam",
        description="Beam-search decoding with look-ahead word-LM fusion",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--server-url",
                        help="run against this service URL instead of"
                             " in-process")
    parser.add_argument("--config",
                        help="key=value file supplying flag defaults"
                             " (flags override)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    subs: Dict[str, argparse.ArgumentParser] = {}

    p = subparsers.add_parser("build-trie",
                              help="build and serialize the prefix-tree"
                                   " automaton")
    p.add_argument("--word-vocab", required=True)
    p.add_argument("--dict", required=True, dest="dict_path")
    p.add_argument("--output", required=True)
    subs["build-trie"] = p

    p = subparsers.add_parser("decode", help="decode utterances to text")
    p.add_argument("--scp", help="Kaldi SCP index of feature matrices")
    p.add_argument("--trace-dir",
                   help="directory of .trace acoustic score tables")
    p.add_argument("--dict", required=True, dest="dict_path",
                   help="token dictionary file")
    _add_lm_flags(p)
    p.add_argument("--beam", type=int, default=50)
    p.add_argument("--lm-weight", type=float, default=0.9)
    p.add_argument("--coverage", choices=["off", "original", "improved"],
                   default="off")
    p.add_argument("--coverage-weight", type=float, default=0.01)
    p.add_argument("--tau1", type=float, default=0.5)
    p.add_argument("--tau2", type=float, default=1.0)
    p.add_argument("--cov-margin", type=float, default=0.7)
    p.add_argument("--eos-gamma", type=_parse_gamma, default=None,
                   metavar="GAMMA|off")
    p.add_argument("--max-len-ratio", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="write raw hypotheses here"
                                    " (default: stdout)")
    p.add_argument("--ref", help="reference transcripts for aligned output")
    p.add_argument("--aligned-output",
                   help="write aligned records here (requires --ref)")
    subs["decode"] = p

    p = subparsers.add_parser("score-wer",
                              help="align hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--output", help="write aligned records + summary here")
    subs["score-wer"] = p

    p = subparsers.add_parser("lm-probe",
                              help="print look-ahead character probabilities"
                                   " for a prefix")
    p.add_argument("--dict", required=True, dest="dict_path")
    _add_lm_flags(p)
    p.add_argument("--history", nargs="*", default=[],
                   metavar="WORD", help="conditioning word history")
    p.add_argument("--prefix", default="", help="in-word character prefix")
    subs["lm-probe"] = p

    p = subparsers.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8337)
    subs["serve"] = p
    return parser, subs


def _read_config_file(path: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise FormatError(f"{path}:{lineno}: expected key=value")
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise FormatError(f"cannot read config file: {exc}") from exc
    return values


def _apply_config_defaults(sub: argparse.ArgumentParser,
                           values: Dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            continue  # keys for other subcommands are fine in a shared file
        value = action.type(text) if callable(action.type) else text
        if action.choices is not None and value not in action.choices:
            raise FormatError(
                f"config value {key}={text!r} not in {sorted(action.choices)}"
            )
        defaults[key] = value
    sub.set_defaults(**defaults)


def _extract_config_path(argv: List[str]) -> Tuple[List[str], Optional[str]]:
    out: List[str] = []
    path = None
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == "--config":
            if i + 1 >= len(argv):
                out.append(arg)  # let argparse report the missing value
                break
            path = argv[i + 1]
            i += 2
            continue
        if arg.startswith("--config="):
            path = arg.split("=", 1)[1]
            i += 1
            continue
        out.append(arg)
        i += 1
    return out, path


class _Client:
    """Posts request payloads either in-process or to a remote service."""

    def __init__(self, server_url: Optional[str]):
        self.server_url = server_url

    def post(self, path: str, payload: dict) -> Tuple[int, dict]:
        if self.server_url:
            with httpx.Client(base_url=self.server_url, timeout=600.0) as client:
                resp = client.post(path, json=payload)
            return resp.status_code, resp.json()

        async def run() -> Tuple[int, dict]:
            from .service.app import app
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://service") as client:
                resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()

        return asyncio.run(run())


def _call(client: _Client, path: str, payload: dict) -> Tuple[Optional[dict], int]:
    """Returns (body, 0) on success, (None, exit_code) on failure."""
    try:
        status, body = client.post(path, payload)
    except httpx.HTTPError as exc:
        print(f"error: service request failed: {exc}", file=sys.stderr)
        return None, _FAILURE_EXIT
    if status == 200:
        return body, 0
    detail = body.get("detail", body) if isinstance(body, dict) else body
    print(f"error: {detail}", file=sys.stderr)
    return None, _USAGE_EXIT if status == 400 else _FAILURE_EXIT


def _check_paths_exist(pairs: List[Tuple[str, Optional[str]]]) -> Optional[str]:
    """Fail-fast existence checks; returns an error message or None."""
    for flag, path in pairs:
        if path is not None and not os.path.exists(path):
            return f"{flag}: no such file or directory: {path}"
    return None


def _write_or_print(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _lm_payload(args) -> dict:
    return {
        "mode": args.lm,
        "arpa_path": args.arpa,
        "table_lm_path": args.table_lm,
        "char_arpa_path": args.char_arpa,
        "word_vocab_path": args.word_vocab,
        "trie_path": args.trie,
        "oov_penalty": args.oov_penalty,
    }


def _cmd_build_trie(args, client: _Client) -> int:
    err = _check_paths_exist([("--word-vocab", args.word_vocab),
                              ("--dict", args.dict_path)])
    if err:
        print(f"error: {err}", file=sys.stderr)
        return _USAGE_EXIT
    payload = {"word_vocab_path": args.word_vocab,
               "dict_path": args.dict_path, "out_path": args.output}
    body, code = _call(client, "/build-trie", payload)
    if body is None:
        return code
    print(f"{body['num_states']} states, {body['num_words']} words")
    print(f"wrote {body['out_path']}")
    return 0


def _cmd_decode(args, client: _Client) -> int:
    if args.aligned_output and not args.ref:
        print("error: --aligned-output requires --ref", file=sys.stderr)
        return _USAGE_EXIT
    err = _check_paths_exist([
        ("--scp", args.scp), ("--trace-dir", args.trace_dir),
        ("--dict", args.dict_path), ("--arpa", args.arpa),
        ("--table-lm", args.table_lm), ("--char-arpa", args.char_arpa),
        ("--word-vocab", args.word_vocab), ("--trie", args.trie),
        ("--ref", args.ref),
    ])
    if err:
        print(f"error: {err}", file=sys.stderr)
        return _USAGE_EXIT
    payload = {
        "dict_path": args.dict_path,
        "scp_path": args.scp,
        "trace_dir": args.trace_dir,
        "lm": _lm_payload(args),
        "params": {
            "beam": args.beam,
            "lm_weight": args.lm_weight,
            "coverage": args.coverage,
            "coverage_weight": args.coverage_weight,
            "tau1": args.tau1,
            "tau2": args.tau2,
            "cov_margin": args.cov_margin,
            "eos_gamma": args.eos_gamma,
            "max_len_ratio": args.max_len_ratio,
        },
        "batch_size": args.batch_size,
        "workers": args.workers,
        "seed": args.seed,
        "ref_path": args.ref,
    }
    body, code = _call(client, "/decode", payload)
    if body is None:
        return code
    for warning in body["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    _write_or_print(body["raw_text"], args.output)
    if args.aligned_output and body.get("aligned_text") is not None:
        with open(args.aligned_output, "w", encoding="utf-8") as f:
            f.write(body["aligned_text"])
    n = len(body["utterances"])
    print(f"decoded {n} utterances in {body['wall_seconds']:.3f} s"
          f" ({body['utterances_per_second']:.1f} utt/s)", file=sys.stderr)
    if body.get("summary"):
        print(f"WER: {body['summary']['wer_text']}", file=sys.stderr)
    return 0


def _cmd_score_wer(args, client: _Client) -> int:
    err = _check_paths_exist([("--ref", args.ref), ("--hyp", args.hyp)])
    if err:
        print(f"error: {err}", file=sys.stderr)
        return _USAGE_EXIT
    body, code = _call(client, "/score-wer",
                       {"ref_path": args.ref, "hyp_path": args.hyp})
    if body is None:
        return code
    for warning in body["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    summary = body["summary"]
    if args.output:
        # The aligned text ends with the summary block, so echo the summary
        # line only when the records went to a file instead of stdout.
        _write_or_print(body["aligned_text"], args.output)
        print(f"WER: {summary['wer_text']} [ {summary['errors']} errors /"
              f" {summary['ref_words']} words: {summary['substitutions']} sub,"
              f" {summary['insertions']} ins, {summary['deletions']} del ]")
    else:
        sys.stdout.write(body["aligned_text"])
    return 0


def _cmd_lm_probe(args, client: _Client) -> int:
    err = _check_paths_exist([
        ("--dict", args.dict_path), ("--arpa", args.arpa),
        ("--table-lm", args.table_lm), ("--word-vocab", args.word_vocab),
        ("--trie", args.trie),
    ])
    if err:
        print(f"error: {err}", file=sys.stderr)
        return _USAGE_EXIT
    payload = {"dict_path": args.dict_path, "lm": _lm_payload(args),
               "history": args.history, "prefix": args.prefix}
    body, code = _call(client, "/lm-probe", payload)
    if body is None:
        return code
    if body.get("note"):
        print(f"note: {body['note']}")
    for entry in body["entries"]:
        print(f"{entry['token']} {entry['prob']:.4f}")
    if body.get("word_end_mass") is not None:
        print(f"<space> {body['word_end_mass']:.4f} (word end)")
    print(f"<eos> {body['eos_prob']:.4f}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    raw_argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("FUSED_BEAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))

    parser, subs = build_parser()
    argv_rest, config_path = _extract_config_path(raw_argv)
    if config_path:
        if not os.path.exists(config_path):
            print(f"error: --config: no such file: {config_path}",
                  file=sys.stderr)
            return _USAGE_EXIT
        try:
            values = _read_config_file(config_path)
            command = next((a for a in argv_rest if a in subs), None)
            if command:
                _apply_config_defaults(subs[command], values)
        except FormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return _USAGE_EXIT

    args = parser.parse_args(argv_rest)
    client = _Client(args.server_url)
    if args.command == "build-trie":
        return _cmd_build_trie(args, client)
    if args.command == "decode":
        return _cmd_decode(args, client)
    if args.command == "score-wer":
        return _cmd_score_wer(args, client)
    if args.command == "lm-probe":
        return _cmd_lm_probe(args, client)
    if args.command == "serve":
        return _cmd_serve(args)
    parser.error(f"unknown command {args.command!r}")
    return _USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
