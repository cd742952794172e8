"""Command-line front door.

Subcommands: bias-list, cluster, stats, prune, pool, prompt, score.
Machine-readable JSON goes to ``--out`` (or stdout); human summaries and
warnings go to stderr. Every command is deterministic given its inputs and
``--seed``. Output files are written atomically (temp file, then rename).

Exit codes: 0 success, 1 usage or argument error, 2 I/O or parse error,
3 transport/protocol error from the inference endpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus, kernel, pooling, pruning, scoring
from .errors import ParseError, ProtocolError, TransportError

log = logging.getLogger("ctxbias")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_TRANSPORT = 3

ENDPOINT_ENV = "CTXBIAS_ENDPOINT"

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the toolkit reserves 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False) + "\n"


def _write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, encoding=None if isinstance(data, bytes) else "utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(doc, out: str | None) -> None:
    text = _dump_json(doc)
    if out:
        _write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


def _safe_id(utterance_id: str) -> str:
    if not _SAFE_ID.match(utterance_id):
        raise ValueError(f"utterance id {utterance_id!r} is not filesystem-safe")
    return utterance_id


def _run_pool(worker, items, workers: int) -> list:
    if workers <= 1:
        return [worker(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, items))


def _utterance_keywords(utt: corpus.Utterance, bias_dir: str | None,
                        pruned_dir: str | None = None) -> list[str]:
    """Keyword source: pruned file > bias-list file > slide context."""
    if pruned_dir:
        doc = _read_json(Path(pruned_dir) / f"{_safe_id(utt.id)}.prune.json")
        return list(doc["kept"])
    if bias_dir:
        doc = _read_json(Path(bias_dir) / f"{_safe_id(utt.id)}.bias.json")
        return list(doc["entries"])
    return utt.context_keywords()


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc


def _clustering_mode(args) -> corpus.WindowClustering | corpus.JaccardClustering:
    if args.mode == "window":
        return corpus.WindowClustering(k=args.k)
    return corpus.JaccardClustering(threshold=args.theta)


# ---------------------------------------------------------------- commands


def cmd_bias_list(args) -> int:
    utterances = corpus.load_manifest(args.manifest)
    vocab = corpus.VocabResources.load(args.common_vocab, args.rare_pool)
    rng = kernel.SplitMix64(args.seed)
    out_dir = Path(args.out)
    written = 0
    for utt in utterances:
        n = rng.randint(400, 800) if args.train_range else args.n
        sub_seed = rng.next_u64()
        bias = corpus.build_bias_list(utt.transcript, vocab, n, sub_seed)
        doc = {
            "id": utt.id,
            "entries": list(bias.entries),
            "provenance": list(bias.provenance),
        }
        _write_atomic(out_dir / f"{_safe_id(utt.id)}.bias.json", _dump_json(doc))
        written += 1
    print(f"wrote {written} bias lists to {out_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_cluster(args) -> int:
    utterances = corpus.load_manifest(args.manifest)
    mode = _clustering_mode(args)
    for utt in utterances:
        pos = utt.current_slide_position()
        center = utt.slides[pos]
        merged = corpus.cluster_slides(utt.slides, mode)[pos]
        utt.slides = [corpus.Slide(index=center.index, keywords=tuple(merged))]
        utt.slide_index = center.index
    out = Path(args.out)
    _write_atomic(out, corpus.dump_manifest(utterances))
    stats = corpus.context_stats(utterances)
    stats_path = out.with_suffix(".stats.json")
    _write_atomic(stats_path, _dump_json(stats.to_dict()))
    print(f"clustered {len(utterances)} utterances -> {out} (+{stats_path.name})",
          file=sys.stderr)
    return EXIT_OK


def cmd_stats(args) -> int:
    utterances = corpus.load_manifest(args.manifest)
    stats = corpus.context_stats(utterances)
    _emit(stats.to_dict(), args.out)
    return EXIT_OK


def cmd_prune(args) -> int:
    utterances = corpus.load_manifest(args.manifest)
    endpoint = None
    if args.pruner == "model":
        url = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not url:
            raise ValueError(
                f"model pruner needs --endpoint or the {ENDPOINT_ENV} environment variable"
            )
        endpoint = pruning.EndpointConfig(
            base_url=url, timeout=args.timeout,
            max_retries=args.max_retries, backoff_base=args.backoff,
        )

    def prune_one(utt: corpus.Utterance) -> pruning.PruneResult:
        keywords = _utterance_keywords(utt, args.bias_dir)
        if args.pruner == "oracle":
            if not utt.transcript.strip():
                raise ValueError(f"utterance {utt.id!r}: oracle pruner needs a transcript")
            return pruning.oracle_prune(keywords, utt.transcript)
        if args.pruner == "similarity":
            reference = utt.hypothesis if utt.hypothesis else utt.transcript
            return pruning.similarity_prune(
                keywords, reference, top_k=args.top_k, threshold=args.threshold
            )
        request = pruning.PruneRequest(
            keywords=tuple(keywords), payload_ref=utt.embedding_path or utt.id
        )
        return pruning.model_prune(request, endpoint)

    results = _run_pool(prune_one, utterances, args.workers)
    out_dir = Path(args.out)
    for utt, result in zip(utterances, results):
        _write_atomic(out_dir / f"{_safe_id(utt.id)}.prune.json",
                      _dump_json(result.to_dict(utt.id)))

    scorable = [u for u in utterances if u.transcript.strip()]
    if scorable:
        pairs = []
        for utt, result in zip(utterances, results):
            if not utt.transcript.strip():
                continue
            gold = pruning.oracle_prune(_utterance_keywords(utt, args.bias_dir),
                                        utt.transcript).kept
            pairs.append((result.kept, gold))
        f1 = pruning.corpus_prune_f1(pairs)
        print(f"prune F1 {100.0 * f1:.2f} over {len(pairs)} utterances", file=sys.stderr)
    print(f"wrote {len(results)} prune results to {out_dir}", file=sys.stderr)
    return EXIT_OK


def _load_named_matrix(path: str, name: str) -> np.ndarray:
    m = kernel.load_matrix(path)
    log.debug("%s: %dx%d from %s", name, m.shape[0], m.shape[1], path)
    return m


def cmd_pool(args) -> int:
    speech = _load_named_matrix(args.speech, "speech")
    context = _load_named_matrix(args.context, "context")
    w_q = _load_named_matrix(args.query_weight, "query weight")
    w_k = _load_named_matrix(args.key_weight, "key weight")

    d = context.shape[1]
    for name, path, m in (("speech", args.speech, speech),
                          ("query weight", args.query_weight, w_q),
                          ("key weight", args.key_weight, w_k)):
        if m.shape[1] != d or (name != "speech" and m.shape[0] != d):
            raise ValueError(
                f"{name} file {path} is {m.shape[0]}x{m.shape[1]}, "
                f"incompatible with context width {d} from {args.context}"
            )
    params = pooling.ProjectionParams(query_weight=w_q, key_weight=w_k)

    if args.sweep:
        sizes = [int(s) for s in args.sweep.removeprefix("n=").split(",")]
    else:
        sizes = [args.window_size]
    out = Path(args.out)
    for n in sizes:
        config = pooling.PoolingConfig(hidden_size=d, num_heads=args.heads,
                                       window_size=n, head_mode=args.head_mode)
        result = pooling.pool_forward(speech, context, params, config)
        target = out if len(sizes) == 1 else out.with_name(f"{out.stem}.n{n}{out.suffix}")
        target.parent.mkdir(parents=True, exist_ok=True)
        buf = tempfile.NamedTemporaryFile(dir=target.parent,
                                          prefix=f".{target.name}.", delete=False)
        buf.close()
        kernel.save_matrix(buf.name, result.pooled, fmt=args.format)
        os.replace(buf.name, target)
        sidecar = {
            "window_size": n,
            "head_mode": config.head_mode,
            "windows": [list(w) for w in result.windows],
            "weights": [w.tolist() for w in result.window_weights],
        }
        _write_atomic(target.with_suffix(".weights.json"), _dump_json(sidecar))
        print(f"pooled {context.shape[0]} -> {result.pooled.shape[0]} rows (n={n}) "
              f"-> {target}", file=sys.stderr)
    return EXIT_OK


def cmd_prompt(args) -> int:
    keywords = [k.strip() for k in args.keywords.split(",") if k.strip()] if args.keywords else []
    rendered = pruning.render_prompt(args.mode, keywords, with_markers=args.markers)
    doc = {
        "mode": rendered.mode,
        "text": rendered.text,
        "context_span": list(rendered.context_span) if rendered.context_span else None,
    }
    _emit(doc, args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    utterances = corpus.load_manifest(args.manifest)
    skipped = 0
    scorable = []
    for utt in utterances:
        if utt.hypothesis is None:
            log.warning("skipping %s: no hypothesis", utt.id)
            skipped += 1
            continue
        if not utt.transcript.strip():
            raise ValueError(f"utterance {utt.id!r} has an empty transcript")
        scorable.append(utt)
    if not scorable:
        raise ValueError("no utterance has a hypothesis to score")

    def score_one(utt: corpus.Utterance) -> scoring.ScoreReport:
        bias = _utterance_keywords(utt, args.bias_dir, args.pruned_dir)
        return scoring.score_utterance(utt.transcript, utt.hypothesis, bias,
                                       insertion_policy=args.insertion_policy)

    reports = _run_pool(score_one, scorable, args.workers)
    total = scoring.aggregate(reports)

    doc = total.to_dict()
    doc["utterances"] = len(scorable)
    doc["skipped"] = skipped
    _emit(doc, args.out)

    if args.tsv:
        lines = ["id\twer\tuwer\tbwer\trecall"]
        for utt, report in zip(scorable, reports):
            lines.append("\t".join([utt.id, _fmt(report.wer), _fmt(report.uwer),
                                    _fmt(report.bwer), _fmt(report.recall)]))
        _write_atomic(Path(args.tsv), "\n".join(lines) + "\n")

    summary = (f"WER {_fmt(total.wer)} (U {_fmt(total.uwer)} / B {_fmt(total.bwer)}) "
               f"R {_fmt(total.recall)}")
    if skipped:
        summary += f" [skipped {skipped}]"
    print(summary, file=sys.stderr)
    return EXIT_OK


def _fmt(rate: float | None) -> str:
    return "-" if rate is None else f"{rate:.2f}"


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxbias", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bias-list", help="build per-utterance biasing lists")
    p.add_argument("--manifest", required=True)
    p.add_argument("--common-vocab", required=True, help="frequent-word list, one per line")
    p.add_argument("--rare-pool", required=True, help="rare-word pool, one per line")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--n", type=int, help="distractor count per utterance")
    group.add_argument("--train-range", action="store_true",
                       help="draw the distractor count uniformly from [400, 800]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_bias_list)

    p = sub.add_parser("cluster", help="merge slide contexts per utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["window", "jaccard"], required=True)
    p.add_argument("--k", type=int, default=5, help="window size in slides")
    p.add_argument("--theta", type=float, default=0.5, help="jaccard merge threshold")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("stats", help="coverage/information rates of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prune", help="prune keyword lists against speech")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pruner", choices=["oracle", "similarity", "model"], required=True)
    p.add_argument("--bias-dir", help="read keywords from bias-list files instead of slides")
    p.add_argument("--threshold", type=float, default=0.8, help="similarity cutoff")
    p.add_argument("--top-k", type=int, default=None, help="similarity keep cap")
    p.add_argument("--endpoint", help=f"model endpoint URL (or ${ENDPOINT_ENV})")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("pool", help="compress context embeddings with speech weights")
    p.add_argument("--speech", required=True, help="speech embedding matrix (T x d)")
    p.add_argument("--context", required=True, help="context embedding matrix (C x d)")
    p.add_argument("--query-weight", required=True, help="d x d query projection")
    p.add_argument("--key-weight", required=True, help="d x d key projection")
    p.add_argument("-n", "--window-size", type=int, default=2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--head-mode", choices=list(pooling.HEAD_MODES), default="slice")
    p.add_argument("--sweep", help="comma-separated window sizes, one output per size")
    p.add_argument("--format", choices=["sapm", "json"], default="sapm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("prompt", help="render an instruction prompt")
    p.add_argument("--mode", choices=sorted(pruning.PROMPT_TEMPLATES), required=True)
    p.add_argument("--keywords", help="comma-separated keyword list")
    p.add_argument("--markers", action="store_true",
                   help="wrap the keyword region in context marker tokens")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("score", help="biased/unbiased error-rate report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bias-dir", help="bias-list files as the biasing source")
    p.add_argument("--pruned-dir", help="prune-result files as the biasing source")
    p.add_argument("--insertion-policy", choices=list(scoring.INSERTION_POLICIES),
                   default="hypothesis")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", help="report JSON path (stdout when omitted)")
    p.add_argument("--tsv", help="optional per-utterance TSV path")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TransportError, ProtocolError) as exc:
        log.error("%s", exc)
        return EXIT_TRANSPORT
    except ParseError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
