"""Command-line interface: ingest, fit, eval, topics, graph.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or validation
error. Set MCTM_LOG to control the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .errors import MctmError, NumericError, ParseError, ValidationError
from .estep import EStepSchedule
from .evaluate import (
    export_structure_graph,
    infer_heldout,
    perplexity_report,
    top_words,
)
from .params import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit

logger = logging.getLogger(__name__)


def _positive_int(value):
    ivalue = int(value)
    if ivalue < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return ivalue


def _expand_inputs(paths):
    """Files stay files; directories expand to their *.txt files."""
    files = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise ValidationError(f"input path does not exist: {p}")
        if p.is_dir():
            found = sorted(p.glob("*.txt"))
            if not found:
                raise ValidationError(f"no .txt files in directory: {p}")
            files.extend(found)
        else:
            files.append(p)
    return files


def _preprocess_config(args):
    stopwords = []
    if args.stopwords:
        stopwords = [s for s in args.stopwords.split(",") if s]
        for s in stopwords:
            if not Path(s).exists():
                raise ValidationError(f"stopword list not found: {s}")
    return corpus_mod.PreprocessConfig(
        min_term_frequency=args.min_tf,
        min_segment_length=args.min_seg_len,
        stopword_lists=tuple(stopwords),
        lowercase=not args.no_lowercase,
    )


def _cmd_ingest_text(args):
    files = _expand_inputs(args.inputs)
    corpus = corpus_mod.ingest_text(files, _preprocess_config(args))
    corpus_mod.save_corpus(corpus, args.output)
    print(
        f"wrote {args.output}: D={corpus.n_documents} "
        f"segments={corpus.n_segments} words={corpus.n_words} "
        f"W={len(corpus.vocabulary)}"
    )
    return 0


def _cmd_ingest_baskets(args):
    if not Path(args.records).exists():
        raise ValidationError(f"input path does not exist: {args.records}")
    corpus = corpus_mod.ingest_baskets(args.records, _preprocess_config(args))
    corpus_mod.save_corpus(corpus, args.output)
    print(
        f"wrote {args.output}: D={corpus.n_documents} "
        f"segments={corpus.n_segments} words={corpus.n_words} "
        f"W={len(corpus.vocabulary)}"
    )
    return 0


def _cmd_ingest_split(args):
    corpus = corpus_mod.load_corpus(args.corpus)
    labels = set()
    if args.held_out:
        labels.update(s for s in args.held_out.split(",") if s)
    if args.held_out_file:
        labels.update(
            ln.strip()
            for ln in Path(args.held_out_file).read_text().splitlines()
            if ln.strip()
        )
    train, held = corpus_mod.split_corpus(corpus, labels)
    corpus_mod.save_corpus(train, args.train_output)
    corpus_mod.save_corpus(held, args.heldout_output)
    print(
        f"train: D={train.n_documents} words={train.n_words}; "
        f"held-out: D={held.n_documents} words={held.n_words}"
    )
    return 0


def _schedule_from_args(args):
    return EStepSchedule(
        rel_tol=args.sweep_rel_tol, max_sweeps=args.max_sweeps
    )


def _cmd_fit(args):
    corpus = corpus_mod.load_corpus(args.corpus)
    if args.config:
        config = TrainConfig.from_file(
            args.config,
            k=args.topics,
            rel_tol=args.rel_tol,
            max_em_iters=args.max_iters,
            seed=args.seed,
            n_jobs=args.threads,
        )
    else:
        config = TrainConfig(
            k=args.topics,
            rel_tol=args.rel_tol,
            max_em_iters=args.max_iters,
            seed=args.seed,
            n_jobs=args.threads,
        )
    params, _, report = fit(corpus, config)
    save_checkpoint(params, args.output, vocab_sha1=corpus.vocabulary.sha1())
    report_path = args.report or (str(args.output) + ".report.json")
    Path(report_path).write_text(json.dumps(report.to_dict(), indent=2))
    print(
        f"wrote {args.output}: K={params.k} W={params.w} "
        f"iters={report.em_iters} converged={report.converged} "
        f"bound={report.bound_trajectory[-1]:.4f}"
    )
    return 0


def _load_model_for_corpus(model_path, vocab_sha1):
    params, header = load_checkpoint(model_path)
    stored = header.get("vocab_sha1")
    if stored is not None and stored != vocab_sha1:
        raise ValidationError(
            "vocabulary hash mismatch between model checkpoint and corpus"
        )
    return params


def _cmd_eval(args):
    heldout = corpus_mod.load_corpus(args.corpus)
    params = _load_model_for_corpus(args.model, heldout.vocabulary.sha1())
    report = perplexity_report(
        params,
        heldout,
        samples=args.samples,
        schedule=_schedule_from_args(args),
        observed_fraction=args.observed_fraction,
        seed=args.seed,
    )
    text = json.dumps(report.to_dict(), indent=2)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return 0


def _cmd_topics(args):
    params, header = load_checkpoint(args.model)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    stored = header.get("vocab_sha1")
    if stored is not None and stored != vocab.sha1():
        raise ValidationError(
            "vocabulary hash mismatch between model checkpoint and vocab file"
        )
    rows = [[f"topic {k}" for k in range(params.k)]]
    columns = [top_words(params, vocab, k, args.top) for k in range(params.k)]
    for rank in range(args.top):
        rows.append([col[rank] if rank < len(col) else "" for col in columns])
    text = "\n".join("\t".join(row) for row in rows) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_graph(args):
    corpus = corpus_mod.load_corpus(args.corpus)
    params = _load_model_for_corpus(args.model, corpus.vocabulary.sha1())
    doc = corpus.document(args.doc)
    state = infer_heldout(params, doc, schedule=_schedule_from_args(args))
    graph = export_structure_graph(
        params,
        state,
        doc,
        corpus.vocabulary,
        threshold=args.threshold,
        top_n=args.top,
    )
    out = Path(args.output)
    out.write_text(graph.to_dot())
    out.with_suffix(".json").write_text(graph.to_json())
    print(f"wrote {out} and {out.with_suffix('.json')}: {len(graph.edges)} edges")
    return 0


def _add_preprocess_flags(p):
    p.add_argument("--min-tf", type=_positive_int, default=1,
                   help="drop terms occurring fewer times corpus-wide")
    p.add_argument("--min-seg-len", type=_positive_int, default=1,
                   help="drop segments with fewer surviving words")
    p.add_argument("--stopwords", default="",
                   help="comma-separated stopword list files")
    p.add_argument("--no-lowercase", action="store_true")


def _add_schedule_flags(p):
    p.add_argument("--sweep-rel-tol", type=float, default=1e-6)
    p.add_argument("--max-sweeps", type=_positive_int, default=100)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mctm",
        description="Multilayer correlated topic model: ingest, fit, "
        "evaluate, summarize, export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="build corpus files")
    ingest_sub = ingest.add_subparsers(dest="ingest_command", required=True)

    p = ingest_sub.add_parser("text", help="text files; paragraphs are segments")
    p.add_argument("inputs", nargs="+", help="document files or directories")
    p.add_argument("-o", "--output", required=True, help="corpus JSONL path")
    _add_preprocess_flags(p)
    p.set_defaults(func=_cmd_ingest_text)

    p = ingest_sub.add_parser("baskets", help="customer,trip,category CSV")
    p.add_argument("records", help="order CSV file")
    p.add_argument("-o", "--output", required=True)
    _add_preprocess_flags(p)
    p.set_defaults(func=_cmd_ingest_baskets)

    p = ingest_sub.add_parser("split", help="train/held-out split")
    p.add_argument("corpus", help="corpus JSONL path")
    p.add_argument("--held-out", default="", help="comma-separated labels")
    p.add_argument("--held-out-file", default="", help="one label per line")
    p.add_argument("--train-output", required=True)
    p.add_argument("--heldout-output", required=True)
    p.set_defaults(func=_cmd_ingest_split)

    p = sub.add_parser("fit", help="run variational EM")
    p.add_argument("corpus")
    p.add_argument("--topics", type=_positive_int, required=True)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=_positive_int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int,
                   default=os.cpu_count() or 1)
    p.add_argument("--config", default="", help="JSON/TOML config file")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--report", default="", help="fit report JSON path")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("eval", help="held-out perplexity")
    p.add_argument("model")
    p.add_argument("corpus", help="held-out corpus JSONL")
    p.add_argument("--samples", type=_positive_int, default=2000)
    p.add_argument("--observed-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="")
    _add_schedule_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("topics", help="top words per topic as TSV")
    p.add_argument("model")
    p.add_argument("--vocab", required=True, help="vocabulary sidecar file")
    p.add_argument("--top", type=_positive_int, default=10)
    p.add_argument("-o", "--output", default="")
    p.set_defaults(func=_cmd_topics)

    p = sub.add_parser("graph", help="document-structure graph (DOT + JSON)")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("--doc", required=True, help="document label")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--top", type=_positive_int, default=5)
    p.add_argument("-o", "--output", required=True, help="DOT output path")
    _add_schedule_flags(p)
    p.set_defaults(func=_cmd_graph)

    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("MCTM_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, MctmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
