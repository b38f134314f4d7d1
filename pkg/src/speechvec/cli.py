"""Command-line entry point wiring all modules together.

Commands: gen-data, filter, train, eval, bench. Every command is
deterministic given (config, seed) except wall-clock fields. Exit codes:
0 success, 1 runtime failure, 2 usage/config error.
"""

import argparse
import json
import os
import sys

from . import config as cfgmod
from . import plots
from .data import (
    Dataset,
    build_dataset,
    build_train_examples,
    load_documents,
    load_utterances,
    save_documents,
    save_utterances,
)
from .errors import ConfigError, DependencyError, SpeechvecError
from .filtering import run_filter_pipeline
from .model import CrossModalModel
from .retrieval import (
    METHODS,
    bench_latency,
    build_index,
    eval_suite,
    format_eval_table,
    save_index,
)
from .training import (
    asr_head_stage,
    finetune_stage,
    load_checkpoint,
    pretrain_stage,
    save_checkpoint,
    train_projection_baseline,
    write_report_jsonl,
)

META_FILE = "meta.json"
DOCS_FILE = "docs.jsonl"
UTTS_FILE = "utterances.jsonl"
QUERIES_FILE = "queries.jsonl"


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_corpus(corpus_dir):
    docs_path = os.path.join(corpus_dir, DOCS_FILE)
    if not os.path.exists(docs_path):
        raise DependencyError(f"no corpus at {corpus_dir} (missing {DOCS_FILE})")
    docs = load_documents(docs_path)
    utts = load_utterances(os.path.join(corpus_dir, UTTS_FILE))
    queries_path = os.path.join(corpus_dir, QUERIES_FILE)
    queries = load_utterances(queries_path) if os.path.exists(queries_path) else []
    meta_path = os.path.join(corpus_dir, META_FILE)
    meta = None
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return docs, utts, queries, meta


def _effective_config(args, meta=None):
    cfg = cfgmod.load_config(getattr(args, "config", None))
    if meta is not None:
        # the corpus is authoritative for the generation-side dimensions
        cfg["data"]["vocab_size"] = meta["data"]["vocab_size"]
        cfg["model"]["d_s"] = meta["data"]["d_s"]
    return cfg


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    cfg = cfgmod.load_config(args.config)
    if args.docs is not None:
        cfg["data"]["docs"] = args.docs
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    chash = cfgmod.config_hash(cfg)
    dataset = build_dataset(cfgmod.data_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    save_documents(dataset.docs, os.path.join(args.out, DOCS_FILE))
    save_utterances(dataset.train_utts, os.path.join(args.out, UTTS_FILE))
    save_utterances(dataset.eval_utts, os.path.join(args.out, QUERIES_FILE))
    meta = {
        "config_hash": chash,
        "data": dict(cfg["data"], d_s=cfg["model"]["d_s"]),
        "counts": {
            "docs": len(dataset.docs),
            "train_utterances": len(dataset.train_utts),
            "eval_queries": len(dataset.eval_utts),
        },
    }
    _write_json(meta, os.path.join(args.out, META_FILE))
    print(f"wrote {len(dataset.docs)} docs, {len(dataset.train_utts)} utterances, "
          f"{len(dataset.eval_utts)} eval queries to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# filter


def cmd_filter(args):
    cfg = cfgmod.load_config(args.config)
    utts = load_utterances(os.path.join(args.corpus, UTTS_FILE))
    kept, report = run_filter_pipeline(
        utts,
        energy_threshold=args.energy_threshold,
        quality_threshold=args.quality_threshold,
        iqr_multiplier=args.iqr_multiplier,
        min_frames=cfg["model"]["kernel"],
    )
    os.makedirs(args.out, exist_ok=True)
    save_utterances(kept, os.path.join(args.out, "filtered.jsonl"))
    report_dict = report.to_dict()
    _write_json(report_dict, os.path.join(args.out, "filter_report.json"))
    if not args.no_plots:
        plots.save_filter_chart(report_dict, os.path.join(args.out, "filter_report.png"))
    for stage in report_dict["stages"]:
        print(f"{stage['stage']}: {stage['n_in']} in, {stage['n_out']} kept, "
              f"{len(stage['rejected'])} rejected")
    print(f"wrote {len(kept)} utterances to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    docs, utts, _, meta = _load_corpus(args.corpus)
    cfg = _effective_config(args, meta)
    chash = cfgmod.config_hash(cfg)
    tcfg = cfgmod.train_config(cfg)
    dataset = Dataset(docs=docs, train_utts=utts, eval_utts=[],
                      config=cfgmod.data_config(cfg))
    examples = build_train_examples(dataset, tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    report = []

    run_pre = args.stage in ("pre", "all") and args.ablate != "only2"
    run_fine = args.stage in ("fine", "all") and args.ablate != "only1"
    if not run_pre and not run_fine:
        raise ConfigError(f"--stage {args.stage} with --ablate {args.ablate} selects no work")

    if args.stage == "fine" and args.ablate == "none" and not os.path.exists(
            os.path.join(args.out, "checkpoint_pre", "manifest.json")):
        raise DependencyError(
            "stage 'fine' needs a stage-1 checkpoint in --out "
            "(run --stage pre first, or pass --ablate only2)"
        )

    if args.stage == "fine" and args.ablate == "none":
        model, _ = load_checkpoint(os.path.join(args.out, "checkpoint_pre"))
    else:
        model = CrossModalModel(cfgmod.model_config(cfg))

    steps = {}
    if run_pre:
        pretrain_stage(model, dataset.train_utts, tcfg, report)
        steps["pre"] = sum(1 for r in report if r["stage"] == "pre")
        save_checkpoint(model, os.path.join(args.out, "checkpoint_pre"),
                        stage="pre", steps=dict(steps), config_hash=chash)
        print(f"stage pre: {steps['pre']} steps")
    if run_fine:
        finetune_stage(model, examples, tcfg, report)
        asr_head_stage(model, dataset.train_utts, tcfg, report)
        steps["fine"] = sum(1 for r in report if r["stage"] == "fine")
        steps["asr"] = sum(1 for r in report if r["stage"] == "asr")
        save_checkpoint(model, os.path.join(args.out, "checkpoint_fine"),
                        stage="fine", steps=dict(steps), config_hash=chash)
        print(f"stage fine: {steps['fine']} steps (+{steps['asr']} ctc-head steps)")
    if tcfg.projection_epochs > 0 and run_fine:
        arm, _ = train_projection_baseline(model, examples, tcfg, report)
        save_checkpoint(arm, os.path.join(args.out, "checkpoint_projection"),
                        stage="projection", steps=dict(steps), config_hash=chash)
        print("projection baseline arm trained")

    write_report_jsonl(report, os.path.join(args.out, "train_report.jsonl"))
    if not args.no_plots and report:
        plots.save_training_curves(report, os.path.join(args.out, "train_curves.png"))
    print(f"training artifacts in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    docs, _, queries, meta = _load_corpus(args.corpus)
    if not queries:
        raise DependencyError(f"corpus {args.corpus} has no {QUERIES_FILE}")
    cfg = _effective_config(args, meta)
    chash = cfgmod.config_hash(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    wer = args.wer if args.wer is not None else cfg["eval"]["wer"]
    index = build_index(docs, model)
    report = eval_suite(
        model, docs, queries, args.method,
        wer=wer, seed=cfg["eval"]["seed"],
        rerank_candidates=cfg["eval"]["rerank_candidates"], index=index,
    )
    report.config_hash = chash
    os.makedirs(args.out, exist_ok=True)
    save_index(index, os.path.join(args.out, "index"))
    report_dict = report.to_dict()
    _write_json(report_dict, os.path.join(args.out, f"eval_{args.method}.json"))
    if not args.no_plots:
        plots.save_eval_chart(report_dict,
                              os.path.join(args.out, f"eval_{args.method}.png"))
    print(format_eval_table([report]))
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args):
    if args.repeats < 5:
        raise ConfigError(f"--repeats must be >= 5, got {args.repeats}")
    docs, _, queries, meta = _load_corpus(args.corpus)
    if not queries:
        raise DependencyError(f"corpus {args.corpus} has no {QUERIES_FILE}")
    cfg = _effective_config(args, meta)
    model, _ = load_checkpoint(args.checkpoint)
    sample = queries[: cfg["bench"]["max_queries"]]
    stats = bench_latency(model, sample, repeats=args.repeats,
                          warmup=cfg["bench"]["warmup"])
    os.makedirs(args.out, exist_ok=True)
    _write_json(stats, os.path.join(args.out, "bench.json"))
    if not args.no_plots:
        plots.save_bench_chart(stats, os.path.join(args.out, "bench.png"))
    for method, s in stats["methods"].items():
        print(f"{method}: median {s['median_s'] * 1e3:.3f} ms over {s['n_samples']} samples")
    if "ours_vs_asr_ratio" in stats:
        print(f"ours / asr_pipeline median ratio: {stats['ours_vs_asr_ratio']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="speechvec",
        description="Train, filter, evaluate, and benchmark a speech-to-document "
                    "embedding model on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--docs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("filter", help="run the corpus filter pipeline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--energy-threshold", type=float, default=0.25)
    p.add_argument("--quality-threshold", type=float, default=3.0)
    p.add_argument("--iqr-multiplier", type=float, default=1.5)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="run the training stages")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("pre", "fine", "all"), default="all")
    p.add_argument("--ablate", choices=("only1", "only2", "none"), default="none")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one method against the corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--wer", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency benchmark across methods")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--config", default=None)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpeechvecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
