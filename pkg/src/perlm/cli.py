"""Command-line interface: data preparation, training, ablations, recovery task.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import PRESETS, RunConfig, apply_overrides, load_config, parse_override_args
from .data import GenerationStats, generate_instances, read_instances, write_instances
from .errors import (ConfigurationError, EvaluationError, InstanceCorruptionError,
                     InstanceParseError, LabelEncodingError, PerlmError,
                     TrainingDivergenceError, VocabFormatError)
from .model import init_encoder_state
from .seeding import derive_rng
from .tokenizer import load_vocab, read_corpus_documents, tokenize_word
from .training import (ABLATION_SUITES, format_ablation_table, load_checkpoint,
                       read_metrics, run_ablation_suite, train)
from . import wor

USAGE_EXIT, DATA_EXIT, DIVERGENCE_EXIT = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def add_config_options(parser, steps_flag=True):
    parser.add_argument("--config", help="JSON file of dotted-key settings")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="desk-scale configuration preset")
    parser.add_argument("--seed", type=int, help="root seed for all randomness")
    parser.add_argument("--out", help="output directory or file prefix")
    if steps_flag:
        parser.add_argument("--steps", type=int, help="override total_steps")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted-key overrides, e.g. masking.granularity=sentence")


def resolve_config(args, extra: dict | None = None) -> RunConfig:
    overrides = parse_override_args(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = str(args.steps)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if extra:
        overrides.update(extra)
    return load_config(getattr(args, "config", None),
                       preset=getattr(args, "preset", None),
                       overrides=overrides)


def _stderr(message: str) -> None:
    print(message, file=sys.stderr)


# -- commands -------------------------------------------------------------------


def cmd_prepare(args) -> int:
    run = resolve_config(args)
    vocab = load_vocab(args.vocab)
    run = apply_overrides(run, {"model.vocab": str(vocab.size)})
    if run.masking.select_ratio == 0.0:
        _stderr("warning: select_ratio is 0; instances will be all-negative")
    documents = list(read_corpus_documents(args.corpus,
                                           pre_segmented=args.pre_segmented))
    stats = GenerationStats()
    out = args.out or "instances.jsonl"
    count = write_instances(out, generate_instances(
        documents, vocab, run.masking, run.max_len, seed=run.seed,
        stats=stats, lowercase=args.lowercase,
        duplicate_factor=args.dupe_factor))
    summary = stats.as_dict()
    with open(f"{out}.stats.json", "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(json.dumps({"instances": count, "out": str(out),
                      "selected_word_fraction": summary["selected_word_fraction"],
                      "shuffled_fraction": summary["shuffled_fraction"],
                      "gram_histogram": summary["gram_histogram"]}, indent=2))
    return 0


def cmd_pretrain(args) -> int:
    extra = {}
    if args.train_instances:
        extra["train_instances"] = args.train_instances
    if args.eval_instances:
        extra["eval_instances"] = args.eval_instances
    run = resolve_config(args, extra)
    _, records = train(run, log=_stderr)
    final = records[-1]
    print(json.dumps({"out_dir": run.out_dir, "steps": final.step,
                      "final_loss": final.loss,
                      "final_accuracy": final.position_accuracy}, indent=2))
    return 0


def cmd_ablate(args) -> int:
    run = resolve_config(args)
    vocab = load_vocab(args.vocab)
    run = apply_overrides(run, {"model.vocab": str(vocab.size)})
    documents = list(read_corpus_documents(args.corpus,
                                           pre_segmented=args.pre_segmented))
    suites = (list(ABLATION_SUITES) if args.suite == "all" else [args.suite])
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for suite in suites:
        base = apply_overrides(run, {"out_dir": str(out_dir / suite)})
        rows = run_ablation_suite(base, ABLATION_SUITES[suite],
                                  documents=documents, vocab=vocab,
                                  duplicate_factor=args.dupe_factor,
                                  log=_stderr)
        with open(out_dir / f"ablation_{suite}.json", "w",
                  encoding="utf-8") as handle:
            json.dump(rows, handle, indent=2)
            handle.write("\n")
        print(f"== {suite}")
        print(format_ablation_table(rows))
    return 0


def cmd_wor_corrupt(args) -> int:
    run = resolve_config(args)
    vocab = load_vocab(args.vocab) if args.vocab else None
    documents = read_corpus_documents(args.corpus,
                                      pre_segmented=args.pre_segmented)
    examples = []
    skipped = 0
    index = 0
    for document in documents:
        if isinstance(document, str):
            from .tokenizer import default_sentence_splitter, default_word_splitter
            sentences = [default_word_splitter(s)
                         for s in default_sentence_splitter(document)]
        else:
            sentences = document
        for words in sentences:
            if not words:
                continue
            if vocab is not None:
                units = [tokenize_word(w, vocab) for w in words]
            else:
                units = [[w] for w in words]
            result = wor.corrupt_sentence(units, derive_rng(run.seed, "wor-corrupt", index),
                                          max_spans=args.max_spans,
                                          max_extent=args.max_extent)
            index += 1
            if result is None:
                skipped += 1
                continue
            _, labeling = result
            examples.append(labeling)
    out = args.out or "wor.jsonl"
    wor.write_labeled(out, examples)
    print(json.dumps({"sentences": len(examples), "skipped_short": skipped,
                      "out": str(out)}, indent=2))
    return 0


def cmd_wor_train(args) -> int:
    run = resolve_config(args)
    vocab = load_vocab(args.vocab)
    data = wor.read_labeled(args.data)
    if args.init:
        state, _, _, _ = load_checkpoint(args.init)
    else:
        run = apply_overrides(run, {"model.vocab": str(vocab.size)})
        state = init_encoder_state(run.model, derive_rng(run.seed, "params"))
    cfg = wor.WorFinetuneConfig(
        seed=run.seed, steps=args.steps or 200, batch_size=args.batch_size,
        peak_lr=args.lr, warmup_steps=args.warmup, max_len=run.max_len)
    tagger = wor.wor_finetune(state, data, cfg, vocab, log=_stderr)
    out = args.out or "wor-tagger"
    wor.save_tagger(out, tagger)
    print(json.dumps({"tagger": str(out), "sentences": len(data),
                      "steps": cfg.steps}, indent=2))
    return 0


def cmd_wor_eval(args) -> int:
    vocab = load_vocab(args.vocab)
    tagger = wor.load_tagger(args.tagger, vocab)
    data = wor.read_labeled(args.data)
    report = wor.evaluate_tagger(tagger, data)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump(report, handle, indent=2)
            handle.write("\n")
    print(json.dumps(report, indent=2))
    return 0


def render_instance(instance, vocab) -> str:
    """Human-readable rendering with Table-style position arrows.

    Arrow positions are relative to the first content token (the leading
    [CLS] is not counted).
    """
    def line(ids):
        return " ".join(vocab.tokens[i] for i, pad in
                        zip(ids, instance.pad_mask) if not pad)

    arrows = ", ".join(f"Pos{p - 1} -> Pos{t - 1}"
                       for p, t in zip(instance.pred_positions,
                                       instance.position_targets))
    return "\n".join([
        f"original: {line(instance.original_ids)}",
        f"permuted: {line(instance.input_ids)}",
        f"targets:  {arrows if arrows else '(none)'}",
    ])


def parse_arrows(rendering: str) -> dict[int, int]:
    """Invert render_instance's target line back to instance coordinates."""
    for line in rendering.splitlines():
        if line.startswith("targets:"):
            body = line[len("targets:"):].strip()
            if body == "(none)":
                return {}
            out = {}
            for arrow in body.split(", "):
                left, _, right = arrow.partition(" -> ")
                out[int(left[len("Pos"):]) + 1] = int(right[len("Pos"):]) + 1
            return out
    raise ValueError("rendering has no targets line")


def cmd_inspect(args) -> int:
    vocab = load_vocab(args.vocab)
    instances = read_instances(args.instances)
    if not 0 <= args.index < len(instances):
        raise IndexError(
            f"index {args.index} out of range for {len(instances)} instances")
    print(f"instance {args.index} of {args.instances}")
    print(render_instance(instances[args.index], vocab))
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out or "report")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    configs = {}
    for path in args.metrics:
        records = read_metrics(path)
        if not records:
            raise EvaluationError(f"metrics file {path} is empty")
        label = Path(path).parent.name or Path(path).stem
        if any(r["label"] == label for r in rows):
            label = f"{label}-{len(rows)}"
        first = records[0]
        config_path = Path(path).parent / "config.json"
        if config_path.exists():
            with open(config_path, encoding="utf-8") as handle:
                flat = json.load(handle)
            configs[label] = {k: v for k, v in flat.items()
                              if k.startswith(("model.", "masking."))}
        series_path = out_dir / f"{label}.csv"
        with open(series_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss", "position_accuracy",
                             "learning_rate", "loss_delta", "accuracy_delta"])
            for rec in records:
                writer.writerow([rec.step, rec.loss, rec.position_accuracy,
                                 rec.learning_rate, rec.loss - first.loss,
                                 rec.position_accuracy - first.position_accuracy])
        last = records[-1]
        rows.append({"label": label, "records": len(records),
                     "final_step": last.step,
                     "loss_delta": last.loss - first.loss,
                     "accuracy_delta": last.position_accuracy - first.position_accuracy,
                     "series": str(series_path)})
    if len({json.dumps(c, sort_keys=True) for c in configs.values()}) > 1:
        _stderr("warning: metrics files come from runs with different "
                "model/masking configs; rows are not directly comparable")
    header = f"{'run':<24} {'records':>8} {'final step':>11} " \
             f"{'loss delta':>11} {'acc delta':>10}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(f"{row['label']:<24} {row['records']:>8} {row['final_step']:>11} "
              f"{row['loss_delta']:>11.4f} {row['accuracy_delta']:>10.4f}")
    return 0


# -- wiring ---------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="perlm",
                    description="Permuted-language-model pre-training laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="turn a corpus into training instances")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--pre-segmented", action="store_true",
                   help="corpus words are already space-separated")
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--dupe-factor", type=int, default=1,
                   help="instances generated per document")
    add_config_options(p, steps_flag=False)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="run the pre-training loop")
    p.add_argument("--train-instances")
    p.add_argument("--eval-instances")
    add_config_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="run an ablation suite end to end")
    p.add_argument("--suite", default="all",
                   choices=sorted(ABLATION_SUITES) + ["all"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--pre-segmented", action="store_true")
    p.add_argument("--dupe-factor", type=int, default=1)
    add_config_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("wor-corrupt", help="build a word-order-recovery corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="optional; splits words into pieces")
    p.add_argument("--pre-segmented", action="store_true")
    p.add_argument("--max-spans", type=int, default=1)
    p.add_argument("--max-extent", type=int, default=3)
    add_config_options(p, steps_flag=False)
    p.set_defaults(func=cmd_wor_corrupt)

    p = sub.add_parser("wor-train", help="fine-tune the order-recovery tagger")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", help="pre-training checkpoint prefix")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=20)
    add_config_options(p)
    p.set_defaults(func=cmd_wor_train)

    p = sub.add_parser("wor-eval", help="span precision/recall/F1 of a tagger")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--tagger", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_wor_eval)

    p = sub.add_parser("inspect", help="render one instance with its arrows")
    p.add_argument("--instances", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="tabulate metrics files and emit series")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _stderr(f"usage error: {exc}")
        return USAGE_EXIT
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        _stderr(f"training diverged: {exc}")
        return DIVERGENCE_EXIT
    except ConfigurationError as exc:
        _stderr(f"configuration error: {exc}")
        return USAGE_EXIT
    except (VocabFormatError, InstanceParseError, InstanceCorruptionError,
            LabelEncodingError, EvaluationError, IndexError) as exc:
        _stderr(f"data error: {exc}")
        return DATA_EXIT
    except OSError as exc:
        _stderr(f"I/O error: {exc}")
        return DATA_EXIT
    except PerlmError as exc:
        _stderr(f"error: {exc}")
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
