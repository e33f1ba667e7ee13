"""Command-line interface: synth, train, refine, eval, analyze.

Every training run writes a resolved-config snapshot, the best-d1
checkpoint, and a machine-parsable run log into its output directory.
CLI flags override values from an optional `key = value` config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .corpus import (DEFAULT_TEMPLATES, Vocabulary, load_dataset, read_pairs,
                     split_corpus, synth_corpus, write_pairs)
from .errors import FaceforgeError
from .frequency import FrequencyTable
from .losses import LOSS_NAMES
from .training import TrainConfig, analyze, evaluate, refine, train


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat `key = value` config file")
    p.add_argument("--loss", choices=sorted(LOSS_NAMES))
    p.add_argument("--freq-mode", choices=["gt", "output"])
    p.add_argument("--weight-mode", choices=["pre", "post"])
    p.add_argument("--beta", type=float)
    p.add_argument("--entropy-floor", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--scheduler-factor", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--plateau-threshold", type=float)
    p.add_argument("--early-stop-reductions", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--embed-size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-decode-len", type=int)
    p.add_argument("--valid-cap", type=int)
    p.add_argument("--decode-batch-size", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--filter-stage", choices=["before", "after"])
    p.add_argument("--resume-optimizer", action="store_true", default=None)
    p.add_argument("--allow-scratch-variants", action="store_true", default=None)


def _resolve_config(args: argparse.Namespace, **forced) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        config = TrainConfig.from_file(args.config, base=config)
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for name in field_names:
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            setattr(config, name, cli_value)
    for name, value in forced.items():
        setattr(config, name, value)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceforge",
        description="Frequency-aware cross-entropy training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a Zipf-skewed synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=5000)
    p.add_argument("--exponent", type=float, default=1.3)
    p.add_argument("--fidelity", type=float, default=0.15)
    p.add_argument("--templates", help="TSV file of message/response templates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--valid-frac", type=float, default=0.05)
    p.add_argument("--test-frac", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from scratch (CE by default)")
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--valid", dest="valid_path", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab", dest="vocab_path", help="reuse an existing vocabulary")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="fine-tune a checkpoint with a loss variant")
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--valid", dest="valid_path", required=True)
    p.add_argument("--checkpoint", dest="checkpoint_path", required=True)
    p.add_argument("--vocab", dest="vocab_path", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="decode a test set and report d-1/d-2/BLEU")
    p.add_argument("--checkpoint", dest="checkpoint_path", required=True)
    p.add_argument("--test", dest="test_path", required=True)
    p.add_argument("--vocab", dest="vocab_path", required=True)
    p.add_argument("--out", help="directory for responses and report files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="rank tables and frequency/weight dump")
    p.add_argument("--responses", help="file of decoded responses, one per line")
    p.add_argument("--checkpoint", dest="checkpoint_path",
                   help="decode this checkpoint instead of reading responses")
    p.add_argument("--data", dest="test_path", help="pairs to decode with --checkpoint")
    p.add_argument("--vocab", dest="vocab_path")
    p.add_argument("--after", action="append", default=[],
                   help="also rank tokens following this token (repeatable)")
    p.add_argument("--freq-dump", help="token<TAB>count table for the weight dump")
    p.add_argument("--top-k", type=int, default=20)
    _add_config_flags(p)
    p.set_defaults(func=cmd_analyze)

    return parser


def cmd_synth(args) -> int:
    templates = read_pairs(args.templates) if args.templates else DEFAULT_TEMPLATES
    pairs = synth_corpus(templates, exponent=args.exponent, size=args.size,
                         seed=args.seed, fidelity=args.fidelity)
    train_split, valid_split, test_split = split_corpus(
        pairs, args.valid_frac, args.test_frac, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(out / "train.tsv", train_split)
    write_pairs(out / "valid.tsv", valid_split)
    write_pairs(out / "test.tsv", test_split)
    print(f"wrote {len(train_split)}/{len(valid_split)}/{len(test_split)} "
          f"train/valid/test pairs to {out}")
    return 0


def _load_vocab_and_data(config: TrainConfig, build_from_train: bool,
                         out: Path | None):
    if config.vocab_path:
        vocab = Vocabulary.load(config.vocab_path)
    elif build_from_train:
        lines = [f"{m}\t{r}".replace("\t", " ")
                 for m, r in read_pairs(config.train_path)]
        vocab = Vocabulary.build(lines, config.vocab_size)
        if out is not None:
            vocab.save(out / "vocab.txt")
            config.vocab_path = str(out / "vocab.txt")
    else:
        raise FaceforgeError("--vocab is required here")
    return vocab


def cmd_train(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = _load_vocab_and_data(config, build_from_train=True, out=out)
    train_pairs = load_dataset(config.train_path, vocab, config.min_len,
                               config.filter_stage)
    valid_pairs = load_dataset(config.valid_path, vocab, config.min_len,
                               config.filter_stage)
    outcome = train(config, train_pairs, valid_pairs, out_dir=out, vocab=vocab)
    print(f"best validation d-1: {outcome.best_d1:.6f}")
    print(f"checkpoint: {outcome.checkpoint}")
    return 0


def cmd_refine(args) -> int:
    config = _resolve_config(args)
    if config.loss == "ce" and args.loss is None and not args.config:
        config.loss = "face-opr"
    if args.batch_size is None:
        config.batch_size = 30
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.load(config.vocab_path)
    train_pairs = load_dataset(config.train_path, vocab, config.min_len,
                               config.filter_stage)
    valid_pairs = load_dataset(config.valid_path, vocab, config.min_len,
                               config.filter_stage)
    outcome = refine(config, config.checkpoint_path, train_pairs, valid_pairs,
                     out_dir=out, vocab=vocab)
    print(f"best validation d-1: {outcome.best_d1:.6f}")
    print(f"checkpoint: {outcome.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    vocab = Vocabulary.load(config.vocab_path)
    test_pairs = load_dataset(config.test_path, vocab, config.min_len,
                              config.filter_stage)
    report, _ = evaluate(config.checkpoint_path, test_pairs, vocab, config,
                         out_dir=args.out)
    print(report.as_text(), end="")
    return 0


def cmd_analyze(args) -> int:
    config = _resolve_config(args)
    if args.responses:
        with open(args.responses, encoding="utf-8") as f:
            responses = [line.rstrip("\n").split() for line in f]
        responses = [r for r in responses if r]
    elif config.checkpoint_path and config.test_path and config.vocab_path:
        vocab = Vocabulary.load(config.vocab_path)
        test_pairs = load_dataset(config.test_path, vocab)
        _, responses = evaluate(config.checkpoint_path, test_pairs, vocab, config)
        responses = [r for r in responses if r]
    else:
        raise FaceforgeError(
            "analyze needs --responses, or --checkpoint with --data and --vocab")
    freq_table = None
    vocab = None
    if args.freq_dump:
        if not config.vocab_path:
            raise FaceforgeError("--freq-dump needs --vocab")
        vocab = Vocabulary.load(config.vocab_path)
        freq_table = FrequencyTable.from_dump(args.freq_dump, vocab)
    result = analyze(responses, after=args.after, freq_table=freq_table,
                     vocab=vocab, top_k=args.top_k)
    print(result.format(), end="")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FaceforgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
