"""Command-line interface.

Subcommands: gen-data, pretrain, select-heads, adapt, eval,
inspect-attention. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, guidance, synthtask, training
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, Seq2SeqModel, Vocabulary, extract_attention
from .numerics import no_grad

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    return training.parse_config_file(path)


def _build_synth_spec(values: dict[str, str], seed: int | None) -> synthtask.SynthSpec:
    known = {f.name: f.default for f in dc_fields(synthtask.SynthSpec)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            continue
        try:
            kwargs[key] = type(known[key])(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    if seed is not None:
        kwargs["seed"] = seed
    return synthtask.SynthSpec(**kwargs)


def cmd_gen_data(args) -> int:
    values = _load_config(args.spec)
    spec = _build_synth_spec(values, args.seed)
    sizes = dict(synthtask.SPLIT_SIZES)
    for split in sizes:
        key = "n_" + split.replace("-", "_")
        if key in values:
            sizes[split] = int(values[key])
    vocab = Vocabulary.build(spec.words_per_language, spec.words_per_language)
    corpus = synthtask.generate_corpus(spec, vocab, sizes)
    synthtask.write_corpus(args.out, spec, vocab, corpus)
    for split, utts in corpus.items():
        print(f"{split}: {len(utts)} utterances")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    values = _load_config(args.config)
    cfg = training.build_train_config(values, {"seed": args.seed})
    model_cfg = training.build_model_config(values)
    _, vocab, pretrain_utts = synthtask.read_split(args.data, "pretrain")
    _, _, valid_utts = synthtask.read_split(args.data, "valid")
    model = Seq2SeqModel(model_cfg, vocab, seed=cfg.seed)
    report = training.pretrain_backbone(model, pretrain_utts, valid_utts, cfg)
    checkpoint.save_model(args.out, model)
    print(f"monolingual accuracy: {report.mono_accuracy:.4f}")
    print(f"code-switched accuracy: {report.cs_accuracy:.4f}")
    print(f"saved backbone to {args.out}")
    return EXIT_OK


def cmd_select_heads(args) -> int:
    model = checkpoint.load_model(args.backbone)
    _, _, utts = synthtask.read_split(args.data, "adapt")
    if args.strategy == "random":
        base = training.select_heads(model, utts, top_k=0)
        selection = guidance.select_random_heads(
            base.counts, base.dataset_size, args.fraction, seed=args.seed or 0)
    elif args.strategy == "all":
        n_heads = model.config.dec_layers * model.config.heads
        selection = training.select_heads(model, utts, top_k=n_heads)
    else:
        selection = training.select_heads(model, utts, fraction=args.fraction)
    guidance.save_head_selection(args.out, selection)
    print(f"dataset size: {selection.dataset_size}")
    print(f"qualifying heads: {len(selection.qualifying)}")
    print(f"selected heads: {selection.selected}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    values = _load_config(args.config)
    cfg = training.build_train_config(values, {"mode": args.mode, "seed": args.seed})
    model = checkpoint.load_model(args.backbone)
    if model.has_adapters:
        raise DataError("backbone checkpoint already contains adapters")
    _, _, train_utts = synthtask.read_split(args.data, "adapt")
    _, _, valid_utts = synthtask.read_split(args.data, "valid")
    selection = None
    if args.heads is not None:
        selection = guidance.load_head_selection(args.heads)
    model.init_adapters(seed=cfg.seed + 1)
    records = training.run_adaptation(model, train_utts, valid_utts, cfg, selection)
    checkpoint.save_model(args.out, model)
    for record in records:
        last = record.epochs[-1]
        print(f"{record.stage}: train_ce={last.train_ce:.4f} "
              f"train_ag={last.train_ag:.6f} val_ce={last.val_ce:.4f}")
    print(f"saved adapted model to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = checkpoint.load_model(args.model)
    sets = {}
    for split in ("test-mono-a", "test-mono-b", "test-cs"):
        _, _, utts = synthtask.read_split(args.data, split)
        sets[split] = utts
    selection = None
    if args.heads is not None:
        selection = guidance.load_head_selection(args.heads)
    report = training.evaluate_model(model, sets, selection=selection)
    lines = ["set,metric,value"]
    for name, metric, value in report.rows():
        lines.append(f"{name},{metric},{value:.4f}")
    Path(args.report).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines[1:]:
        print(line)
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    model = checkpoint.load_model(args.model)
    found = None
    for split in ("test-cs", "test-mono-a", "test-mono-b", "valid", "adapt", "pretrain"):
        try:
            _, _, utts = synthtask.read_split(args.data, split)
        except DataError:
            continue
        for utt in utts:
            if utt.uid == args.utterance:
                found = utt
                break
        if found:
            break
    if found is None:
        raise DataError(f"utterance {args.utterance!r} not found under {args.data}")
    if not (0 <= args.layer < model.config.dec_layers):
        raise ConfigError(f"layer {args.layer} out of range")
    if not (0 <= args.head < model.config.heads):
        raise ConfigError(f"head {args.head} out of range")
    with no_grad():
        out = model.forward(found.frames[None], np.asarray(found.reference.ids)[None])
    maps = extract_attention(out)
    tokens = [model.vocab.string(t) for t in found.reference.ids]
    analysis.export_heatmap(maps[(args.layer, args.head)], args.out,
                            args.format, tokens)
    print(f"wrote {args.format} heatmap to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agadapt",
        description="Attention-guided adapter adaptation on a synthetic bilingual task")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--spec", default=None, help="generator config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and freeze the backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("select-heads", help="rank and select language-ID heads")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.6)
    p.add_argument("--strategy", choices=("top", "all", "random"), default="top")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_select_heads)

    p = sub.add_parser("adapt", help="train adapters over the frozen backbone")
    p.add_argument("--mode", choices=training.MODES, required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--heads", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="error rates and LID attribution on the test sets")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--heads", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-attention", help="export one head's map")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--format", choices=("csv", "pgm"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_attention)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
