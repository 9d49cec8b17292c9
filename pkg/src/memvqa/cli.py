"""Command line entry point: gen-synth, train, eval, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import autograd as ag
from .coattention import attention_record
from .data import (
    AnswerVocab, DatasetError, SynthTaskConfig, build_vocab, generate_synth_task, load_manifest,
    parse_dataset, read_questions,
)
from .encoders import FeatureGridError, Vocabulary
from .mann import trace_record
from .model import forward, tensors, views
from .training import Checkpoint, TrainConfig, TrainingError, VocabMismatchError, evaluate, train
from .training import run_inference

log = logging.getLogger("memvqa")

METRICS_SCHEMA = {
    "type": "object",
    "required": ["mode", "split", "n", "accuracy", "per_type", "fallbacks"],
    "properties": {
        "mode": {"enum": ["open-ended", "multiple-choice"]},
        "split": {"type": "string"},
        "n": {"type": "integer", "minimum": 0},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "per_type": {"type": "object", "additionalProperties": {"type": "number"}},
        "fallbacks": {"type": "integer", "minimum": 0},
        "rare_accuracy": {"type": ["number", "null"]},
        "rare_n": {"type": "integer"},
    },
}


class UsageError(Exception):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    out = Path(args.out)
    _prepare_out(out, args.force)
    config = SynthTaskConfig(
        classes=args.classes, zipf=args.zipf, vocab_size=args.vocab_size, regions=args.regions,
        feature_dim=args.feature_dim, n_train=args.n_train, n_test=args.n_test, seed=args.seed,
        signal=args.signal, noise=args.noise, distractors=args.distractors,
        question_types=args.question_types,
    )
    manifest = generate_synth_task(config, out)
    print(f"wrote {config.n_train} train / {config.n_test} test examples, "
          f"{len(manifest['class_names'])} classes to {out}")


def _data_dir(path) -> Path:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist")
    return d


def _split_file(data: Path, split: str) -> Path:
    path = data / f"{split}.jsonl"
    if not path.exists():
        raise UsageError(f"no {split} split in {data} (expected {path.name})")
    return path


def _resolve_config(args) -> TrainConfig:
    raw = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise UsageError(f"config file {cfg_path} does not exist")
        raw = json.loads(cfg_path.read_text())
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            raw[f.name] = value
    if args.no_external_memory:
        raw["external_memory_enabled"] = False
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_train(args):
    data = _data_dir(args.data)
    config = _resolve_config(args)
    train_path = _split_file(data, "train")
    out = Path(args.out)
    _prepare_out(out, args.force)
    rows = read_questions(train_path)
    vocab_file = data / "vocab.json"
    if vocab_file.exists():
        answer_vocab = AnswerVocab.from_json(json.loads(vocab_file.read_text()))
    else:
        answer_vocab = build_vocab([r["answers"] for r in rows], config.vocab_k)
    word_vocab = Vocabulary.from_questions(r["question"] for r in rows)
    records = parse_dataset(train_path, data / "features", answer_vocab, word_vocab)
    _write_json(out / "config.json", asdict(config))
    _write_json(out / "vocab.json", answer_vocab.to_json())

    with open(out / "metrics.jsonl", "w") as metrics_fh:
        trace_fh = open(args.memory_trace, "w") if args.memory_trace else None
        try:
            ckpt = train(
                config, records, answer_vocab, word_vocab,
                metrics_sink=lambda row: metrics_fh.write(json.dumps(row, sort_keys=True) + "\n"),
                trace_sink=(lambda row: trace_fh.write(json.dumps(row) + "\n")) if trace_fh else None,
            )
        finally:
            if trace_fh:
                trace_fh.close()
    ckpt.save(out / "checkpoint")
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained {ckpt.epoch} epochs ({ckpt.step} steps); final loss "
          f"{last.get('loss', float('nan')):.4f}, train_acc {last.get('train_acc', 0):.3f}")


def _load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if (p / "checkpoint" / "manifest.json").exists():
        p = p / "checkpoint"
    if not (p / "manifest.json").exists():
        raise UsageError(f"no checkpoint found at {path}")
    return Checkpoint.load(p)


def _dataset_vocab(data: Path):
    f = data / "vocab.json"
    return AnswerVocab.from_json(json.loads(f.read_text())) if f.exists() else None


def cmd_eval(args):
    data = _data_dir(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    split_path = _split_file(data, args.split)
    records = parse_dataset(split_path, data / "features", ckpt.answer_vocab, ckpt.word_vocab)
    if args.mode == "multiple-choice" and any(not r.multiple_choices for r in records):
        raise UsageError("--mode multiple-choice needs candidate answers on every question")
    manifest = load_manifest(data)
    rare = None
    if manifest is not None:
        rare = [manifest["class_names"][i] for i in manifest["rare_class_ids"]]
    metrics, preds = evaluate(ckpt, records, args.mode, answer_vocab=_dataset_vocab(data),
                              rare_answers=rare)
    metrics["split"] = args.split
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.predictions:
        with open(args.predictions, "w") as fh:
            for row in preds:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_inspect(args):
    data = _data_dir(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    records = parse_dataset(_split_file(data, args.split), data / "features",
                            ckpt.answer_vocab, ckpt.word_vocab)
    if args.question_id:
        by_id = {r.question_id: r for r in records}
        missing = [q for q in args.question_id if q not in by_id]
        if missing:
            shown = sorted(by_id)[:20]
            raise UsageError(f"unknown question_id {missing}; available ids include {shown}"
                             + (" ..." if len(by_id) > 20 else ""))
        records = [by_id[q] for q in args.question_id]
    else:
        records = records[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attention, trace = [], []
    def on_example(rec, res):
        attention.append(attention_record(rec.question_id, res.coatt, top_k=3))

    for _ in run_inference(ckpt, records, on_example):
        pass
    if ckpt.config.external_memory_enabled:
        # replay the same examples with writes enabled to expose the addressing
        p = views(tensors(ckpt.params), ckpt.dims)
        state = ckpt.state.copy()
        dtype = ag.DTYPES[ckpt.dims.dtype]
        for step, rec in enumerate(records, 1):
            res = forward(rec.grid.astype(dtype, copy=False), rec.question_tokens, state, p)
            state = res.state
            trace.append(trace_record(step, state))
    with open(out / "attention.jsonl", "w") as fh:
        for row in attention:
            fh.write(json.dumps(row) + "\n")
    with open(out / "memory_trace.jsonl", "w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(attention)} attention records and {len(trace)} memory trace rows to {out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memvqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic heavy-tailed dataset")
    g.add_argument("--classes", type=_positive_int, default=50)
    g.add_argument("--zipf", type=_positive_float, default=1.2)
    g.add_argument("--vocab-size", type=_positive_int, default=24)
    g.add_argument("--regions", type=_positive_int, default=16)
    g.add_argument("--feature-dim", type=_positive_int, default=64)
    g.add_argument("--n-train", type=_positive_int, default=5000)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--signal", type=_positive_float, default=1.0)
    g.add_argument("--noise", type=_positive_float, default=1.0)
    g.add_argument("--distractors", type=int, default=2)
    g.add_argument("--question-types", type=_positive_int, default=4)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-external-memory", action="store_true",
                   help="ablation arm: the head sees [h, 0]")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden-size", dest="hidden_size", type=_positive_int)
    t.add_argument("--memory-slots", dest="memory_slots", type=_positive_int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--memory-reset", dest="memory_reset", choices=["never", "epoch"])
    t.add_argument("--memory-trace", help="write per-step memory weights as JSON lines")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=["open-ended", "multiple-choice"], default="open-ended")
    e.add_argument("--out", help="metrics JSON path")
    e.add_argument("--predictions", help="prediction records (JSON lines)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump attention weights and memory traces")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--question-id", type=int, action="append")
    i.add_argument("--limit", type=_positive_int, default=10)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"memvqa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, VocabMismatchError, DatasetError, FeatureGridError, OSError,
            ValueError) as exc:
        print(f"memvqa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
