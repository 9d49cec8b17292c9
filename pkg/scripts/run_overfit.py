"""Overfit sanity run: a 50-example synthetic set should be memorised.

    python scripts/run_overfit.py --out runs/overfit
"""
import argparse
import json
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

from memvqa.data import SynthTaskConfig, build_vocab, generate_synth_task, parse_dataset, read_questions
from memvqa.encoders import Vocabulary
from memvqa.training import TrainConfig, evaluate, train

SYNTH = SynthTaskConfig(classes=10, zipf=1.2, n_train=50, n_test=0, regions=8, feature_dim=16, seed=0)
# a capacity check: the per-epoch decay is off (0.9 ** 200 would freeze the
# weights long before epoch 200) and the answer-side rate matches the question side
TRAIN = TrainConfig(hidden_size=32, epochs=200, memory_slots=32, seed=0, lr_answer=3e-3,
                    lr_decay_per_epoch=1.0)


def load(data_dir, k):
    rows = read_questions(Path(data_dir) / "train.jsonl")
    answers = build_vocab([r["answers"] for r in rows], k)
    words = Vocabulary.from_questions(r["question"] for r in rows)
    return parse_dataset(Path(data_dir) / "train.jsonl", Path(data_dir) / "features", answers, words), answers, words


def run(synth=SYNTH, config=TRAIN, data_dir=None, log=None):
    """Train on the toy set; returns a summary dict."""
    with tempfile.TemporaryDirectory() as tmp:
        data_dir = Path(data_dir or tmp)
        generate_synth_task(synth, data_dir)
        records, answers, words = load(data_dir, config.vocab_k)
        t0 = time.perf_counter()
        ckpt = train(config, records, answers, words, metrics_sink=log)
        elapsed = time.perf_counter() - t0
        metrics, _ = evaluate(ckpt, records)
    hist = ckpt.history
    reached = next((r["epoch"] for r in hist if r["train_acc"] >= 0.95), None)
    return {
        "final_train_acc": hist[-1]["train_acc"],
        "eval_train_acc": metrics["accuracy"],
        "epoch_reaching_95": reached,
        "seconds": elapsed,
        "losses": [r["loss"] for r in hist],
        "synth": asdict(synth),
        "config": asdict(config),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=TRAIN.epochs)
    args = ap.parse_args()
    cfg = TrainConfig(**{**asdict(TRAIN), "seed": args.seed, "epochs": args.epochs})
    res = run(config=cfg)
    print(f"train acc {res['final_train_acc']:.3f} (eval {res['eval_train_acc']:.3f}), "
          f">=0.95 at epoch {res['epoch_reaching_95']}, {res['seconds']:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "overfit.json").write_text(json.dumps(res, indent=1) + "\n")


if __name__ == "__main__":
    main()
