"""Optimisation loop, checkpoints and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .answer import argmax, loss as nll, select_multiple_choice
from .autograd import Graph
from .data import AnswerVocab, ExampleRecord, vqa_accuracy
from .encoders import Vocabulary
from .mann import MemoryState, trace_record
from .model import (
    ModelDims, ParamStore, forward, init_params, is_question_param, new_state, tensors, views,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class VocabMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_question: float = 3e-3
    lr_answer: float = 3e-4
    lr_decay_per_epoch: float = 0.9
    clip_magnitude: float = 0.1
    clip_mode: str = "global"  # or "element"
    gamma: float = 1e-4
    truncation_n: int = 4
    hidden_size: int = 64
    epochs: int = 10
    seed: int = 0
    external_memory_enabled: bool = True
    memory_slots: int = 128
    vocab_k: int = 1000
    noise_eta: float = 0.01
    noise_decay: float = 0.55
    memory_reset: str = "never"  # or "epoch"
    memory_erase: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.lr_question, self.lr_answer, self.clip_magnitude) <= 0:
            raise ValueError("learning rates and clip magnitude must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.clip_mode not in ("global", "element"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")
        if self.memory_reset not in ("never", "epoch"):
            raise ValueError(f"unknown memory_reset {self.memory_reset!r}")
        if self.dtype not in ag.DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.epochs < 0 or self.hidden_size < 1 or self.memory_slots < 1 or self.vocab_k < 1:
            raise ValueError("epochs, hidden_size, memory_slots and vocab_k must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# update rules


def adam_step(params: dict, grads: dict, moments: dict, lr, t: int) -> None:
    """In-place Adam update with bias correction.

    ``moments`` maps name -> (m, v); missing entries start at zero. ``lr`` is
    a float or a callable name -> float.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {t}")
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m, v = moments.get(name) or (np.zeros_like(p), np.zeros_like(p))
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        moments[name] = (m, v)
        rate = lr(name) if callable(lr) else lr
        p -= (rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, max_magnitude: float, mode: str = "global") -> dict:
    if max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    if mode == "element":
        return {k: np.clip(g, -max_magnitude, max_magnitude) for k, g in grads.items()}
    norm = global_norm(grads)
    if norm <= max_magnitude:
        return grads
    scale = max_magnitude / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


def noise_variance(step: int, eta: float = 0.01, decay: float = 0.55) -> float:
    return eta / (1.0 + step) ** decay


def add_gradient_noise(grads: dict, step: int, seed: int, eta: float = 0.01,
                       decay: float = 0.55) -> dict:
    """Annealed Gaussian gradient noise, reproducible from ``(seed, step)``."""
    if step < 1:
        raise ValueError("noise step counter starts at 1")
    rng = np.random.default_rng([seed, step])
    std = math.sqrt(noise_variance(step, eta, decay))
    out = {}
    for k in sorted(grads):
        g = grads[k]
        dt = g.dtype if g.dtype in (np.float32, np.float64) else np.float64
        out[k] = (g + std * rng.standard_normal(g.shape, dtype=dt)).astype(g.dtype, copy=False)
    return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    dims: ModelDims
    params: dict
    moments: dict
    state: MemoryState
    answer_vocab: AnswerVocab
    word_vocab: Vocabulary
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "tensors").mkdir(parents=True, exist_ok=True)
        files = {}

        def put(key, arr):
            arr = np.asarray(arr)
            fname = f"{key}.bin"
            (out / "tensors" / fname).write_bytes(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
            files[key] = {"file": f"tensors/{fname}", "shape": list(arr.shape), "dtype": arr.dtype.name}

        for name, arr in sorted(self.params.items()):
            put(f"param.{name}", arr)
        for name, (m, v) in sorted(self.moments.items()):
            put(f"adam_m.{name}", m)
            put(f"adam_v.{name}", v)
        for name, arr in self.state.arrays().items():
            put(f"state.{name}", arr)
        manifest = {
            "config": asdict(self.config),
            "dims": asdict(self.dims),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
            "answer_vocab": self.answer_vocab.to_json(),
            "word_vocab": self.word_vocab.to_json(),
            "tensors": files,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, ckpt_dir) -> "Checkpoint":
        root = Path(ckpt_dir)
        manifest = json.loads((root / "manifest.json").read_text())
        arrays = {}
        for key, spec in manifest["tensors"].items():
            dtype = np.dtype(spec["dtype"]).newbyteorder("<")
            raw = np.frombuffer((root / spec["file"]).read_bytes(), dtype=dtype)
            arrays[key] = raw.reshape(spec["shape"]).astype(np.dtype(spec["dtype"]))

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        m, v = group("adam_m."), group("adam_v.")
        return cls(
            config=TrainConfig.from_dict(manifest["config"]),
            dims=ModelDims(**manifest["dims"]),
            params=group("param."),
            moments={k: (m[k], v[k]) for k in m},
            state=MemoryState.from_arrays(group("state.")),
            answer_vocab=AnswerVocab.from_json(manifest["answer_vocab"]),
            word_vocab=Vocabulary.from_json(manifest["word_vocab"]),
            epoch=manifest["epoch"],
            step=manifest["step"],
            history=manifest["history"],
        )


# ---------------------------------------------------------------------------
# training


def make_dims(config: TrainConfig, feature_dim: int, vocab_size: int, classes: int) -> ModelDims:
    return ModelDims(
        vocab_size=vocab_size,
        feature_dim=feature_dim,
        hidden=config.hidden_size,
        classes=classes,
        slots=config.memory_slots,
        gamma=config.gamma,
        truncation_n=config.truncation_n,
        memory_erase=config.memory_erase,
        dtype=config.dtype,
    )


def train(config: TrainConfig, records: list[ExampleRecord], answer_vocab: AnswerVocab,
          word_vocab: Vocabulary, metrics_sink=None, trace_sink=None) -> Checkpoint:
    """Train on the labeled records with batch size 1.

    ``metrics_sink`` / ``trace_sink`` receive one dict per epoch / per step.
    """
    labeled = [r for r in records if r.label_index is not None]
    if not labeled:
        raise TrainingError("no labeled examples to train on")
    dtype = ag.DTYPES[config.dtype]
    dims = make_dims(config, labeled[0].grid.shape[1], len(word_vocab), len(answer_vocab))
    store = ParamStore(init_params(dims, config.seed))
    question_mask = store.mask(is_question_param)
    grids = {id(r.grid): r.grid.astype(dtype, copy=False) for r in labeled}
    moments: dict = {}
    state = new_state(dims)
    history = []
    order_rng = np.random.default_rng([config.seed, 1])
    step = 0
    for epoch in range(1, config.epochs + 1):
        decay = config.lr_decay_per_epoch ** (epoch - 1)
        lr_q, lr_a = config.lr_question * decay, config.lr_answer * decay
        lr = np.where(question_mask, lr_q, lr_a).astype(dtype)
        if config.memory_reset == "epoch" and epoch > 1:
            state = new_state(dims)
        total, correct = 0.0, 0
        for i in order_rng.permutation(len(labeled)):
            rec = labeled[i]
            step += 1
            with Graph() as g:
                res = forward(grids[id(rec.grid)], rec.question_tokens, state,
                              views(tensors(store.values, g), dims),
                              memory=config.external_memory_enabled)
                loss = nll(res.probs, rec.label_index)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step} (question {rec.question_id})"
                )
            flat = store.flatten(ag.backward(g, loss))
            if not np.isfinite(flat).all():
                raise TrainingError(
                    f"non-finite gradient for {store.locate_nonfinite(flat)} at step {step}"
                )
            flat = add_gradient_noise({"all": flat}, step, config.seed,
                                      config.noise_eta, config.noise_decay)["all"]
            flat = clip_gradients({"all": flat}, config.clip_magnitude, config.clip_mode)["all"]
            adam_step({"all": store.flat}, {"all": flat}, moments, lr, step)
            state = res.state.detach()
            total += value
            correct += argmax(res.probs) == rec.label_index
            if trace_sink is not None and config.external_memory_enabled:
                trace_sink(trace_record(step, state))
        row = {
            "epoch": epoch,
            "step": step,
            "loss": total / len(labeled),
            "lr_q": lr_q,
            "lr_a": lr_a,
            "train_acc": correct / len(labeled),
        }
        history.append(row)
        log.info("epoch %d loss %.4f train_acc %.3f", epoch, row["loss"], row["train_acc"])
        if metrics_sink is not None:
            metrics_sink(row)
    m, v = moments.get("all", (np.zeros_like(store.flat), np.zeros_like(store.flat)))
    per_name = {n: (store.slice(m, n).copy(), store.slice(v, n).copy()) for n in store.layout}
    params = {n: a.copy() for n, a in store.values.items()}
    return Checkpoint(config, dims, params, per_name, state, answer_vocab, word_vocab,
                      epoch=config.epochs, step=step, history=history)


# ---------------------------------------------------------------------------
# evaluation


def run_inference(ckpt: Checkpoint, records, on_example=None):
    """Forward every record in order with read-only memory; yields probabilities."""
    dtype = ag.DTYPES[ckpt.dims.dtype]
    p = views(tensors(ckpt.params), ckpt.dims)
    state = ckpt.state.copy()
    mem = ckpt.config.external_memory_enabled
    for rec in records:
        res = forward(rec.grid.astype(dtype, copy=False), rec.question_tokens, state, p,
                      memory=mem, write=False)
        state = res.state
        if on_example is not None:
            on_example(rec, res)
        yield res.probs.data


def evaluate(ckpt: Checkpoint, records: list[ExampleRecord], mode: str = "open-ended",
             answer_vocab: AnswerVocab | None = None, rare_answers=None):
    """Return ``(metrics, predictions)``.

    Overall accuracy is the mean per-example VQA accuracy. Per-type accuracy
    is reported when records carry a question type, rare-class accuracy when
    ``rare_answers`` is given.
    """
    if mode not in ("open-ended", "multiple-choice"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if answer_vocab is not None and not answer_vocab.same_answers(ckpt.answer_vocab):
        raise VocabMismatchError("dataset answer vocabulary differs from the checkpoint's")
    if mode == "multiple-choice" and any(not r.multiple_choices for r in records):
        raise ValueError("multiple-choice evaluation needs candidates on every record")
    vocab = ckpt.answer_vocab
    rare = set(rare_answers) if rare_answers is not None else None
    preds, accs = [], []
    by_type: dict = {}
    rare_accs = []
    fallbacks = 0
    for rec, probs in zip(records, run_inference(ckpt, records)):
        if mode == "multiple-choice":
            answer, prob, used = select_multiple_choice(probs, rec.multiple_choices, vocab)
            fallbacks += not used
        else:
            k = argmax(probs)
            answer, prob, used = vocab.answers[k], float(probs[k]), False
        acc = vqa_accuracy(answer, rec.human_answers)
        accs.append(acc)
        if rec.question_type is not None:
            by_type.setdefault(rec.question_type, []).append(acc)
        if rare is not None and rec.answer in rare:
            rare_accs.append(acc)
        preds.append({"question_id": rec.question_id, "answer": answer, "prob": prob,
                      "candidates_used": used})
    metrics = {
        "mode": mode,
        "n": len(accs),
        "accuracy": float(np.mean(accs)) if accs else 0.0,
        "per_type": {k: float(np.mean(v)) for k, v in sorted(by_type.items())},
        "fallbacks": fallbacks,
    }
    if rare is not None:
        metrics["rare_accuracy"] = float(np.mean(rare_accs)) if rare_accs else None
        metrics["rare_n"] = len(rare_accs)
    return metrics, preds
