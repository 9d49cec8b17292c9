"""Question files, answer vocabularies, the VQA accuracy metric, and a
synthetic heavy-tailed task for small-scale ablations."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import FeatureGrid, Vocabulary, load_feature_grid, save_feature_grid

_WS = re.compile(r"\s+")
_TRAILING_PUNCT = re.compile(r"[\s.,!?;:'\"]+$")


def normalize_answer(answer: str) -> str:
    a = _WS.sub(" ", str(answer).lower().strip())
    return _TRAILING_PUNCT.sub("", a)


def plurality_answer(answers) -> str:
    """Most frequent normalized answer; ties go to the lexicographically lowest."""
    counts = Counter(normalize_answer(a) for a in answers)
    if not counts:
        raise ValueError("no answers to choose from")
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def vqa_accuracy(predicted: str, human_answers) -> float:
    """``min(#humans that gave the predicted answer / 3, 1)``."""
    if not human_answers:
        raise ValueError("human_answers must be non-empty")
    pred = normalize_answer(predicted)
    matches = sum(normalize_answer(a) == pred for a in human_answers)
    return min(matches / 3.0, 1.0)


@dataclass
class AnswerVocab:
    answers: list[str]
    counts: list[int]
    coverage: float = 1.0
    total_examples: int = 0

    def __post_init__(self):
        self._index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self):
        return len(self.answers)

    def index(self, answer: str):
        return self._index.get(normalize_answer(answer))

    def to_json(self) -> list[dict]:
        return [{"answer": a, "count": c} for a, c in zip(self.answers, self.counts)]

    @classmethod
    def from_json(cls, items) -> "AnswerVocab":
        return cls([d["answer"] for d in items], [int(d["count"]) for d in items])

    def same_answers(self, other: "AnswerVocab") -> bool:
        return self.answers == other.answers


def build_vocab(corpus, k: int) -> AnswerVocab:
    """Keep the ``k`` most frequent answers (count desc, then lexicographic).

    ``corpus`` holds one entry per example: either an answer string or the
    list of human answers, in which case the plurality answer counts.
    Coverage is the fraction of examples whose answer survives the cut.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = Counter()
    n = 0
    for entry in corpus:
        ans = normalize_answer(entry) if isinstance(entry, str) else plurality_answer(entry)
        counts[ans] += 1
        n += 1
    if n == 0:
        raise ValueError("empty answer corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    kept = sum(c for _, c in ranked)
    return AnswerVocab([a for a, _ in ranked], [c for _, c in ranked], kept / n, n)


# ---------------------------------------------------------------------------
# datasets on disk


class DatasetError(ValueError):
    pass


@dataclass
class ExampleRecord:
    question_id: int
    image_id: str
    question: str
    question_tokens: list[int]
    human_answers: list[str]
    label_index: int | None
    multiple_choices: list[str] | None = None
    question_type: str | None = None
    grid: np.ndarray | None = field(default=None, repr=False)

    @property
    def answer(self) -> str:
        return plurality_answer(self.human_answers)


def read_questions(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                int(row["question_id"]), str(row["image_id"]), str(row["question"])
                if not isinstance(row["answers"], list) or not row["answers"]:
                    raise ValueError("answers must be a non-empty list")
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed question record ({exc})") from None
            rows.append(row)
    return rows


def parse_dataset(questions_path, features_dir, vocab: AnswerVocab, word_vocab: Vocabulary,
                  grid_cache: dict | None = None) -> list[ExampleRecord]:
    """Load question records and their feature grids.

    Records whose plurality answer is outside ``vocab`` keep ``label_index``
    as None: they are skipped in training but still evaluated.
    """
    features_dir = Path(features_dir)
    cache = {} if grid_cache is None else grid_cache
    records = []
    for row in read_questions(questions_path):
        image_id = str(row["image_id"])
        if image_id not in cache:
            path = features_dir / f"{image_id}.grid"
            if not path.exists():
                raise DatasetError(f"missing feature file for image_id {image_id!r} ({path})")
            cache[image_id] = load_feature_grid(path).regions
        tokens = word_vocab.encode(row["question"])
        if not tokens:
            tokens = [word_vocab.unknown_index]
        label = vocab.index(plurality_answer(row["answers"]))
        records.append(ExampleRecord(
            question_id=int(row["question_id"]),
            image_id=image_id,
            question=row["question"],
            question_tokens=tokens,
            human_answers=[str(a) for a in row["answers"]],
            label_index=label,
            multiple_choices=row.get("multiple_choices"),
            question_type=row.get("question_type"),
            grid=cache[image_id],
        ))
    return records


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic heavy-tailed task

QUESTION_TEMPLATES = [
    "what color {w}",
    "which kind {w}",
    "what material {w}",
    "which sport {w}",
]


@dataclass
class SynthTaskConfig:
    classes: int = 50
    zipf: float = 1.2
    vocab_size: int = 24
    regions: int = 16
    feature_dim: int = 64
    n_train: int = 5000
    n_test: int = 2000
    seed: int = 0
    signal: float = 1.0
    noise: float = 1.0
    distractors: int = 2
    question_types: int = 4

    def __post_init__(self):
        for name in ("classes", "vocab_size", "regions", "feature_dim", "question_types"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need at least one training example")
        if not self.zipf > 0:
            raise ValueError("zipf exponent must be > 0")
        if self.distractors >= self.regions:
            raise ValueError("distractors must leave room for the target region")


def zipf_probs(k: int, exponent: float) -> np.ndarray:
    w = np.arange(1, k + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def class_name(k: int) -> str:
    return f"ans{k:03d}"


def rare_classes(k: int) -> list[int]:
    """Bottom quartile by expected frequency (the highest Zipf ranks)."""
    return list(range(k - max(1, k // 4), k))


def generate_synth_task(config: SynthTaskConfig, out_dir) -> dict:
    """Write a synthetic dataset and return its manifest.

    Each class has a fixed feature signature; an image puts it in one random
    region (plus distractor signatures from other question types) over
    Gaussian noise. The question template names the class group, so the
    question says which region matters and the image says which class.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    K, D, N = config.classes, config.feature_dim, config.regions
    probs = zipf_probs(K, config.zipf)
    signatures = rng.standard_normal((K, D))
    signatures *= config.signal * np.sqrt(D) / np.linalg.norm(signatures, axis=1, keepdims=True)
    ctype = np.arange(K) % config.question_types
    fillers = [f"w{i}" for i in range(config.vocab_size)]

    def make_split(split, n):
        labels = rng.choice(K, size=n, p=probs)
        rows = []
        for i, k in enumerate(labels):
            k = int(k)
            image_id = f"{split}_{i:06d}"
            feats = config.noise * rng.standard_normal((N, D))
            slots = rng.permutation(N)[: 1 + config.distractors]
            feats[slots[0]] += signatures[k]
            others = np.flatnonzero(ctype != ctype[k])
            for s in slots[1:]:
                if others.size:
                    feats[s] += signatures[rng.choice(others)]
            save_feature_grid(FeatureGrid(feats.astype(np.float32), image_id),
                              out / "features" / f"{image_id}.grid")
            filler = fillers[int(rng.integers(len(fillers)))]
            qtype = int(ctype[k])
            template = QUESTION_TEMPLATES[qtype % len(QUESTION_TEMPLATES)]
            question = template.format(w=filler)
            if qtype >= len(QUESTION_TEMPLATES):
                question += f" group{qtype}"
            # multiple-choice candidates: the truth plus three same-group decoys
            group = [c for c in np.flatnonzero(ctype == qtype) if c != k]
            decoys = rng.choice(group, size=min(3, len(group)), replace=False) if group else []
            choices = sorted([class_name(k)] + [class_name(int(c)) for c in decoys])
            rows.append({
                "question_id": (0 if split == "train" else 10_000_000) + i,
                "image_id": image_id,
                "question": question,
                "answers": [class_name(k)] * 10,
                "multiple_choices": choices,
                "question_type": f"type{qtype}",
            })
        write_jsonl(out / f"{split}.jsonl", rows)
        return labels

    train_labels = make_split("train", config.n_train)
    make_split("test", config.n_test)
    freqs = np.bincount(train_labels, minlength=K)
    manifest = {
        "class_names": [class_name(k) for k in range(K)],
        "class_freqs": [int(c) for c in freqs],
        "expected_probs": [float(p) for p in probs],
        "rare_class_ids": rare_classes(K),
        "seed": config.seed,
        "config": asdict(config),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else None
