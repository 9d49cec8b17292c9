"""Image feature grids and the bidirectional LSTM question encoder."""
from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class FeatureGridError(ValueError):
    """Base class for feature-grid file problems."""


class MalformedHeaderError(FeatureGridError):
    pass


class TruncatedPayloadError(FeatureGridError):
    pass


class NonFiniteFeaturesError(FeatureGridError):
    pass


@dataclass
class FeatureGrid:
    regions: np.ndarray  # (N, Dv)
    image_id: str = ""

    def __post_init__(self):
        self.regions = np.asarray(self.regions)
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ValueError(f"feature grid must be N x Dv with N >= 1, got {self.regions.shape}")
        if not np.isfinite(self.regions).all():
            raise NonFiniteFeaturesError(f"non-finite features in image {self.image_id!r}")

    @property
    def n(self) -> int:
        return self.regions.shape[0]

    @property
    def d(self) -> int:
        return self.regions.shape[1]


def save_feature_grid(grid: FeatureGrid, path) -> None:
    header = {"image_id": grid.image_id, "n": grid.n, "d": grid.d, "dtype": "f32le"}
    payload = np.ascontiguousarray(grid.regions, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def load_feature_grid(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        n, d = int(header["n"]), int(header["d"])
        image_id = str(header["image_id"])
        dtype = header.get("dtype", "f32le")
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: bad header ({exc})") from None
    if dtype != "f32le" or n < 1 or d < 1:
        raise MalformedHeaderError(f"{path}: unsupported header {header}")
    payload = raw[nl + 1:]
    expected = n * d * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise MalformedHeaderError(f"{path}: {len(payload) - expected} trailing bytes")
    regions = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.isfinite(regions).all():
        raise NonFiniteFeaturesError(f"{path}: non-finite feature values")
    return FeatureGrid(regions, image_id)


# ---------------------------------------------------------------------------
# question text

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
UNK = "<unk>"


def tokenize(question: str) -> list[str]:
    return _PUNCT.sub(" ", question.lower()).split()


@dataclass
class Vocabulary:
    index_to_token: list[str] = field(default_factory=lambda: [UNK])
    unknown_index: int = 0

    def __post_init__(self):
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        if not 0 <= self.unknown_index < len(self.index_to_token):
            raise ValueError("unknown_index out of range")

    def __len__(self):
        return len(self.index_to_token)

    @classmethod
    def from_questions(cls, questions) -> "Vocabulary":
        tokens = sorted({t for q in questions for t in tokenize(q)} - {UNK})
        return cls([UNK] + tokens, 0)

    def encode(self, question: str) -> list[int]:
        return [self.token_to_index.get(t, self.unknown_index) for t in tokenize(question)]

    def to_json(self):
        return {"tokens": self.index_to_token, "unknown_index": self.unknown_index}

    @classmethod
    def from_json(cls, obj):
        return cls(list(obj["tokens"]), int(obj["unknown_index"]))


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmCellParams:
    """Gate weights stacked in the order input, forget, output, candidate."""

    w_x: Tensor  # (4H, in)
    w_h: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    def __post_init__(self):
        four_h = self.w_x.shape[0]
        if four_h % 4 or self.w_h.shape != (four_h, four_h // 4) or self.b.shape != (four_h,):
            raise ValueError(
                f"inconsistent LSTM shapes w_x={self.w_x.shape} w_h={self.w_h.shape} b={self.b.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]


def lstm_gates(z, c_prev, hidden):
    sig = ag.sigmoid(z[: 3 * hidden])
    g = ag.tanh(z[3 * hidden:])
    i, f, o = sig[:hidden], sig[hidden: 2 * hidden], sig[2 * hidden:]
    c = f * c_prev + i * g
    h = o * ag.tanh(c)
    return h, c


def lstm_step(x, h_prev, c_prev, params: LstmCellParams):
    """One standard LSTM update; returns ``(h, c)``."""
    hidden = params.hidden_size
    x, h_prev, c_prev = ag.as_tensor(x), ag.as_tensor(h_prev), ag.as_tensor(c_prev)
    if x.shape != (params.input_size,) or h_prev.shape != (hidden,) or c_prev.shape != (hidden,):
        raise ValueError(
            f"lstm_step shape mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape} "
            f"for cell in={params.input_size} hidden={hidden}"
        )
    z = params.w_x @ x + params.w_h @ h_prev + params.b
    return lstm_gates(z, c_prev, hidden)


def _run_direction(x_proj, order, params: LstmCellParams, dtype):
    hidden = params.hidden_size
    h = Tensor(np.zeros(hidden, dtype=dtype))
    c = Tensor(np.zeros(hidden, dtype=dtype))
    states = {}
    for t in order:
        z = x_proj[t] + params.w_h @ h + params.b
        h, c = lstm_gates(z, c, hidden)
        states[t] = h
    return [states[t] for t in range(len(order))]


def embed_tokens(tokens, embedding):
    """Row lookup ``x_t = M w_t`` for a sequence of token indices."""
    embedding = ag.as_tensor(embedding)
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D index sequence")
    return ag.take_rows(embedding, tokens)


@dataclass
class QuestionEncoderParams:
    embedding: Tensor  # (V, E)
    forward: LstmCellParams
    backward: LstmCellParams


def encode_question(tokens, params: QuestionEncoderParams) -> Tensor:
    """Return the T x 2H matrix whose row t is ``[h_t^+, h_t^-]``."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot encode an empty question")
    x = embed_tokens(tokens, params.embedding)
    dtype = params.embedding.dtype
    T = len(tokens)
    # input projections for all steps at once; the recurrences stay sequential
    fwd = _run_direction(x @ ag.transpose(params.forward.w_x), range(T), params.forward, dtype)
    bwd = _run_direction(
        x @ ag.transpose(params.backward.w_x), range(T - 1, -1, -1), params.backward, dtype
    )
    return ag.stack([ag.concat([f, b]) for f, b in zip(fwd, bwd)])
