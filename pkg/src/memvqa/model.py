"""Parameter layout and the end-to-end forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .answer import HeadParams, predict
from .autograd import Graph, Tensor
from .coattention import CoAttentionOutput, CoAttentionParams, coattend
from .encoders import LstmCellParams, QuestionEncoderParams, encode_question
from .mann import MannOutput, MannParams, MemoryState, bypass_step, init_state, mann_step

QUESTION_PREFIXES = ("embedding", "q_fwd.", "q_bwd.")


@dataclass
class ModelDims:
    vocab_size: int
    feature_dim: int  # Dv; the question encoding has the same width
    hidden: int  # embedding, controller and head width
    classes: int
    slots: int = 128
    gamma: float = 1e-4
    truncation_n: int = 4
    memory_erase: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.feature_dim % 2:
            raise ValueError("feature width must be even so the two LSTM directions can split it")
        if not 1 <= self.truncation_n <= self.slots:
            raise ValueError(f"truncation number {self.truncation_n} outside [1, {self.slots}]")

    @property
    def q_hidden(self) -> int:
        return self.feature_dim // 2

    def shapes(self) -> dict[str, tuple]:
        V, E, Dv, W, K = self.vocab_size, self.hidden, self.feature_dim, self.hidden, self.classes
        H = self.q_hidden
        return {
            "embedding": (V, E),
            "q_fwd.w_x": (4 * H, E), "q_fwd.w_h": (4 * H, H), "q_fwd.b": (4 * H,),
            "q_bwd.w_x": (4 * H, E), "q_bwd.w_h": (4 * H, H), "q_bwd.b": (4 * H,),
            "coatt.w_v": (Dv, Dv), "coatt.w_q": (Dv, Dv), "coatt.w_m": (Dv, Dv),
            "coatt.w_h_visual": (Dv,), "coatt.w_h_question": (Dv,),
            "ctrl.w_x": (4 * W, 2 * Dv), "ctrl.w_h": (4 * W, W), "ctrl.b": (4 * W,),
            "mem.gate_alpha": (1,),
            "head.w_o": (W, 2 * W), "head.w_h": (K, W),
        }


def _fan_in(name, shape):
    if name == "embedding":
        return shape[0]
    if name.endswith(".b"):
        return shape[0] // 4
    return shape[-1]


def init_params(dims: ModelDims, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the memory gate starts at 0."""
    rng = np.random.default_rng(seed)
    dtype = ag.DTYPES[dims.dtype]
    params = {}
    for name, shape in dims.shapes().items():
        if name == "mem.gate_alpha":
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


class ParamStore:
    """All parameters packed in one flat buffer; ``values`` are reshaped views.

    Optimiser arithmetic runs once over the flat buffer instead of per tensor.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.layout = {}
        offset = 0
        for name, arr in params.items():
            self.layout[name] = (offset, arr.shape)
            offset += arr.size
        dtype = next(iter(params.values())).dtype
        self.flat = np.empty(offset, dtype=dtype)
        self.values = {}
        for name, arr in params.items():
            view = self.slice(self.flat, name)
            view[...] = arr
            self.values[name] = view

    def slice(self, flat: np.ndarray, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return flat[offset: offset + int(np.prod(shape, dtype=int))].reshape(shape)

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty_like(self.flat)
        for name in self.layout:
            self.slice(out, name)[...] = grads[name]
        return out

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.slice(flat, name).copy() for name in self.layout}

    def mask(self, predicate) -> np.ndarray:
        m = np.zeros(self.flat.shape, dtype=bool)
        for name in self.layout:
            if predicate(name):
                self.slice(m, name)[...] = True
        return m

    def locate_nonfinite(self, flat: np.ndarray) -> list[str]:
        return [n for n in self.layout if not np.isfinite(self.slice(flat, n)).all()]


def is_question_param(name: str) -> bool:
    return name.startswith(QUESTION_PREFIXES)


@dataclass
class ParamViews:
    question: QuestionEncoderParams
    coatt: CoAttentionParams
    mann: MannParams
    head: HeadParams


def views(t: dict, dims: ModelDims) -> ParamViews:
    """Group flat named tensors into the per-module parameter structs."""
    cell = lambda p: LstmCellParams(t[p + ".w_x"], t[p + ".w_h"], t[p + ".b"])  # noqa: E731
    return ParamViews(
        QuestionEncoderParams(t["embedding"], cell("q_fwd"), cell("q_bwd")),
        CoAttentionParams(t["coatt.w_v"], t["coatt.w_q"], t["coatt.w_m"],
                          t["coatt.w_h_visual"], t["coatt.w_h_question"]),
        MannParams(cell("ctrl"), t["mem.gate_alpha"], dims.gamma, dims.truncation_n,
                   dims.memory_erase),
        HeadParams(t["head.w_o"], t["head.w_h"]),
    )


@dataclass
class ForwardResult:
    probs: Tensor
    coatt: CoAttentionOutput
    mann: MannOutput
    state: MemoryState


def forward(grid, tokens, state: MemoryState, p: ParamViews,
            memory: bool = True, write: bool = True) -> ForwardResult:
    question = encode_question(tokens, p.question)
    co = coattend(grid, question, p.coatt)
    if memory:
        out, state = mann_step(co.joint, state, p.mann, write=write)
    else:
        out, state = bypass_step(co.joint, state, p.mann)
    return ForwardResult(predict(out.o, p.head), co, out, state)


def tensors(params: dict[str, np.ndarray], graph: Graph | None = None) -> dict[str, Tensor]:
    if graph is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: graph.param(k, Tensor(v)) for k, v in params.items()}


def new_state(dims: ModelDims) -> MemoryState:
    return init_state(dims.slots, dims.hidden, ag.DTYPES[dims.dtype])


def dims_to_json(dims: ModelDims) -> dict:
    return asdict(dims)
