"""LSTM-controlled external memory with cosine reads and least-used writes.

One step runs: controller update, content read from the pre-write memory,
write weights from the previous step's read and usage weights, additive
write, then usage update with the current read and write weights.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import LstmCellParams, lstm_step

MEMORY_INIT = 1e-6


@dataclass
class MannParams:
    controller: LstmCellParams
    gate_alpha: Tensor  # shape (1,)
    decay_gamma: float = 1e-4
    truncation_n: int = 4
    # zero the least-used slots before each write (LRU-access style); off means
    # writes are purely additive and slot norms grow with the stream length
    erase_least_used: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay_gamma < 1.0:
            raise ValueError(f"decay gamma must lie in [0, 1), got {self.decay_gamma}")
        if self.truncation_n < 1:
            raise ValueError("truncation number must be >= 1")


@dataclass
class MemoryState:
    memory: Tensor  # (S, W)
    usage: Tensor  # (S,)
    read_weights: Tensor  # (S,)
    write_weights: Tensor  # (S,)
    h: Tensor  # controller hidden (W,)
    c: Tensor  # controller cell (W,)

    @property
    def slots(self) -> int:
        return self.memory.shape[0]

    def detach(self) -> "MemoryState":
        return MemoryState(*(Tensor(getattr(self, f).data) for f in _FIELDS))

    def copy(self) -> "MemoryState":
        return MemoryState(*(Tensor(getattr(self, f).data.copy()) for f in _FIELDS))

    def arrays(self) -> dict:
        return {f: getattr(self, f).data for f in _FIELDS}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "MemoryState":
        return cls(*(Tensor(np.asarray(arrays[f])) for f in _FIELDS))


_FIELDS = ("memory", "usage", "read_weights", "write_weights", "h", "c")


def init_state(slots: int, width: int, dtype=np.float64, eps: float = MEMORY_INIT) -> MemoryState:
    """Memory filled with a small constant; read/usage history starts at zero."""
    z = lambda n: Tensor(np.zeros(n, dtype=dtype))  # noqa: E731
    return MemoryState(
        memory=Tensor(np.full((slots, width), eps, dtype=dtype)),
        usage=z(slots),
        read_weights=z(slots),
        write_weights=z(slots),
        h=z(width),
        c=z(width),
    )


@dataclass
class MannOutput:
    o: Tensor
    h: Tensor
    r: Tensor
    read_weights: Tensor
    write_weights: Tensor | None = None


def controller_step(x, h_prev, c_prev, params: MannParams):
    return lstm_step(x, h_prev, c_prev, params.controller)


def read_memory(h, memory):
    """Softmax over cosine scores, then the weighted sum of slots."""
    h, memory = ag.as_tensor(h), ag.as_tensor(memory)
    if memory.data.ndim != 2 or h.shape != (memory.shape[1],):
        raise ValueError(f"read_memory shape mismatch: h{h.shape} memory{memory.shape}")
    w_r = ag.softmax(ag.cosine_rows(h, memory))
    return w_r, w_r @ memory


def nth_smallest(values, n: int) -> float:
    values = np.asarray(values)
    return float(np.partition(values, n - 1)[n - 1])


def least_used_indicator(usage_prev, n: int) -> np.ndarray:
    usage_prev = np.asarray(usage_prev.data if isinstance(usage_prev, Tensor) else usage_prev)
    if not 1 <= n <= usage_prev.shape[0]:
        raise ValueError(f"truncation number {n} outside [1, {usage_prev.shape[0]}]")
    return (usage_prev <= nth_smallest(usage_prev, n)).astype(usage_prev.dtype)


def compute_write_weights(read_prev, usage_prev, alpha, n: int):
    """Gate between last step's read weights and the least-used slot indicator.

    The indicator is a constant as far as gradients are concerned.
    """
    read_prev = ag.as_tensor(read_prev)
    indicator = least_used_indicator(usage_prev, n)
    if read_prev.shape != indicator.shape:
        raise ValueError(f"read weights {read_prev.shape} vs usage {indicator.shape}")
    gate = ag.sigmoid(alpha)
    return gate * read_prev + (1.0 - gate) * indicator


def update_usage(usage_prev, w_r, w_w, gamma: float):
    usage_prev, w_r, w_w = ag.as_tensor(usage_prev), ag.as_tensor(w_r), ag.as_tensor(w_w)
    if not usage_prev.shape == w_r.shape == w_w.shape:
        raise ValueError(f"usage update shape mismatch {usage_prev.shape} {w_r.shape} {w_w.shape}")
    return usage_prev * gamma + w_r + w_w


def erase_slots(memory_prev, indicator):
    """Zero the rows flagged by ``indicator`` (a constant 0/1 vector)."""
    memory_prev = ag.as_tensor(memory_prev)
    keep = (1.0 - np.asarray(indicator, dtype=memory_prev.dtype))[:, None]
    return memory_prev * keep


def write_memory(memory_prev, w_w, h):
    """``M(i) += w_w(i) * h`` for every slot."""
    memory_prev, w_w, h = ag.as_tensor(memory_prev), ag.as_tensor(w_w), ag.as_tensor(h)
    if memory_prev.data.ndim != 2 or w_w.shape != (memory_prev.shape[0],) or h.shape != (
        memory_prev.shape[1],
    ):
        raise ValueError(f"write_memory shape mismatch M{memory_prev.shape} w{w_w.shape} h{h.shape}")
    return memory_prev + ag.reshape(w_w, (-1, 1)) * h


def mann_step(x, state: MemoryState, params: MannParams, write: bool = True):
    """Advance the controller and memory by one input; returns (output, state).

    With ``write=False`` the memory and usage are left untouched (evaluation).
    """
    h, c = controller_step(x, state.h, state.c, params)
    w_r, r = read_memory(h, state.memory)
    out = MannOutput(ag.concat([h, r]), h, r, w_r)
    if not write:
        return out, replace(state, h=h, c=c, read_weights=w_r)
    w_w = compute_write_weights(state.read_weights, state.usage, params.gate_alpha, params.truncation_n)
    memory = state.memory
    if params.erase_least_used:
        memory = erase_slots(memory, least_used_indicator(state.usage, params.truncation_n))
    memory = write_memory(memory, w_w, h)
    usage = update_usage(state.usage, w_r, w_w, params.decay_gamma)
    out.write_weights = w_w
    return out, MemoryState(memory, usage, w_r, w_w, h, c)


def bypass_step(x, state: MemoryState, params: MannParams):
    """Ablation arm: controller only, head sees ``[h, 0]``."""
    h, c = controller_step(x, state.h, state.c, params)
    zeros = Tensor(np.zeros(h.shape, dtype=h.dtype))
    return MannOutput(ag.concat([h, zeros]), h, zeros, None), replace(state, h=h, c=c)


def trace_record(step: int, state: MemoryState) -> dict:
    return {
        "step": step,
        "w_r": state.read_weights.data.tolist(),
        "w_w": state.write_weights.data.tolist(),
        "w_u": state.usage.data.tolist(),
    }
