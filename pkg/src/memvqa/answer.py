"""Answer classifier over the memory output, its loss, and answer selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_FLOOR = 1e-12


@dataclass
class HeadParams:
    w_o: Tensor  # (hidden, 2W)
    w_h: Tensor  # (K, hidden)


def predict(o, params: HeadParams) -> Tensor:
    """Class probabilities ``softmax(W_h tanh(W_o o))``."""
    o = ag.as_tensor(o)
    if o.shape != (params.w_o.shape[1],):
        raise ValueError(f"embedding length {o.shape} does not match head input {params.w_o.shape[1]}")
    return ag.softmax(params.w_h @ ag.tanh(params.w_o @ o))


def loss(p, y) -> Tensor:
    """Cross-entropy ``-log max(p[y], 1e-12)``; ``y`` is a class index or one-hot vector."""
    p = ag.as_tensor(p)
    if np.ndim(y) == 0:
        label = int(y)
        if not 0 <= label < p.shape[0]:
            raise ValueError(f"label {label} outside {p.shape[0]} classes")
    else:
        y = np.asarray(y)
        if y.shape != p.shape or not np.isin(y, (0, 1)).all() or y.sum() != 1:
            raise ValueError("target must be a one-hot vector over the answer classes")
        label = int(np.argmax(y))
    return -ag.log(p[label], floor=LOG_FLOOR)


def argmax(p) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p.data if isinstance(p, Tensor) else p)))


def select_multiple_choice(p, candidates, vocab):
    """Pick the in-vocabulary candidate with the highest probability.

    Returns ``(answer, prob, candidates_used)``. When no candidate is in the
    vocabulary the global argmax answer is returned with
    ``candidates_used=False``.
    """
    probs = np.asarray(p.data if isinstance(p, Tensor) else p)
    best = None
    for cand in candidates:
        idx = vocab.index(cand)
        if idx is None:
            continue
        if best is None or probs[idx] > probs[best] or (probs[idx] == probs[best] and idx < best):
            best = idx
    if best is None:
        best = argmax(probs)
        return vocab.answers[best], float(probs[best]), False
    return vocab.answers[best], float(probs[best]), True
