"""Sequential co-attention over image regions and question words."""
from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from .autograd import Tensor


@dataclass
class CoAttentionParams:
    w_v: Tensor  # (A, Dv)
    w_q: Tensor  # (A, Dq)
    w_m: Tensor  # (A, Dv)
    w_h_visual: Tensor  # (A,)
    w_h_question: Tensor  # (A,)


@dataclass
class AttentionResult:
    weights: Tensor
    attended: Tensor


def _as_matrix(x, what):
    x = ag.as_tensor(x.regions if hasattr(x, "regions") else x)
    if x.data.ndim != 2:
        raise ValueError(f"{what} must be a matrix, got shape {x.shape}")
    return x


def base_vector(grid, question) -> Tensor:
    """``tanh(mean_n v_n) * mean_t q_t``; no squashing on the question side."""
    v = _as_matrix(grid, "feature grid")
    q = _as_matrix(question, "question encoding")
    if v.shape[1] != q.shape[1]:
        raise ValueError(f"visual width {v.shape[1]} != question width {q.shape[1]}")
    return ag.tanh(ag.mean(v, axis=0)) * ag.mean(q, axis=0)


def _guide(m0, params):
    return ag.tanh(params.w_m @ ag.as_tensor(m0))


def _scores(items, proj, guide, w_h):
    if items.shape[1] != proj.shape[1] or guide.shape != (proj.shape[0],):
        raise ValueError(
            f"attention shape mismatch: items {items.shape}, projection {proj.shape}, guide {guide.shape}"
        )
    hidden = ag.tanh(items @ ag.transpose(proj)) * guide
    return ag.softmax(hidden @ w_h)


def attend_visual(grid, m0, params: CoAttentionParams, guide=None) -> AttentionResult:
    v = _as_matrix(grid, "feature grid")
    guide = _guide(m0, params) if guide is None else guide
    alpha = _scores(v, params.w_v, guide, params.w_h_visual)
    return AttentionResult(alpha, ag.tanh(alpha @ v))


def attend_question(question, m0, params: CoAttentionParams, guide=None) -> AttentionResult:
    q = _as_matrix(question, "question encoding")
    guide = _guide(m0, params) if guide is None else guide
    alpha = _scores(q, params.w_q, guide, params.w_h_question)
    # plain weighted sum: the question branch has no outer tanh
    return AttentionResult(alpha, alpha @ q)


@dataclass
class CoAttentionOutput:
    joint: Tensor
    visual: AttentionResult
    question: AttentionResult


def coattend(grid, question, params: CoAttentionParams) -> CoAttentionOutput:
    """Joint vector ``[v*, q*]`` plus both attention distributions."""
    m0 = base_vector(grid, question)
    guide = _guide(m0, params)
    vis = attend_visual(grid, m0, params, guide)
    que = attend_question(question, m0, params, guide)
    return CoAttentionOutput(ag.concat([vis.attended, que.attended]), vis, que)


def attention_record(question_id, out: CoAttentionOutput, top_k: int = 3) -> dict:
    """JSON-ready dump of both attention distributions for one example."""
    words = out.question.weights.data
    top = sorted(range(len(words)), key=lambda i: (-words[i], i))[:top_k]
    return {
        "question_id": question_id,
        "alpha_regions": [float(a) for a in out.visual.weights.data],
        "alpha_words": [float(a) for a in words],
        "top_words": top,
    }
