"""Small tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Graph` is active are recorded on it in
creation order, which is already a valid topological order, so ``backward``
is a single reverse sweep. Outside a graph the same functions just compute
values, which keeps evaluation cheap.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

class _GraphState(threading.local):
    graph = None


_local = _GraphState()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Graph:
    """Recording tape plus the named parameters it is differentiated against."""

    nodes: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def __enter__(self):
        self._outer = _local.graph
        _local.graph = self
        return self

    def __exit__(self, *exc):
        _local.graph = self._outer
        return False

    def param(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self.parameters[name] = tensor
        return tensor


def current_graph():
    return _local.graph


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    graph = _local.graph
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        graph.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b), None)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out.backward_fn = bw if out.requires_grad else None
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data - b.data, (a, b), None)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out.backward_fn = bw if out.requires_grad else None
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out.backward_fn = bw if out.requires_grad else None
    return out


def matmul(a, b):
    """Matrix product for 2-D/1-D operand combinations."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = _node(ad @ bd, (a, b), None)

    def bw(g):
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim == 1:
                ga = np.outer(g, bd)
            elif ad.ndim == 1 and bd.ndim == 2:
                ga = bd @ g
            elif ad.ndim == 1:
                ga = g * bd
            else:
                ga = g @ bd.T
            _accum(a, ga)
        if b.requires_grad:
            if ad.ndim == 2 and bd.ndim == 1:
                gb = ad.T @ g
            elif ad.ndim == 1 and bd.ndim == 2:
                gb = np.outer(ad, g)
            elif ad.ndim == 1:
                gb = g * ad
            else:
                gb = ad.T @ g
            _accum(b, gb)

    out.backward_fn = bw if out.requires_grad else None
    return out


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = _node(y, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(x, g * (1.0 - y * y))
    return out


def _sigmoid(z):
    # tanh form avoids overflow warnings for large |z|
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    out = _node(y, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(x, g * y * (1.0 - y))
    return out


def log(x, floor: float = 0.0):
    """Natural log of ``max(x, floor)``; gradient is zero where the floor binds."""
    x = as_tensor(x)
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    out = _node(np.log(clipped), (x,), None)
    if out.requires_grad:
        live = x.data >= floor if floor > 0 else True
        out.backward_fn = lambda g: _accum(x, np.where(live, g / clipped, 0.0))
    return out


def _softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis, stabilised by max subtraction."""
    x = as_tensor(x)
    if x.data.size == 0 or x.data.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    y = _softmax_np(x.data)
    out = _node(y, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(
            x, y * (g - (g * y).sum(axis=-1, keepdims=True))
        )
    return out


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    out = _node(data, tuple(xs), None)
    if out.requires_grad:
        bounds = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

        def bw(g):
            for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
                _accum(x, piece)

        out.backward_fn = bw
    return out


def stack(xs):
    xs = [as_tensor(x) for x in xs]
    out = _node(np.stack([x.data for x in xs]), tuple(xs), None)
    if out.requires_grad:

        def bw(g):
            for i, x in enumerate(xs):
                _accum(x, g[i])

        out.backward_fn = bw
    return out


def getitem(x, idx):
    """Basic slicing and integer-array row gathers."""
    x = as_tensor(x)
    out = _node(x.data[idx], (x,), None)
    if out.requires_grad:

        fancy = isinstance(idx, (np.ndarray, list))

        def bw(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            if fancy:
                np.add.at(x.grad, idx, g)
            else:
                x.grad[idx] += g

        out.backward_fn = bw
    return out


def take_rows(matrix, indices):
    matrix = as_tensor(matrix)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= matrix.shape[0]):
        raise ValueError(
            f"row index out of range for matrix with {matrix.shape[0]} rows"
        )
    return getitem(matrix, indices)


def reshape(x, shape):
    x = as_tensor(x)
    out = _node(x.data.reshape(shape), (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(x, g.reshape(x.data.shape))
    return out


def transpose(x):
    x = as_tensor(x)
    out = _node(x.data.T, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(x, g.T)
    return out


def sum(x, axis=None):
    x = as_tensor(x)
    out = _node(np.asarray(x.data.sum(axis=axis)), (x,), None)
    if out.requires_grad:

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape))

        out.backward_fn = bw
    return out


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    out = _node(np.asarray(x.data.mean(axis=axis)), (x,), None)
    if out.requires_grad:

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g / n, x.data.shape))

        out.backward_fn = bw
    return out


def cosine_rows(query, matrix):
    """Cosine similarity between a vector and every row of a matrix.

    Rows (or a query) with zero norm score 0 and receive zero gradient.
    """
    q, m = as_tensor(query), as_tensor(matrix)
    if q.data.ndim != 1 or m.data.ndim != 2 or m.data.shape[1] != q.data.shape[0]:
        raise ValueError(f"cosine_rows shape mismatch: {q.shape} vs {m.shape}")
    qn = np.sqrt(q.data @ q.data)
    rn = np.sqrt(np.einsum("ij,ij->i", m.data, m.data))
    denom = qn * rn
    live = denom > 0
    safe = np.where(live, denom, 1.0)
    dots = m.data @ q.data
    sim = np.where(live, dots / safe, 0.0)
    out = _node(sim, (q, m), None)
    if out.requires_grad:

        def bw(g):
            gl = np.where(live, g, 0.0)
            if q.requires_grad and qn > 0:
                gq = (gl / safe) @ m.data - (gl * sim).sum() * q.data / (qn * qn)
                _accum(q, gq)
            if m.requires_grad:
                rn_safe = np.where(rn > 0, rn, 1.0)
                gm = np.outer(gl / safe, q.data) - (gl * sim / (rn_safe * rn_safe))[
                    :, None
                ] * m.data
                _accum(m, gm)

        out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# vector helpers on top of the primitives


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0 if either has zero norm."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity needs equal lengths, got {a.shape} and {b.shape}")
    return float(cosine_rows(a, b[None, :]).data[0])


def backward(graph: Graph, loss: Tensor) -> dict:
    """Run the reverse sweep from a scalar ``loss``; return name -> gradient.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in graph.nodes:
        node.grad = None
    for p in graph.parameters.values():
        p.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
    grads = {}
    for name, p in graph.parameters.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def flagged(self) -> np.ndarray:
        """Flat indices whose relative error exceeds the tolerance."""
        return np.flatnonzero(self.rel_error > self.tolerance)

    @property
    def ok(self) -> bool:
        return self.flagged.size == 0


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(f, point, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f(x)`` against central differences.

    ``f`` receives a Tensor and must return a scalar Tensor built from the
    primitives in this module.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with Graph() as g:
        x = g.param("x", Tensor(x0.copy()))
        out = f(x)
    analytic = backward(g, out)["x"].astype(np.float64).ravel()

    flat = x0.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(np.asarray(f(Tensor(x0.copy())).data).ravel()[0])
        flat[i] = orig - step
        fm = float(np.asarray(f(Tensor(x0.copy())).data).ravel()[0])
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * step)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tolerance)


def check_params_gradient(loss_fn, params: dict, step=1e-5, rng=None, max_entries=None):
    """Finite-difference check of ``loss_fn(params)`` against every named tensor.

    ``params`` maps names to float64 arrays; ``loss_fn`` receives a Graph and
    a dict of Tensors and returns a scalar Tensor. Returns name -> report.
    When ``max_entries`` is given, at most that many entries per tensor are
    probed (chosen by ``rng``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Graph() as g:
        tens = {k: g.param(k, Tensor(v.copy())) for k, v in params.items()}
        loss = loss_fn(tens)
    grads = backward(g, loss)

    def value(arrs):
        return float(loss_fn({k: Tensor(v) for k, v in arrs.items()}).data)

    reports = {}
    for name, base in params.items():
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, max_entries, replace=False))
        work = {k: v.copy() for k, v in params.items()}
        flat = work[name].reshape(-1)
        numeric = np.empty(flat_idx.size)
        for j, i in enumerate(flat_idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = value(work)
            flat[i] = orig - step
            fm = value(work)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        analytic = grads[name].reshape(-1)[flat_idx].astype(np.float64)
        reports[name] = GradCheckReport(
            analytic, numeric, relative_error(analytic, numeric), 1e-4
        )
    return reports
