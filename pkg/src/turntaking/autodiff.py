"""Dense float64 tensors with a recorded reverse-mode tape and an Adam optimizer.

The tape is implicit: every op links its output tensor to its inputs and keeps a
closure that routes gradients backwards. ``backward`` walks the recorded
subgraph in reverse creation order, which is a valid reverse topological order
because inputs always exist before their consumers.

Shape discipline is strict on purpose: binary elementwise ops accept two
equal-shape tensors or a tensor and a scalar, never anything broadcast. The
handful of batched patterns the models need (bias rows, row scaling, embedding
gather, sliding windows, attention reductions) are dedicated ops with
hand-written backward rules, so every gradient path stays checkable against
central finite differences.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TrainingError",
    "ParamSet",
    "Adam",
    "backward",
    "constant",
    "matmul",
    "add",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "relu",
    "log",
    "softmax",
    "nll_loss",
    "max_over_time",
    "add_bias",
    "scale_rows",
    "sum_cols",
    "sum_all",
    "scale",
    "concat_cols",
    "reshape",
    "rows",
    "unfold_rows",
    "stack_states",
    "dot_scores",
    "weighted_sum",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class TrainingError(RuntimeError):
    """A training step produced non-finite values."""


_SEQ = itertools.count()


class Tensor:
    """A dense float64 array plus its place in the recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._bwd = _bwd
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # thin operator sugar; the module-level functions are the real surface
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, name: str | None = None) -> Tensor:
    """Wrap raw values as a non-trainable tensor."""
    return Tensor(data, requires_grad=False, name=name)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every recorded ancestor.

    The loss must be scalar. Nodes are visited in decreasing creation order,
    which is reverse topological for any recorded graph, so the walk is
    deterministic: identical graphs give bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._bwd is not None:
            t._bwd(t.grad if t.grad is not None else np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k) x (k,n), got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return Tensor(out, _parents=(a, b), _bwd=bwd)


def _binary_operands(a, b, opname: str):
    """Resolve the strict elementwise contract: equal shapes, or one scalar."""
    if not isinstance(a, Tensor):
        a = constant(a)
    if not isinstance(b, Tensor):
        b = constant(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{opname} needs equal shapes or a scalar, got {a.shape} and {b.shape}")
    return a, b


def _grad_for(operand: Tensor, g: np.ndarray) -> np.ndarray:
    # a scalar operand absorbs the summed gradient of the broadcast result
    if operand.data.size == 1 and g.shape != operand.data.shape:
        return np.full_like(operand.data, g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        _acc(a, _grad_for(a, g))
        _acc(b, _grad_for(b, g))

    return Tensor(out, _parents=(a, b), _bwd=bwd)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        _acc(a, _grad_for(a, g * b.data))
        _acc(b, _grad_for(b, g * a.data))

    return Tensor(out, _parents=(a, b), _bwd=bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, -g)

    return Tensor(-a.data, _parents=(a,), _bwd=bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out * out))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _acc(a, g * out * (1.0 - out))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _acc(a, g * (a.data > 0))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log domain error: input has non-positive entries")
    out = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data)

    return Tensor(out, _parents=(a,), _bwd=bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction.

    Outputs are strictly positive and every row sums to 1 up to float64
    rounding, for any finite input.
    """
    x = a.data
    if x.size == 0:
        raise ShapeError("softmax needs at least one element")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _acc(a, (g - dot) * out)

    return Tensor(out, _parents=(a,), _bwd=bwd)


def nll_loss(probs: Tensor, targets, mask=None) -> Tensor:
    """Summed negative log likelihood of the target ids under ``probs``.

    ``probs`` is (n, vocab) with normalized rows; ``targets`` is a length-n id
    sequence. Positions with mask 0 contribute exactly 0 to the loss and to
    the gradient (padding convention).
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"nll_loss needs (n, vocab) probabilities, got {probs.shape}")
    n, vocab = probs.shape
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (n,):
        raise ShapeError(f"nll_loss targets must have shape ({n},), got {t.shape}")
    if n and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of vocabulary range [0, {vocab})")
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (n,):
        raise ShapeError(f"nll_loss mask must have shape ({n},), got {m.shape}")
    active = m > 0
    picked = probs.data[np.arange(n), t]
    contrib = np.zeros(n)
    contrib[active] = m[active] * np.log(picked[active])
    out = -contrib.sum()

    def bwd(g):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n)[active], t[active]] = -float(g) * m[active] / picked[active]
        _acc(probs, gp)

    return Tensor(out, _parents=(probs,), _bwd=bwd)


def max_over_time(a: Tensor) -> Tensor:
    """Per-column maximum of a (positions, filters) map; ties go to the lowest index."""
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"max_over_time needs a non-empty (positions, filters) map, got {a.shape}")
    arg = np.argmax(a.data, axis=0)  # first occurrence wins
    cols = np.arange(a.shape[1])
    out = a.data[arg, cols]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (arg, cols), g)
        _acc(a, ga)

    return Tensor(out, _parents=(a,), _bwd=bwd)


# ---------------------------------------------------------------------------
# structured ops used by the models


def add_bias(mat: Tensor, vec: Tensor) -> Tensor:
    """Add a length-m bias vector to every row of an (n, m) matrix."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_bias needs (n,m) and (m,), got {mat.shape} and {vec.shape}")
    out = mat.data + vec.data

    def bwd(g):
        _acc(mat, g)
        _acc(vec, g.sum(axis=0))

    return Tensor(out, _parents=(mat, vec), _bwd=bwd)


def scale_rows(mat: Tensor, col: Tensor) -> Tensor:
    """Multiply row i of an (n, m) matrix by col[i, 0]."""
    if mat.data.ndim != 2 or col.shape != (mat.shape[0], 1):
        raise ShapeError(f"scale_rows needs (n,m) and (n,1), got {mat.shape} and {col.shape}")
    out = mat.data * col.data

    def bwd(g):
        _acc(mat, g * col.data)
        _acc(col, (g * mat.data).sum(axis=1, keepdims=True))

    return Tensor(out, _parents=(mat, col), _bwd=bwd)


def sum_cols(mat: Tensor) -> Tensor:
    """Row sums of an (n, m) matrix, kept as an (n, 1) column."""
    if mat.data.ndim != 2:
        raise ShapeError(f"sum_cols needs a matrix, got {mat.shape}")
    out = mat.data.sum(axis=1, keepdims=True)

    def bwd(g):
        _acc(mat, np.broadcast_to(g, mat.data.shape).copy())

    return Tensor(out, _parents=(mat,), _bwd=bwd)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        _acc(a, np.full_like(a.data, float(g)))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a plain python constant."""
    c = float(factor)

    def bwd(g):
        _acc(a, g * c)

    return Tensor(a.data * c, _parents=(a,), _bwd=bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[:, j0:j1])

    return Tensor(out, _parents=tuple(parts), _bwd=bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def rows(table: Tensor, indices) -> Tensor:
    """Gather rows of an embedding table; the backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"rows needs a (v,d) table and 1-d indices, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return Tensor(out, _parents=(table,), _bwd=bwd)


def unfold_rows(a: Tensor, width: int) -> Tensor:
    """Sliding windows of ``width`` consecutive rows, flattened per window.

    (l, d) becomes (l - width + 1, width * d); used as the im2col step for
    text convolutions.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"unfold_rows needs a matrix, got {a.shape}")
    l, d = a.shape
    if width < 1 or l < width:
        raise ShapeError(f"unfold_rows width {width} does not fit {l} rows")
    n_win = l - width + 1
    win = np.lib.stride_tricks.sliding_window_view(a.data, (width, d))[:, 0]
    out = win.reshape(n_win, width * d).copy()
    idx = (np.arange(n_win)[:, None] + np.arange(width)[None, :]).reshape(-1)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g.reshape(n_win * width, d))
        _acc(a, ga)

    return Tensor(out, _parents=(a,), _bwd=bwd)


def stack_states(parts: Sequence[Tensor]) -> Tensor:
    """Stack t matrices of shape (b, h) into a (b, t, h) block."""
    parts = list(parts)
    if not parts:
        raise ShapeError("stack_states needs at least one state")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape or p.data.ndim != 2:
            raise ShapeError("stack_states needs equal (b,h) matrices")
    out = np.stack([p.data for p in parts], axis=1)

    def bwd(g):
        for t, p in enumerate(parts):
            _acc(p, g[:, t, :])

    return Tensor(out, _parents=tuple(parts), _bwd=bwd)


def dot_scores(query: Tensor, states: Tensor) -> Tensor:
    """Per-position dot products: (b, h) against (b, t, h) gives (b, t)."""
    if query.data.ndim != 2 or states.data.ndim != 3 or \
            states.shape[0] != query.shape[0] or states.shape[2] != query.shape[1]:
        raise ShapeError(f"dot_scores needs (b,h) and (b,t,h), got {query.shape} and {states.shape}")
    out = np.einsum("bh,bth->bt", query.data, states.data)

    def bwd(g):
        _acc(query, np.einsum("bt,bth->bh", g, states.data))
        _acc(states, np.einsum("bt,bh->bth", g, query.data))

    return Tensor(out, _parents=(query, states), _bwd=bwd)


def weighted_sum(weights: Tensor, states: Tensor) -> Tensor:
    """Convex combination of states: (b, t) weights over (b, t, h) gives (b, h)."""
    if weights.data.ndim != 2 or states.data.ndim != 3 or \
            states.shape[:2] != weights.shape:
        raise ShapeError(f"weighted_sum needs (b,t) and (b,t,h), got {weights.shape} and {states.shape}")
    out = np.einsum("bt,bth->bh", weights.data, states.data)

    def bwd(g):
        _acc(weights, np.einsum("bh,bth->bt", g, states.data))
        _acc(states, np.einsum("bt,bh->bth", weights.data, g))

    return Tensor(out, _parents=(weights, states), _bwd=bwd)


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamSet:
    """Named trainable tensors with deterministic seeded initialization."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def new(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
        """Create a parameter initialized uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        fan = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / math.sqrt(max(fan, 1))
        t = Tensor(self._rng.uniform(-bound, bound, size=shape),
                   requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Bit-exact restore of previously exported parameter values."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r} shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


class Adam:
    """Adam with bias correction and global gradient-norm clipping.

    A parameter with no recorded gradient is treated as having a zero
    gradient. Gradients are zeroed after every step.
    """

    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        grads: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                factor = self.clip_norm / total
                grads = {name: g * factor for name, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.params.zero_grads()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam.step": np.array([float(self.step_count)])}
        for name in self.params.names():
            if name in self._m:
                out[f"adam.m.{name}"] = self._m[name].copy()
                out[f"adam.v.{name}"] = self._v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam.step"][0])
        for name in self.params.names():
            key = f"adam.m.{name}"
            if key in arrays:
                self._m[name] = np.asarray(arrays[key], dtype=np.float64).copy()
                self._v[name] = np.asarray(arrays[f"adam.v.{name}"], dtype=np.float64).copy()


def finite_difference_check(build_loss: Callable[[], Tensor], params: ParamSet,
                            eps: float = 1e-5) -> float:
    """Worst relative error between backward gradients and central differences.

    ``build_loss`` must rebuild the full forward graph from the current
    parameter values on every call. The error metric is
    |analytic - numeric| / max(1, |analytic|, |numeric|), i.e. relative for
    large gradients with an absolute floor for tiny ones.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"perturbation {eps} outside [1e-7, 1e-3]")
    params.zero_grads()
    backward(build_loss())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    params.zero_grads()
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build_loss().item()
            flat[i] = orig - eps
            f_minus = build_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
            worst = max(worst, err)
    return worst
