"""Small dense-tensor engine with reverse-mode gradients.

Every array is float64.  A :class:`Tensor` produced by an operation keeps a
reference to its parents and a closure mapping the upstream gradient to one
gradient per parent.  :func:`backward` sorts the recorded operations
topologically and walks them once in reverse.

New primitives can be defined outside this module with :func:`record`, which
is how the model builds its ensembling ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "BatchNormStats",
    "record",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "sum",
    "mean",
    "concat",
    "fully_connected",
    "batch_norm",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "l2_normalize",
    "backward",
    "zero_grad",
    "gradient_check",
    "gradient_check_detailed",
    "GradCheckResult",
]


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name", "branch")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op: str | None = None
        self.name = name
        # which side of each kink a non-smooth op took; read by gradient_check
        self.branch: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable,
    op: str,
    branch: np.ndarray | None = None,
) -> Tensor:
    """Create the output of a primitive operation.

    ``backward_fn(g)`` receives the upstream gradient (same shape as ``data``)
    and must return one array (or ``None``) per parent.  Piecewise ops pass
    ``branch``, an array identifying the piece each element fell on.
    """
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    out.branch = branch
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


class Graph:
    """Recorded operations feeding one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; model graphs are deep enough to hit the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if n.backward_fn is not None]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the graph.

    Gradients are added to whatever ``grad`` already holds, so two calls
    without :func:`zero_grad` in between double them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = upstream.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg
    for node in graph.nodes:
        g = upstream.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g.copy() if node.grad is None else node.grad + g
    return graph


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    return record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu", branch=mask)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return record(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def fully_connected(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = xW + b."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"fully_connected: input {x.shape} does not conform to weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"fully_connected: bias {b.shape} does not conform to weight {W.shape}")

    def _backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return record(x.data @ W.data + b.data, (x, W, b), _backward, "fully_connected")


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, dim: int, momentum: float = 0.9):
        self.momentum = momentum
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * batch_mean
        self.running_var = m * self.running_var + (1.0 - m) * batch_var_unbiased


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    eps: float = 1e-5,
    stats: BatchNormStats | None = None,
    update_stats: bool = True,
) -> Tensor:
    """Per-column batch normalisation followed by a learned affine map.

    In ``train`` mode the batch statistics are used (and folded into
    ``stats`` when given); ``eval`` mode reads ``stats``.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if stats is not None and update_stats:
            stats.update(mu, var * n / (n - 1))

        def _backward(g):
            dxhat = g * gamma.data
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    elif mode == "eval":
        if stats is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        inv = 1.0 / np.sqrt(stats.running_var + eps)
        xhat = (x.data - stats.running_mean) * inv

        def _backward(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return record(xhat * gamma.data + beta.data, (x, gamma, beta), _backward, "batch_norm")


class NonFiniteError(ValueError):
    """A NaN reached an op that cannot give a meaningful result for it."""


def _check_finite(z: np.ndarray, op: str) -> None:
    if np.isnan(z).any():
        raise NonFiniteError(f"{op}: NaN in input")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    _check_finite(z.data, "softmax")
    p = _softmax_rows(z.data)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record(p, (z,), _backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    _check_finite(z.data, "log_softmax")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return record(out, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    _check_finite(logits.data, "cross_entropy")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float((lse - shifted[rows, labels]).mean())

    def _backward(g):
        d = _softmax_rows(logits.data)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return record(np.array(loss), (logits,), _backward, "cross_entropy")


def l2_normalize(v: Tensor) -> Tensor:
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ValueError("l2_normalize: zero-norm row")
    y = v.data / norms

    def _backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return record(y, (v,), _backward, "l2_normalize")


def _branches(loss: Tensor) -> list[np.ndarray]:
    return [n.branch for n in Graph.trace(loss).nodes if n.branch is not None]


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped_at_kinks: int
    worst_index: tuple[int, int] | None = None  # (parameter position, flat index)


def gradient_check_detailed(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-4,
    skip_kinks: bool = True,
) -> GradCheckResult:
    """Compare analytic gradients with central differences (f(p+h) - f(p-h)) / 2h.

    ``f`` takes no arguments and rebuilds the loss from the current contents
    of ``params``.  Per component the relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  With ``skip_kinks`` a component is
    left out when the two perturbed evaluations land on different pieces of
    a piecewise op (ReLU, argmax, clamp): the point lies within h of a kink
    and the difference quotient is meaningless there.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("gradient_check: loss is not finite")
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for pi, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = f()
            flat[i] = orig - h
            lm = f()
            flat[i] = orig
            fp, fm = lp.item(), lm.item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("gradient_check: loss is not finite under perturbation")
            if skip_kinks and not _same_branches(_branches(lp), _branches(lm)):
                skipped += 1
                continue
            checked += 1
            num = (fp - fm) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
            if err > worst:
                worst, worst_at = err, (pi, i)
    zero_grad(params)
    return GradCheckResult(worst, checked, skipped, worst_at)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-4,
    skip_kinks: bool = True,
) -> float:
    """Maximum relative error of analytic vs. central-difference gradients."""
    return gradient_check_detailed(f, params, h, floor, skip_kinks).max_relative_error
