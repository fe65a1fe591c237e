"""Minimal define-by-run reverse-mode differentiation on float64 numpy arrays.

Every differentiable op appends a :class:`TapeEntry` to the output tensor.
Entry ids come from a global monotone counter, so sorting the entries
reachable from a loss by id recovers the order in which they were
recorded; :func:`backward` replays that tape in reverse.

Broadcasting is deliberately narrow: the only mixed-shape addition is a
row vector (``(n,)`` or ``(1, n)``) added to every row of an ``(m, n)``
matrix.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """Operand has the wrong number of dimensions."""


class LabelError(ValueError):
    """Class label outside the logits' range."""


class DegenerateBatchError(ValueError):
    """Every entry of a batch is masked out."""


class OptimizerError(RuntimeError):
    """A parameter handed to the optimizer has no gradient."""


class NumericalAbort(RuntimeError):
    """Loss went non-finite; ``diagnostics`` holds lr, batch id and gradient norms."""

    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class TapeEntry:
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array that records the ops producing it.

    Only leaves (tensors created directly, not by an op) keep a ``grad``
    after :func:`backward`; intermediate gradients are discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_entry", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._entry: TapeEntry | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> int:
        return self._entry.id if self._entry is not None else self._id

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._entry = TapeEntry(out._id, op, inputs, backward) if out.requires_grad else None
    return out


def tape_of(loss: Tensor) -> list[TapeEntry]:
    """Entries reachable from ``loss`` in recording order."""
    seen: dict[int, TapeEntry] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        e = t._entry
        if e is None or e.id in seen:
            continue
        seen[e.id] = e
        stack.extend(e.inputs)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._entry is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for entry in reversed(tape_of(loss)):
        g = grads.pop(entry.id, None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._entry is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = inp._id
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), back)


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a tensor."""
    if adj.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm shapes {adj.shape} and {x.shape} do not align")
    adj_t = adj.T.tocsr()

    def back(g):
        return (adj_t @ g,)

    return _record("spmm", np.asarray(adj @ x.data), (x,), back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise RankError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product: block (i, j) of the result is ``a[i, j] * b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise RankError(f"kron needs 2-D operands, got {a.shape} and {b.shape}")
    p, q = a.shape
    r, s = b.shape
    A, B = a.data, b.data
    out = np.einsum("ij,uv->iujv", A, B).reshape(p * r, q * s)

    def back(g):
        blocks = g.reshape(p, r, q, s)
        return np.einsum("iujv,uv->ij", blocks, B), np.einsum("iujv,ij->uv", blocks, A)

    return _record("kron", out, (a, b), back)


# ----------------------------------------------------------------- elementwise


def _row_broadcast(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(big) == 2 and (small == (big[1],) or small == (1, big[1]))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if _row_broadcast(a.shape, b.shape) or _row_broadcast(b.shape, a.shape):
        return
    raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", a.data[idx], (a,), back)


def row_sum(a: Tensor) -> Tensor:
    """Sum along columns: ``(m, n) -> (m, 1)``."""
    if a.ndim != 2:
        raise RankError(f"row_sum needs a 2-D tensor, got shape {a.shape}")
    n = a.shape[1]
    return _record("row_sum", a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.repeat(g, n, axis=1),))


def mean_rows(a: Tensor) -> Tensor:
    """Average of the rows: ``(m, n) -> (1, n)``."""
    if a.ndim != 2:
        raise RankError(f"mean_rows needs a 2-D tensor, got shape {a.shape}")
    m = a.shape[0]
    if m == 0:
        raise DimensionError("mean_rows of an empty matrix")
    return _record("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g / m, m, axis=0),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def sum_sq_diff(x: Tensor, y: Tensor) -> Tensor:
    """``sum((x - y)**2)`` as a scalar."""
    if x.shape != y.shape:
        raise DimensionError(f"sum_sq_diff: shapes {x.shape} and {y.shape} differ")
    d = x.data - y.data
    return _record("sum_sq_diff", np.array((d * d).sum()), (x, y),
                   lambda g: (2.0 * float(g) * d, -2.0 * float(g) * d))


def straight_through(source: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward hands the incoming gradient to ``source``."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != source.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {source.shape}")
    return _record("straight_through", value.copy(), (source,), lambda g: (g,))


# ------------------------------------------------------------------------ losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean cross-entropy.

    With ``mask=None``, ``labels`` are integer class indices and the loss is
    softmax cross-entropy over the columns of ``logits``. With a mask,
    ``labels`` are 0/1 targets of the same shape as ``logits`` and each valid
    entry contributes a sigmoid cross-entropy term.
    """
    if logits.ndim != 2:
        raise RankError(f"logits must be 2-D, got shape {logits.shape}")
    Z = logits.data
    b, c = Z.shape
    if mask is None:
        y = np.asarray(labels, dtype=np.intp).reshape(-1)
        if y.shape[0] != b:
            raise DimensionError(f"{y.shape[0]} labels for {b} rows of logits")
        if b == 0:
            raise DegenerateBatchError("empty batch")
        if (y < 0).any() or (y >= c).any():
            raise LabelError(f"labels must lie in [0, {c}), got {y.min()}..{y.max()}")
        logp = _log_softmax(Z)
        loss = -logp[np.arange(b), y].mean()

        def back(g):
            p = np.exp(logp)
            p[np.arange(b), y] -= 1.0
            return (float(g) * p / b,)

        return _record("softmax_ce", np.array(loss), (logits,), back)

    t = np.nan_to_num(np.asarray(labels, dtype=np.float64).reshape(b, c))
    m = np.asarray(mask, dtype=bool).reshape(b, c)
    n_valid = int(m.sum())
    if n_valid == 0:
        raise DegenerateBatchError("every target in the batch is masked")
    # log(1 + exp(-|z|)) form is stable for large |z|
    per = np.maximum(Z, 0.0) - Z * t + np.log1p(np.exp(-np.abs(Z)))
    loss = (per * m).sum() / n_valid

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * Z))
        return (float(g) * (sig - t) * m / n_valid,)

    return _record("sigmoid_ce", np.array(loss), (logits,), back)


# --------------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise OptimizerError(f"parameter {p.name or i!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def numerical_grad(f: Callable[[], float], x: Tensor, index, eps: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. one entry of ``x`` (restored after)."""
    old = x.data[index]
    x.data[index] = old + eps
    hi = f()
    x.data[index] = old - eps
    lo = f()
    x.data[index] = old
    return (hi - lo) / (2.0 * eps)
