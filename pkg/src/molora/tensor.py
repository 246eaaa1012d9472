"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap C-contiguous (row-major) numpy arrays in one of two float
precisions: float32 for training, float64 for gradient-check work. The
autodiff graph is built from parent links plus a backward closure per op;
``backward()`` replays the graph in reverse topological order. Gradients
accumulate across repeated backward calls until ``zero_grad()``.

Single-writer discipline: a graph and its tensors belong to one logical
thread. Tensors with ``requires_grad=False`` are immutable from autodiff's
point of view and safe to share read-only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class GraphError(RuntimeError):
    """Raised on autodiff contract violations (e.g. backward on a non-scalar)."""


def _as_array(data, dtype) -> np.ndarray:
    if dtype is None:
        # Preserve an explicit float64 array (gradient-check mode); everything
        # else lands in the float32 training default.
        if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
    else:
        arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """A row-major dense array with optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], None] | None = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backprop: Callable[[np.ndarray], None]) -> "Tensor":
        """Build an op-result node. Graph links are kept only if some parent
        participates in differentiation; otherwise the result is a detached
        constant and backward never visits it."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backprop = backprop
        else:
            out._parents = ()
            out._backprop = None
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backprop = None
        return out

    # -- gradients ---------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from this scalar. Populates ``grad`` on every
        requires_grad tensor reachable through the graph; repeated calls
        accumulate."""
        if self.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        # Iterative post-order topological sort; the graph can be deep.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # Each call computes one fresh gradient pass; grads accumulated by
        # earlier passes are set aside so intermediate nodes are not
        # double-counted, then added back at the end.
        saved: dict[int, np.ndarray] = {}
        for node in topo:
            if node.grad is not None:
                saved[id(node)] = node.grad
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)
        for node in topo:
            prior = saved.get(id(node))
            if prior is not None:
                if node.grad is None:
                    node.grad = prior
                else:
                    node.grad += prior

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce_const(value, like: Tensor) -> np.ndarray | float:
    """Non-Tensor operands enter the graph as constants (no gradient)."""
    if isinstance(value, (int, float)):
        return float(value)
    return np.asarray(value, dtype=like.data.dtype)


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _coerce_const(b, a)
        out_data = a.data + c

        def bp(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))

        return Tensor._from_op(out_data, (a,), bp)

    out_data = a.data + b.data

    def bp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), bp)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_coerce_const(b, a))
    out_data = a.data - b.data

    def bp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), bp)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _coerce_const(b, a)
        out_data = a.data * c

        def bp(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * c, a.shape))

        return Tensor._from_op(out_data, (a,), bp)

    out_data = a.data * b.data

    def bp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), bp)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors.

    Backward: dL/da = g @ b.T, dL/db = a.T @ g.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), bp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def bp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor._from_op(out_data, (a,), bp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for x of shape [T, in] and w of shape [out, in].

    The fused form keeps weight matrices in their natural [out, in] layout.
    """
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear needs 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear input dim mismatch: x {x.shape} vs w {w.shape}")
    out_data = x.data @ w.data.T

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)

    return Tensor._from_op(out_data, (x, w), bp)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup: table[ids]. Backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): {idx.tolist()}")
    out_data = np.ascontiguousarray(table.data[idx])

    def bp(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return Tensor._from_op(out_data, (table,), bp)


def rows_select(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(rows, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"rows_select needs a 2-D tensor, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range [0, {x.shape[0]})")
    out_data = np.ascontiguousarray(x.data[idx])

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return Tensor._from_op(out_data, (x,), bp)


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"col_slice needs a 2-D tensor, got {x.shape}")
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += g

    return Tensor._from_op(out_data, (x,), bp)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    parts = list(parts)
    for p in parts:
        if p.ndim != 2:
            raise ShapeError(f"concat_cols needs 2-D tensors, got {p.shape}")
    out_data = np.ascontiguousarray(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def bp(g: np.ndarray) -> None:
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(g[:, ofs:ofs + w])
            ofs += w

    return Tensor._from_op(out_data, tuple(parts), bp)


# -- reductions --------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return Tensor._from_op(out_data, (x,), bp)


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = x.size
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.shape).astype(x.data.dtype))

    return Tensor._from_op(out_data, (x,), bp)


# -- nonlinearities ----------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction.

    Rows of -inf entries are allowed as long as each row keeps at least one
    finite entry (used for causal masking); masked positions come out exactly
    zero.
    """
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate((g - inner) * s)

    return Tensor._from_op(np.ascontiguousarray(s), (x,), bp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    sig = _sigmoid(x.data)
    out_data = x.data * sig

    def bp(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return Tensor._from_op(out_data, (x,), bp)


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """Per trailing vector: x / sqrt(mean(x^2) + eps) * weight."""
    if eps <= 0:
        raise ValueError(f"rmsnorm eps must be positive, got {eps}")
    d = x.shape[-1]
    if weight.shape != (d,):
        raise ShapeError(
            f"rmsnorm weight shape {weight.shape} does not match last dim {d}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv
    out_data = normed * weight.data

    def bp(g: np.ndarray) -> None:
        if weight.requires_grad:
            axes = tuple(range(g.ndim - 1))
            weight._accumulate((g * normed).sum(axis=axes))
        if x.requires_grad:
            gw = g * weight.data
            inner = (gw * x.data).sum(axis=-1, keepdims=True)
            x._accumulate(gw * inv - x.data * (inv ** 3) * inner / d)

    return Tensor._from_op(out_data, (x, weight), bp)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[t, targets[t]] over rows.

    Backward is the classic (softmax - onehot) / T.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if idx.shape != (t,):
        raise ShapeError(
            f"cross_entropy targets length {idx.shape} does not match rows {t}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + zmax
    logp = z - lse
    out_data = np.asarray(-logp[np.arange(t), idx].mean(), dtype=z.dtype)

    def bp(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = e / e.sum(axis=-1, keepdims=True)
            p[np.arange(t), idx] -= 1.0
            logits._accumulate(g * p / t)

    return Tensor._from_op(out_data, (logits,), bp)


# -- finite-difference oracle -------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Compare autodiff and central finite-difference gradients of f at x.

    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8). Run at float64; float32 rounding
    swamps the difference quotient.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    if out.size != 1:
        raise GraphError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(f(probe.detach()).data)
        flat[i] = keep - step
        lo = float(f(probe.detach()).data)
        flat[i] = keep
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def global_grad_norm(params: Iterable[Tensor]) -> float:
    """L2 norm over all gradients of the given tensors (missing grads count 0)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
