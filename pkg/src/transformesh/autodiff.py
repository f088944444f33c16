"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op computes its forward value eagerly and, when gradients are enabled and
an input requires them, records a closure mapping the output gradient to input
gradients. :func:`backward` runs the closures in reverse topological order.

Broadcasting is limited to leading-batch expansion: an operand may omit
leading axes of the other (a bias of shape ``(C,)`` added to ``(B, N, C)``),
nothing else.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

from ._records import read_records, write_records
from .errors import NonScalarError, ParseError, ShapeError

__all__ = [
    "Tensor", "Parameter", "no_grad", "is_grad_enabled", "RowIndex",
    "add", "sub", "mul", "scale", "matmul", "concat", "stack", "gather_rows",
    "reshape", "transpose", "tsum", "mean", "softmax", "layer_norm", "gelu",
    "elu", "tabs", "sparse_matmul", "backward", "adam_step", "Adam",
    "save_checkpoint", "load_checkpoint", "numerical_gradient", "relative_error",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Learnable leaf tensor with a unique path-like name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b} (only leading-batch expansion is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tabs(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    return _make(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg + alpha),))


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """``(k,) @ (k, m)``, ``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        # row vector: lift to (1, k) and drop the row axis again
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    if b.ndim == 2:
        # one GEMM over all leading rows
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), fn)

    def fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), fn)


_BLOCK_CACHE: dict = {}


def _block_diag(m: sparse.csr_matrix, copies: int) -> tuple:
    """``kron(I_copies, m)`` and its transpose, cached per matrix object."""
    key = (id(m), copies)
    hit = _BLOCK_CACHE.get(key)
    if hit is None or hit[0] is not m:
        big = sparse.kron(sparse.identity(copies, format="csr"), m, format="csr")
        hit = (m, big, big.T.tocsr())
        if len(_BLOCK_CACHE) > 256:
            _BLOCK_CACHE.clear()
        _BLOCK_CACHE[key] = hit
    return hit[1], hit[2]


def sparse_matmul(m: sparse.spmatrix, x) -> Tensor:
    """Apply a fixed sparse ``(P, N)`` matrix along axis -2 of ``x (..., N, C)``."""
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != m.shape[1]:
        raise ShapeError(f"sparse_matmul: matrix {m.shape} cannot act on features {x.shape}")
    if not isinstance(m, sparse.csr_matrix):
        m = sparse.csr_matrix(m)
    lead, c = x.shape[:-2], x.shape[-1]
    copies = int(np.prod(lead, dtype=np.int64)) if lead else 1
    big, big_t = _block_diag(m, copies)
    out = (big @ x.data.reshape(-1, c)).reshape(lead + (m.shape[0], c))
    return _make(out, (x,), lambda g: ((big_t @ g.reshape(-1, c)).reshape(x.shape),))


# ----------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


class RowIndex:
    """Gather table ``(M, l)`` over rows of a feature matrix; ``-1`` marks filler.

    Caches the sparse scatter matrix used by the backward pass.
    """

    def __init__(self, table: np.ndarray, n_rows: int):
        table = np.asarray(table, dtype=np.int64)
        if table.ndim != 2:
            raise ShapeError(f"gather table must be 2-D, got {table.shape}")
        if table.size and (table.max() >= n_rows or table.min() < -1):
            raise ShapeError(f"gather index out of range for {n_rows} rows")
        self.table = table
        self.n_rows = n_rows
        flat = table.ravel()
        self._flat = np.where(flat < 0, n_rows, flat)  # filler reads the appended zero row
        valid = flat >= 0
        self.scatter = sparse.csr_matrix(
            (np.ones(int(valid.sum())), (flat[valid], np.flatnonzero(valid))),
            shape=(n_rows, flat.size),
        )


def gather_rows(x, index) -> Tensor:
    """``x (..., N, C)`` -> ``(..., M, l, C)`` with zero rows where the index is filler."""
    x = _as_tensor(x)
    if not isinstance(index, RowIndex):
        index = RowIndex(index, x.shape[-2])
    if x.ndim < 2 or x.shape[-2] != index.n_rows:
        raise ShapeError(f"gather_rows: index built for {index.n_rows} rows, features {x.shape}")
    lead, c = x.shape[:-2], x.shape[-1]
    m, l = index.table.shape
    pad = np.concatenate([x.data, np.zeros(lead + (1, c))], axis=-2)
    out = np.take(pad, index._flat, axis=-2).reshape(lead + (m, l, c))
    copies = int(np.prod(lead, dtype=np.int64)) if lead else 1

    def fn(g):
        big, _ = _block_diag(index.scatter, copies)
        return ((big @ g.reshape(-1, c)).reshape(x.shape),)

    return _make(out, (x,), fn)


# ----------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _make(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), fn)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it."""
    if loss.data.size != 1:
        raise NonScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------- Adam


def adam_step(params, grads, moments, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, step=1):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are sequences of arrays; ``moments`` is a pair of
    sequences ``(m, v)``. Returns ``(new_params, (new_m, new_v))``; inputs are
    not modified.
    """
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    m_old, v_old = moments
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, m, v in zip(params, grads, m_old, v_old):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of Parameters."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_p, (self.m, self.v) = adam_step(
            [p.data for p in self.params], grads, (self.m, self.v),
            self.lr, self.beta1, self.beta2, self.eps, self.step_count,
        )
        for p, d in zip(self.params, new_p):
            p.data = d

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        recs = [("adam/step", np.array([self.step_count], dtype=np.float64))]
        for p, m, v in zip(self.params, self.m, self.v):
            recs += [(f"adam/m/{p.name}", m), (f"adam/v/{p.name}", v)]
        return recs

    def load_state_records(self, records: dict) -> None:
        self.step_count = int(records["adam/step"][0])
        self.m = [records[f"adam/m/{p.name}"].copy() for p in self.params]
        self.v = [records[f"adam/v/{p.name}"].copy() for p in self.params]


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"TMCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write ``(name, float64 array)`` records; reload is byte-exact."""
    write_records(
        path, _CKPT_MAGIC, CHECKPOINT_VERSION,
        [(name, np.asarray(arr, dtype=np.float64)) for name, arr in named_arrays],
    )


def load_checkpoint(path) -> dict[str, np.ndarray]:
    version, recs = read_records(path, _CKPT_MAGIC)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: checkpoint version {version} unsupported")
    return dict(recs)


# ------------------------------------------------------------ gradient checks


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the whole tensor (0 when both vanish)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
