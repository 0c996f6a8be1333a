"""Dense tensors with a dynamic reverse-mode tape.

A ``Tensor`` wraps a row-major numpy array (float64 by default, float32 as an
opt-in global mode used by the benchmark path) together with the bookkeeping
needed for reverse-mode differentiation: parent nodes and a backward closure.
Creation order of nodes is a valid forward (topological) order, so backward()
is a single reverse sweep.

Every operation validates that its output is finite; NaN/Inf raises
``NonFiniteError`` instead of propagating silently.

The random generator is counter-based (Philox), so a given seed produces the
same stream on every platform, bit-exact in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Rng",
    "tensor",
    "param",
    "zeros",
    "ones",
    "full",
    "matmul",
    "softmax_rows",
    "concat",
    "permute",
    "transpose",
    "cumsum",
    "embedding_lookup",
    "cross_entropy",
    "sigmoid",
    "silu",
    "elu1",
    "exp",
    "log",
    "no_grad",
    "grad_enabled",
    "set_default_dtype",
    "default_dtype",
    "track_allocations",
    "custom_op",
]


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_grad_enabled = True
_alloc_log: list[int] | None = None


def set_default_dtype(name: str) -> None:
    """Select the global precision mode ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype mode {name!r}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (forward-only mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def track_allocations():
    """Record element counts of every tensor created inside the block.

    Used by structural memory assertions (e.g. "the recurrent path never
    allocates a T x T intermediate").
    """
    global _alloc_log
    prev = _alloc_log
    _alloc_log = log = []
    try:
        yield log
    finally:
        _alloc_log = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # cheap one-pass screen: a non-finite entry makes the sum non-finite; the
    # full scan only runs to rule out pure summation overflow
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Dense n-dimensional array node.

    ``data`` is the flat row-major (C-contiguous) numpy buffer reshaped to
    ``shape``. Leaves created with ``requires_grad=True`` are trainable
    parameters; gradients accumulate into ``grad`` during backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=_default_dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, op)
        if _alloc_log is not None:
            _alloc_log.append(arr.size)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.op = op

    # -- basic introspection -------------------------------------------------

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
    def flat(self) -> np.ndarray:
        """Flat row-major view of the underlying storage."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar loss.

        The graph is a DAG by construction (nodes only reference older nodes),
        so an iterative DFS gives a topological order without cycle risk.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


# -- construction helpers ------------------------------------------------------


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def param(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, op="param")


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype))


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_default_dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    # first contribution keeps a reference (closures hand over fresh arrays
    # and nothing mutates grads in place); later ones allocate the sum
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def custom_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None] | None,
    op: str,
) -> Tensor:
    """Build a tape node from raw forward output and a backward closure.

    ``backward`` receives the output gradient and must accumulate into the
    parents via their ``grad`` fields (helpers below use ``_accum``). When the
    tape is disabled or no parent requires grad, the node is a plain leaf.
    """
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out_data, op=op)
    return Tensor(out_data, requires_grad=True, _parents=parents, _backward_fn=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    _check_finite(out, "add")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return custom_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    _check_finite(out, "sub")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return custom_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    _check_finite(out, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return custom_op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data
    _check_finite(out, "div")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return custom_op(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = _coerce(a)
    e = float(exponent)
    out = a.data**e
    _check_finite(out, "pow")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * e * a.data ** (e - 1.0))

    return custom_op(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):  # overflow surfaces via the finite check
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out)

    return custom_op(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore"):  # log(0) -> -inf, surfaced by the finite check
        out = np.log(a.data)
    _check_finite(out, "log")

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return custom_op(out, (a,), backward, "log")


try:  # scipy's expit is a single fused pass; the fallback is the stable two-branch form
    from scipy.special import expit as _sigmoid_np
except ImportError:  # pragma: no cover

    def _sigmoid_np(x: np.ndarray) -> np.ndarray:
        z = np.exp(-np.abs(x))  # never overflows
        s = 1.0 / (1.0 + z)
        return np.where(x >= 0, s, 1.0 - s)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out * (1.0 - out))

    return custom_op(out, (a,), backward, "sigmoid")


def silu(a) -> Tensor:
    a = _coerce(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return custom_op(out, (a,), backward, "silu")


def elu1(a) -> Tensor:
    """Shifted exponential-linear map: x+1 for x > 0, exp(x) otherwise.

    Strictly positive, used as the default feature map of the recurrent
    attention form.
    """
    a = _coerce(a)
    neg = np.exp(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data + 1.0, neg)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * np.where(a.data > 0, 1.0, neg))

    return custom_op(out, (a,), backward, "elu1")


# -- shape ops -------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return custom_op(out, (a,), backward, "reshape")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return custom_op(out, (a,), backward, "permute")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _coerce(a)
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.swapaxes(g, -1, -2))

    return custom_op(out, (a,), backward, "transpose")


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(
        isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts
    )


def getitem(a, key) -> Tensor:
    a = _coerce(a)
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            gp = np.zeros_like(a.data)
            if _is_basic_key(key):
                gp[key] += g
            else:
                np.add.at(gp, key, g)  # fancy keys may repeat indices
            _accum(a, gp)

    return custom_op(np.array(out, dtype=a.data.dtype), (a,), backward, "getitem")


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return custom_op(out, tuple(parts), backward, "concat")


# -- reductions ------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return custom_op(np.asarray(out), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    out = np.cumsum(a.data, axis=axis)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return custom_op(out, (a,), backward, "cumsum")


# -- matmul ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (both operands >= 2-D)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _check_finite(out, "matmul")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast_matmul(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast_matmul(gb, b.shape))

    return custom_op(out, (a, b), backward, "matmul")


def _unbroadcast_matmul(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i in range(len(shape) - 2):
        if shape[i] == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- softmax and loss --------------------------------------------------------------


def softmax_rows(x, mask=None) -> Tensor:
    """Row-wise softmax over the last axis, overflow-safe via max subtraction.

    ``mask`` (0/1, broadcastable to ``x``) restricts each row to its unmasked
    entries; masked outputs are exactly zero. A fully masked row is an error.
    """
    x = _coerce(x)
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        m = np.broadcast_to(m.astype(bool), z.shape)
        if not m.any(axis=-1).all():
            raise ValueError("softmax_rows: row with every entry masked")
        neg = np.finfo(z.dtype).min / 4
        z = np.where(m, z, neg)
    rowmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - rowmax)
    if mask is not None:
        e = np.where(m, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            _accum(x, out * (g - inner))

    return custom_op(out, (x,), backward, "softmax_rows")


def cross_entropy(logits, targets: np.ndarray, mask=None) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    ``logits`` has shape [..., V]; ``targets`` is an integer array of shape
    [...]; ``mask`` (same shape as targets) selects scored positions. Computed
    overflow-safely via the log-sum-exp trick.
    """
    logits = _coerce(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} != logits batch shape {logits.shape[:-1]}")
    if mask is None:
        m = np.ones(t.shape, dtype=logits.data.dtype)
    else:
        m = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)).astype(logits.data.dtype)
    count = m.sum()
    if count <= 0:
        raise ValueError("cross_entropy: empty loss mask")
    z = logits.data
    rowmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - rowmax)
    sums = e.sum(axis=-1)
    lse = np.log(sums) + rowmax[..., 0]
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * m).sum() / count)

    def backward(g):
        if logits.requires_grad:
            soft = e / sums[..., None]
            onehot = np.zeros_like(z)
            np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
            _accum(logits, g * (soft - onehot) * (m / count)[..., None])

    return custom_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` [V x d] by integer ``ids`` [...]."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding_lookup: id out of range")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, gt)

    return custom_op(out, (table,), backward, "embedding_lookup")


# -- random numbers -----------------------------------------------------------------


def _mix64(x: int) -> int:
    # splitmix64 finalizer; pure integer math, platform independent
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class Rng:
    """Seeded deterministic stream over a counter-based generator (Philox).

    Identical seeds give identical draws on every platform. ``child`` derives
    an independent stream from integer tags, so data pipelines can key
    generation by (seed, step, slot) without sharing mutable state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *tags: int) -> "Rng":
        s = self.seed
        for t in tags:
            s = _mix64(s ^ _mix64(int(t) & 0xFFFFFFFFFFFFFFFF))
        return Rng(s)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(_default_dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return (self._gen.random(shape) * (high - low) + low).astype(_default_dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
