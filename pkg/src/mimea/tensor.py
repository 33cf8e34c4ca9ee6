"""Dense 2-D tensors with a reverse-mode autodiff tape.

Every value is a 2-D float64 array; scalars are 1x1.  Operations only record
onto a tape when one is active (``with Tape() as tape:``) and at least one
input is tracked.  Broadcasting is limited to row vectors (1 x n), column
vectors (n x 1) and 1x1 scalars.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w]
    array([[2., 4.]])
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import special
from .errors import DomainError, ShapeError

DEFAULT_LEAKY_SLOPE = 0.2

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording; ops inside produce untracked tensors."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node = None
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node = None
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor._wrap(self.data)

    def tracked(self, tape):
        if tape is None:
            return False
        if self.requires_grad:
            return True
        return self.node is not None and self.node[0] is tape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`.

    Indexing with a tensor that the loss does not reach yields zeros.
    """

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, tensor):
        entry = self._grads.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.data)
        return entry[1]

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        return [(t, g) for t, g in self._grads.values()]


class Tape:
    """Records operations in execution order and replays them backwards.

    A tape belongs to one thread and one training step.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def record(self, out, parents, vjp):
        out.node = (self, len(self.nodes))
        self.nodes.append((out, parents, vjp))

    def backward(self, loss):
        """Propagate d(loss)/d(.) to every tracked leaf; returns :class:`Gradients`."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 loss, got {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise ValueError("loss was not produced on this tape")
        pending = {id(loss): np.ones((1, 1))}
        leaves = {}
        for idx in range(loss.node[1], -1, -1):
            out, parents, vjp = self.nodes[idx]
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.tracked(self):
                    continue
                if parent.node is not None and parent.node[0] is self:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
                else:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
        for t, g in leaves.values():
            t.grad = g
        return Gradients(leaves)


def _make(arr, parents, vjp):
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(p.tracked(tape) for p in parents):
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot {op} shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "divide")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    """Matrix product; gradients dA = dC B^T and dB = A^T dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x):
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def tsum(x, axis=None):
    """Sum of all entries (1x1), or over rows (axis=0 -> 1 x cols) / cols (axis=1 -> rows x 1)."""
    x = as_tensor(x)
    if axis is None:
        return _make(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(x.shape, g[0, 0]),))
    out = x.data.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


def concat(tensors, axis=1):
    """Concatenate along columns (axis=1) or rows (axis=0)."""
    tensors = [as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat along axis {axis} needs equal {('rows', 'cols')[other]}: "
                         f"{[t.shape for t in tensors]}")
    edges = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        if axis == 1:
            return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(tensors)))
        return tuple(g[edges[i]:edges[i + 1], :] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take_cols(x, start, stop):
    if not 0 <= start < stop <= x.cols:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), vjp)


def take_rows(x, index):
    """Gather rows by integer index (duplicates allowed; gradients accumulate)."""
    idx = np.asarray(index, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ShapeError("take_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= x.rows:
        raise ShapeError(f"row index out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx].copy(), (x,), vjp)


# ---------------------------------------------------------------- elementwise

def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=DEFAULT_LEAKY_SLOPE):
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    bad = np.argwhere(~(x.data > 0))
    if bad.size:
        r, c = bad[0]
        raise DomainError(f"log needs positive entries; entry ({r}, {c}) = {x.data[r, c]}")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x):
    """ln(1 + e^x), computed without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _make(out, (x,), lambda g: (g * sig,))


def tabs(x):
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def lgamma(x):
    return _make(special.lgamma(x.data), (x,), lambda g: (g * special.digamma(x.data),))


def digamma(x):
    return _make(special.digamma(x.data), (x,), lambda g: (g * special.trigamma(x.data),))


def l2_normalize_rows(x, eps=0.0):
    """Scale each row to unit Euclidean norm.

    With ``eps == 0`` a zero row is a domain error; with ``eps > 0`` norms are
    floored at ``eps`` so zero rows stay zero.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if eps <= 0:
        zero = np.flatnonzero(norms[:, 0] == 0)
        if zero.size:
            raise DomainError(f"l2_normalize_rows: row {zero[0]} has zero norm")
        denom = norms
    else:
        denom = np.maximum(norms, eps)
    out = x.data / denom
    floored = (norms < denom)

    def vjp(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        # rows whose norm was floored behave like plain scaling by 1/eps
        return (np.where(floored, g / denom, (g - out * proj) / denom),)

    return _make(out, (x,), vjp)


def elementwise(kind, x, slope=DEFAULT_LEAKY_SLOPE):
    """Dispatch by name: relu, leaky_relu, exp, log, l2_normalize_rows."""
    table = {
        "relu": relu,
        "leaky_relu": lambda t: leaky_relu(t, slope),
        "exp": exp,
        "log": log,
        "l2_normalize_rows": l2_normalize_rows,
    }
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](as_tensor(x))


# ---------------------------------------------------------------- reductions

def rowwise_softmax(x, mask=None):
    """Softmax across each row, with max subtraction.

    ``mask`` (boolean, same shape) restricts each row's support; masked-out
    entries get probability 0.  Every row must keep at least one entry.
    """
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {d.shape}")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise RuntimeError(f"softmax row {empty[0]} has an empty support")
        d = np.where(mask, d, -np.inf)
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), vjp)


def weighted_logsumexp(x, weights):
    """Row-wise log(sum_j w_j exp(x_j)) for a constant nonnegative weight matrix."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} != input shape {x.shape}")
    if np.any(w < 0) or np.any(w.sum(axis=1) <= 0):
        raise DomainError("weights must be nonnegative with a positive row sum")
    d = np.where(w > 0, x.data, -np.inf)
    m = d.max(axis=1, keepdims=True)
    e = w * np.exp(d - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _make(m + np.log(s), (x,), lambda g: (g * soft,))
