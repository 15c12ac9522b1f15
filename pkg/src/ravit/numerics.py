"""Dense float64 tensors, a gradient tape, and the forward ops built on them.

Tensors are immutable after construction and every op checks its result for
NaN/Inf, so a numerical blow-up surfaces at the op that produced it. Values
are stored row-major (C order) as 64-bit floats; there is no other dtype.

Recording is thread-confined: at most one Tape is active per thread, and the
matmul op-count hooks are likewise per-thread, so read-only forward passes
may run concurrently.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


def _active_counters():
    return getattr(_tls, "counters", None)


def _check_finite(arr: np.ndarray) -> None:
    # A finite sum proves every entry is finite (any NaN/Inf contaminates
    # it), so the full elementwise scan only runs on the failure path.
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(arr.sum())
    if not math.isfinite(total):
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")


class Tensor:
    """Immutable row-major array of 64-bit floats."""

    __slots__ = ("_array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        _check_finite(arr)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal constructor that takes ownership of a freshly computed
        # array instead of copying it. ascontiguousarray would promote 0-d
        # arrays to 1-d, so only reorder when actually needed.
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr)
        arr.flags.writeable = False
        out = object.__new__(cls)
        out._array = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """The shaped values as a read-only ndarray."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values; length equals product(shape)."""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self._array.reshape(()))

    def tolist(self):
        return self._array.tolist()

    def __repr__(self) -> str:
        if self._array.size <= 8:
            return f"Tensor({self._array.tolist()!r})"
        return f"Tensor(shape={self.shape})"


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))


def full(shape, value: float) -> Tensor:
    return Tensor._wrap(np.full(shape, float(value)))


class TapeNode(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    grad_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of recorded ops.

    Nodes are appended in execution order, so every input of a node was
    produced earlier; the backward pass walks the list once in reverse.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False


class MacCounter:
    """Accumulates multiply-accumulate counts of matmuls run while counting.

    A matmul of (m, k) by (k, n) contributes m*k*n. Counters only observe
    calls made inside their `counting()` context on the same thread.
    """

    def __init__(self):
        self.total = 0

    @contextmanager
    def counting(self):
        stack = getattr(_tls, "counters", None)
        if stack is None:
            stack = _tls.counters = []
        stack.append(self)
        try:
            yield self
        finally:
            stack.pop()


def _emit(op: str, inputs: tuple, out_arr: np.ndarray, make_grad_fn) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(TapeNode(op, inputs, out, make_grad_fn()))
    return out


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m, k) and b (k, n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d tensors, got {a.shape} and {b.shape}")
    m, k = a.shape
    if b.shape[0] != k:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    n = b.shape[1]
    counters = _active_counters()
    if counters:
        macs = m * k * n
        for c in counters:
            c.total += macs
    aa, ba = a.array, b.array

    def make():
        return lambda g: (g @ ba.T, aa.T @ g)

    return _emit("matmul", (a, b), aa @ ba, make)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")

    def make():
        return lambda g: (g, g)

    return _emit("add", (a, b), a.array + b.array, make)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an (m, n) tensor."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias shapes disagree: {x.shape} vs {bias.shape}")

    def make():
        return lambda g: (g, g.sum(axis=0))

    return _emit("add_bias", (x, bias), x.array + bias.array, make)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python-float constant (not differentiated through)."""
    factor = float(factor)

    def make():
        return lambda g: (g * factor,)

    return _emit("scale", (x,), x.array * factor, make)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {x.shape}")

    def make():
        return lambda g: (g.T,)

    return _emit("transpose", (x,), x.array.T, make)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape

    def make():
        return lambda g: (g.reshape(old),)

    return _emit("reshape", (x,), x.array.reshape(shape), make)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"slice_rows needs a 2-d tensor, got {x.shape}")
    m = x.shape[0]
    if not (0 <= start < stop <= m):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {x.shape}")
    xs = x.shape

    def make():
        def grad(g):
            full_g = np.zeros(xs)
            full_g[start:stop] = g
            return (full_g,)

        return grad

    return _emit("slice_rows", (x,), x.array[start:stop], make)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-d tensor, got {x.shape}")
    n = x.shape[1]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {x.shape}")
    xs = x.shape

    def make():
        def grad(g):
            full_g = np.zeros(xs)
            full_g[:, start:stop] = g
            return (full_g,)

        return grad

    return _emit("slice_cols", (x,), x.array[:, start:stop], make)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = parts[0].shape[-1] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[1] != cols:
            raise ShapeError("concat_rows parts must be 2-d with equal column counts")
    sizes = [p.shape[0] for p in parts]

    def make():
        def grad(g):
            out, off = [], 0
            for s in sizes:
                out.append(g[off : off + s])
                off += s
            return tuple(out)

        return grad

    return _emit("concat_rows", tuple(parts), np.concatenate([p.array for p in parts], axis=0), make)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = parts[0].shape[0] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols parts must be 2-d with equal row counts")
    sizes = [p.shape[1] for p in parts]

    def make():
        def grad(g):
            out, off = [], 0
            for s in sizes:
                out.append(g[:, off : off + s])
                off += s
            return tuple(out)

        return grad

    return _emit("concat_cols", tuple(parts), np.concatenate([p.array for p in parts], axis=1), make)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar (shape ()) tensor."""
    xs = x.shape

    def make():
        return lambda g: (np.full(xs, float(g)),)

    return _emit("sum_all", (x,), np.asarray(x.array.sum()), make)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an (m, n) tensor, max-subtracted for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got {x.shape}")
    z = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def make():
        def grad(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            return ((g - dot) * y,)

        return grad

    return _emit("softmax_rows", (x,), y, make)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of an (m, d) tensor: gamma * (x - mu)/sigma + beta.

    Uses the population variance of each row; eps keeps the zero-variance
    case finite.
    """
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-d tensor, got {x.shape}")
    d = x.shape[1]
    if d < 1:
        raise ShapeError("layer_norm needs at least one feature")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale/shift must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.array.mean(axis=1, keepdims=True)
    centered = x.array - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.array + beta.array
    ga = gamma.array

    def make():
        def grad(g):
            dxhat = g * ga
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return grad

    return _emit("layer_norm", (x, gamma, beta), out, make)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Elementwise x * Phi(x) via the tanh approximation."""
    xa = x.array
    inner = _GELU_K * (xa + _GELU_A * (xa * xa * xa))
    t = np.tanh(inner)
    out = 0.5 * xa * (1.0 + t)

    def make():
        def grad(g):
            dinner = _GELU_K * (1.0 + 3.0 * _GELU_A * xa * xa)
            return (g * (0.5 * (1.0 + t) + 0.5 * xa * (1.0 - t * t) * dinner),)

        return grad

    return _emit("gelu", (x,), out, make)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] via log-sum-exp, as a scalar tensor."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-d logits tensor, got {logits.shape}")
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    la = logits.array
    m = la.max()
    z = la - m
    e = np.exp(z)
    total = e.sum()
    loss = math.log(total) + m - la[label]
    probs = e / total

    def make():
        def grad(g):
            d = probs.copy()
            d[label] -= 1.0
            return (d * float(g),)

        return grad

    return _emit("cross_entropy", (logits,), np.asarray(loss), make)


def entropy_nats(p: Tensor) -> float:
    """Shannon entropy -sum(p ln p) in nats of a probability vector."""
    if p.ndim != 1:
        raise ShapeError(f"entropy_nats needs a 1-d tensor, got {p.shape}")
    pa = p.array
    if (pa < 0).any():
        raise ValueError("entropy_nats: probabilities must be non-negative")
    total = pa.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"entropy_nats: probabilities sum to {total!r}, not 1")
    nz = pa[pa > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar tape output with respect to leaf tensors.

    With `params` given, the result has exactly one entry per requested
    tensor; parameters the loss does not depend on get zeros. Without it,
    gradients for every reached leaf are returned. Each node is visited
    exactly once, in reverse recording order.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.grad_fn(g)
        for tensor, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            key = id(tensor)
            acc = grads.get(key)
            grads[key] = ig if acc is None else acc + ig
            if key not in produced:
                leaves[key] = tensor
    if params is None:
        return {t: Tensor._wrap(grads[key]) for key, t in leaves.items()}
    out: dict[Tensor, Tensor] = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = Tensor._wrap(g) if g is not None else zeros(p.shape)
    return out
