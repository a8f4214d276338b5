"""Dense numpy-backed tensors with a reverse-mode autodiff tape.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how evaluation and generation run.

Matrix products report ``2*m*k*p`` FLOPs to the active :class:`FlopCounter`.
No other operation is counted; the analytic cost model in
:mod:`dtrnet.analysis` follows the same convention.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError


_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("dtrnet_tape", default=None)
_COUNTER: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "dtrnet_flop_counter", default=None
)
_SCOPE: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("dtrnet_flop_scope", default=())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f".T needs a 2-D tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a topological order by
    construction.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        output.requires_grad = True
        output.node = len(self.ops)
        output._tape = self
        self.ops.append(_Op(tuple(inputs), output, backward, name))

    def backward(self, loss: Tensor) -> None:
        if loss.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node is None:
            raise ContractError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for index in range(loss.node, -1, -1):
            grad_out = pending.pop(index, None)
            if grad_out is None:
                continue
            op = self.ops[index]
            for tensor, grad in zip(op.inputs, op.backward(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self and tensor.node is not None:
                    prev = pending.get(tensor.node)
                    pending[tensor.node] = grad if prev is None else prev + grad
                else:
                    key = id(tensor)
                    if key in leaves:
                        leaves[key] = (tensor, leaves[key][1] + grad)
                    else:
                        leaves[key] = (tensor, grad)
        for tensor, grad in leaves.values():
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad

    def clear(self) -> None:
        self.ops.clear()


def active_tape() -> Tape | None:
    return _TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording inside the block."""
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that requires a gradient."""
    if loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = _TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# FLOP instrumentation


@dataclass
class FlopCounter:
    total: int = 0
    by_scope: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add(self, flops: int) -> None:
        self.total += flops
        self.by_scope["/".join(_SCOPE.get())] += flops


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    token = _SCOPE.set(_SCOPE.get() + (name,))
    try:
        yield
    finally:
        _SCOPE.reset(token)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)`` elementwise."""
    s = _sigmoid(x.data)
    return _emit("silu", x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        raise TypeError("index with numpy arrays or slices, not tensors")

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", x.data[key], (x,), back)


def scatter_rows(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Place ``src`` rows at ``index`` in an otherwise-zero ``[n, ...]`` tensor.

    ``index`` must not contain duplicates.
    """
    index = np.asarray(index, dtype=np.intp)
    if src.shape[0] != index.shape[0]:
        raise DimensionError(f"scatter_rows: {src.shape[0]} rows for {index.shape[0]} indices")
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    out[index] = src.data
    return _emit("scatter_rows", out, (src,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def _wide(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) if x.dtype == np.float32 else x


def _wide_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Products of 32-bit operands accumulate in 64-bit and round once.

    Rounding a 64-bit accumulation makes the result (almost always)
    independent of the BLAS kernel's summation order, so batched and
    one-row products agree.
    """
    if a.dtype == np.float32 and b.dtype == np.float32:
        return (_wide(a) @ _wide(b)).astype(np.float32)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands share leading (batch) dimensions, or ``b`` is a
    plain matrix applied to every leading slice of ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    p = b.shape[-1]
    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(2 * batch * m * k * p)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", _wide_matmul(a.data, b.data), (a, b), back)


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    wide = _wide(x.data)
    e = np.exp(wide - np.max(wide, axis=axis, keepdims=True))
    out = (e / np.sum(e, axis=axis, keepdims=True)).astype(x.dtype)
    return _emit(
        "softmax",
        out,
        (x,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _emit(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),),
    )


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row by its reciprocal RMS, then by ``gain``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match rows of {x.shape}")
    wide = _wide(x.data)
    inv = (1.0 / np.sqrt(np.mean(wide * wide, axis=-1, keepdims=True) + eps)).astype(x.dtype)
    xhat = x.data * inv

    def back(g):
        g_hat = g * gain.data
        gx = inv * (g_hat - xhat * np.mean(g_hat * xhat, axis=-1, keepdims=True))
        g_gain = np.sum((g * xhat).reshape(-1, x.shape[-1]), axis=0)
        return gx, g_gain

    return _emit("rmsnorm", xhat * gain.data, (x, gain), back)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``.

    ``mask`` (optional, same length as ``targets``) restricts the mean to the
    positions where it is nonzero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id outside [0, {vocab})")
    weights = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    total = weights.sum()
    if total <= 0:
        raise ContractError("cross_entropy over an empty mask")
    weights = weights / total
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(targets.shape[0])
    nll = lse - shifted[rows, targets]
    loss = np.asarray(np.dot(weights, nll), dtype=logits.dtype)

    def back(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (weights[:, None] * g),)

    return _emit("cross_entropy", loss, (logits,), back)


# ---------------------------------------------------------------------------
# positional encoding


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary encoding of ``x`` with shape ``[m, heads, head_dim]`` at absolute ``positions``."""
    if x.ndim != 3 or x.shape[0] != len(positions):
        raise DimensionError(f"rope expects [m, heads, head_dim] for {len(positions)} positions, got {x.shape}")
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise DimensionError(f"rope needs an even head_dim, got {head_dim}")
    half = head_dim // 2
    cos, sin = rope_tables(positions, head_dim, base, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def back(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _emit("rope", out, (x,), back)


def causal_bias(query_positions: np.ndarray, key_positions: np.ndarray, dtype) -> np.ndarray:
    """Additive mask: 0 where key position <= query position, -inf elsewhere."""
    allowed = np.asarray(key_positions)[None, :] <= np.asarray(query_positions)[:, None]
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))
