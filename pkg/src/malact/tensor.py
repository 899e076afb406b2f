"""Small define-by-run autodiff engine over numpy arrays (float64 by default).

Only the operations needed by the byte CNN are provided: embedding lookup,
1-D convolution, 1-D max pooling, dense layers, ReLU, sigmoid, dropout and a
binary cross-entropy loss. Convolution, pooling and dense layers accept an
optional leading batch axis.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, StateError

DTYPE = np.float64
_active = [DTYPE]


def active_dtype():
    return _active[-1]


@contextmanager
def precision(dtype):
    """Build tensors in ``dtype`` inside the block (float32 halves training cost)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InputError(f"unsupported precision {dtype}")
    _active.append(dtype)
    try:
        yield
    finally:
        _active.pop()


class Tensor:
    """Dense float array that records how it was produced.

    ``grad`` is a plain numpy array of the same shape, filled in by
    :meth:`backward` for every tensor with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data, dtype=_active[-1])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=_active[-1], copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar node into every upstream tensor."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {self.shape}")
        if self._backward is None and not self._parents:
            raise StateError("no recorded forward graph ends at this tensor")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


@dataclass
class Parameter:
    name: str
    tensor: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_active[-1]), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / shape helpers
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.sum(a.data).reshape(()), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def embedding_lookup(symbols, table: Tensor) -> Tensor:
    """Map symbol ids to embedding columns.

    ``symbols`` of shape ``[L]`` gives ``[dim, L]``; ``[B, L]`` gives
    ``[B, dim, L]``. The gradient scatters back only into the rows touched.
    """
    sym = np.asarray(symbols)
    if sym.dtype.kind not in "iu":
        raise InputError("symbols must be integers")
    vocab, dim = table.shape
    bad = np.flatnonzero((sym.reshape(-1) < 0) | (sym.reshape(-1) >= vocab))
    if bad.size:
        pos = np.unravel_index(bad[0], sym.shape)
        raise InputError(
            f"symbol {int(sym[pos])} at offset {tuple(int(i) for i in pos)} is outside [0, {vocab})"
        )
    out = np.moveaxis(table.data[sym], -1, -2)

    def backward(g):
        g_rows = np.moveaxis(g, -2, -1).reshape(-1, dim)
        flat = sym.reshape(-1)
        acc = np.stack(
            [np.bincount(flat, weights=g_rows[:, d], minlength=vocab) for d in range(dim)], axis=1
        )
        table._accumulate(acc)

    return _result(np.ascontiguousarray(out), (table,), backward)


def conv_output_length(length: int, width: int, stride: int) -> int:
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if length < width:
        raise DimensionError(f"length {length} shorter than window {width}")
    return (length - width) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation.

    ``x`` is ``[c_in, L]`` or ``[B, c_in, L]``; ``kernels`` is
    ``[c_out, c_in, w]``. Output is ``[(B,) c_out, L_out]`` with
    ``L_out = (L - w) // stride + 1``.
    """
    if kernels.ndim != 3:
        raise DimensionError(f"kernels must be 3-D, got shape {kernels.shape}")
    if x.ndim not in (2, 3):
        raise DimensionError(f"conv1d input must be 2-D or 3-D, got shape {x.shape}")
    c_out, c_in, w = kernels.shape
    if x.shape[-2] != c_in:
        raise DimensionError(
            f"input channel axis {x.shape[-2]} does not match kernel input axis {c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match kernel output axis {c_out}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    B, _, L = xd.shape
    L_out = conv_output_length(L, w, stride)

    # columns laid out [B, c_in * w, L_out] so every matmul is batched over B
    windows = sliding_window_view(xd, w, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(B, c_in * w, L_out)
    wmat = kernels.data.reshape(c_out, c_in * w)
    out = np.matmul(wmat, cols)
    out += bias.data[None, :, None]

    def backward(g):
        gb = g if batched else g[None]
        if kernels.requires_grad:
            kernels._accumulate(np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape))
        if bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gb).reshape(B, c_in, w, L_out)
            dx = np.zeros_like(xd)
            span = stride * (L_out - 1) + 1
            for k in range(w):
                dx[:, :, k : k + span : stride] += dcols[:, :, k, :]
            x._accumulate(dx if batched else dx[0])

    return _result(out if batched else out[0], (x, kernels, bias), backward)


def maxpool1d(x: Tensor, width: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Max over sliding windows along the last axis.

    Returns the pooled tensor and the absolute argmax index of every output
    element; ties resolve to the lowest index in the window.
    """
    if width < 1:
        raise DimensionError(f"pool width must be >= 1, got {width}")
    L = x.shape[-1]
    if width > L:
        raise DimensionError(f"pool width {width} exceeds input length {L}")
    L_out = conv_output_length(L, width, stride)
    if width == stride:
        windows = x.data[..., : L_out * width].reshape(x.shape[:-1] + (L_out, width))
    else:
        windows = sliding_window_view(x.data, width, axis=-1)[..., ::stride, :]
    local = np.argmax(windows, axis=-1)
    idx = local + (np.arange(L_out) * stride)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        lead = int(np.prod(x.shape[:-1], dtype=np.int64))
        flat = (np.arange(lead).reshape(x.shape[:-1] + (1,)) * L + idx).reshape(-1)
        dx = np.bincount(flat, weights=g.reshape(-1), minlength=lead * L)
        x._accumulate(dx.reshape(x.shape))

    return _result(out, (x,), backward), idx


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    if weights.ndim != 2:
        raise DimensionError(f"weights must be 2-D, got shape {weights.shape}")
    m, n = weights.shape
    if x.shape[-1] != n:
        raise DimensionError(f"input axis {x.shape[-1]} does not match weight axis {n}")
    if bias.shape != (m,):
        raise DimensionError(f"bias shape {bias.shape} does not match weight rows {m}")
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        if weights.requires_grad:
            g2 = g.reshape(-1, m)
            weights._accumulate(g2.T @ x.data.reshape(-1, n))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, m).sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weights.data)

    return _result(out, (x, weights, bias), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InputError("training-mode dropout needs a random generator")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(_active[-1])

    def backward(g):
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits."""
    y = np.asarray(targets, dtype=_active[-1]).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        logits._accumulate(g * (_sigmoid(z) - y) / n)

    return _result(np.asarray(loss.mean()).reshape(()), (logits,), backward)
