"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the primitives needed by the seq2seq models are provided. Every op
records its inputs and a backward rule on the output tensor; ``backward``
linearises the graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateMaskError",
    "NonDeterministicError",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "elementwise_binary",
    "neg",
    "sigmoid",
    "relu",
    "softmax_with_bias",
    "layer_norm",
    "conv1d",
    "embedding",
    "dropout",
    "reshape",
    "transpose",
    "slice_last",
    "glu",
    "sum",
    "mean",
    "cross_entropy",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """Raised when a softmax row has every entry masked to -inf."""


class NonDeterministicError(RuntimeError):
    """Raised when a function under gradient check is not repeatable."""


_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = _PRECISIONS[os.environ.get("SCANFORMER_PRECISION", "float64")]
_state = threading.local()
_ids = itertools.count()


def set_precision(name: str) -> None:
    """Select the floating point type used for newly created tensors."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)


def _as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy-style broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_binary_shapes(a: tuple, b: tuple) -> None:
    # equal shapes, a scalar operand, or a trailing-dimension affine operand
    if a == b:
        return
    if int(np.prod(a)) == 1 and len(a) <= len(b) or int(np.prod(b)) == 1 and len(b) <= len(a):
        return
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise ShapeError(f"incompatible shapes {a} and {b}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a weight shared across leading axes of ``a``) or has
    the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def _backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), _backward, "matmul")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            -_unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), _backward, "mul")


def elementwise_binary(op: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unsupported elementwise op {op!r}")


def neg(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly to exactly 0 or 1 without overflow warnings
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * pos,), "relu")


def softmax_with_bias(logits: ArrayLike, bias: Optional[ArrayLike] = None, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis of ``logits + bias + mask``.

    ``bias`` may be a differentiable tensor (learned relative-position bias)
    or a constant; ``mask`` is a constant additive array, typically holding
    ``0`` and ``-inf``. Both broadcast against ``logits`` numpy-style.
    Positions at ``-inf`` get exactly zero weight and zero gradient.
    """
    logits = _as_tensor(logits)
    parents = [logits]
    z = logits.data
    if bias is not None:
        bias = _as_tensor(bias)
        try:
            np.broadcast_shapes(bias.shape, logits.shape)
        except ValueError:
            raise ShapeError(f"bias shape {bias.shape} does not broadcast to logits {logits.shape}") from None
        z = z + bias.data
        parents.append(bias)
    if mask is not None:
        z = z + mask
    if z.shape != logits.shape:
        raise ShapeError(f"bias/mask would enlarge logits {logits.shape} to {z.shape}")
    m = z.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateMaskError("softmax row with every entry masked to -inf")
    e = np.exp(z - m)
    w = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        dz = w * (g - (g * w).sum(axis=-1, keepdims=True))
        grads = [dz if logits.requires_grad else None]
        if bias is not None:
            grads.append(_unbroadcast(dz, bias.shape) if bias.requires_grad else None)
        return grads

    return _make(w, parents, _backward, "softmax")


def layer_norm(x: ArrayLike, gain: ArrayLike, shift: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm affine params {gain.shape}/{shift.shape} do not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + shift.data

    def _backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gshift = g.reshape(-1, d).sum(axis=0) if shift.requires_grad else None
        return gx, ggain, gshift

    return _make(out, (x, gain, shift), _backward, "layer_norm")


def conv1d(x: ArrayLike, kernel: ArrayLike, padding: str = "symmetric") -> Tensor:
    """Length-preserving 1-D convolution of ``x[..., t, d_in]`` with ``kernel[k, d_in, d_out]``.

    ``symmetric`` pads (k-1)/2 zeros on each side (k must be odd); ``causal``
    pads k-1 zeros on the left so position t only sees positions <= t.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d kernel {kernel.shape} incompatible with input {x.shape}")
    k, d_in, d_out = kernel.shape
    if padding == "symmetric":
        if k % 2 == 0:
            raise ValueError(f"symmetric padding needs an odd kernel size, got {k}")
        left = right = (k - 1) // 2
    elif padding == "causal":
        left, right = k - 1, 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    t = x.shape[-2]
    lead = x.shape[:-2]
    pad = [(0, 0)] * len(lead) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    cols = np.stack([xp[..., i : i + t, :] for i in range(k)], axis=-2).reshape(lead + (t, k * d_in))
    w2 = kernel.data.reshape(k * d_in, d_out)
    out = (cols.reshape(-1, k * d_in) @ w2).reshape(lead + (t, d_out))

    def _backward(g):
        gx = gk = None
        g2 = g.reshape(-1, d_out)
        if kernel.requires_grad:
            gk = (cols.reshape(-1, k * d_in).T @ g2).reshape(k, d_in, d_out)
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(lead + (t, k, d_in))
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[..., i : i + t, :] += dcols[..., i, :]
            gx = gxp[..., left : left + t, :]
        return gx, gk

    return _make(out, (x, kernel), _backward, "conv1d")


def embedding(weight: ArrayLike, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into ``weight``."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"ids out of range for table with {weight.shape[0]} rows")

    def _backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, *weight.shape[1:]))
        return (gw,)

    return _make(weight.data[ids], (weight,), _backward, "embedding")


def dropout(x: ArrayLike, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def reshape(x: ArrayLike, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: ArrayLike, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def slice_last(x: ArrayLike, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(x.data[..., start:stop], (x,), _backward, "slice")


def glu(x: ArrayLike) -> Tensor:
    """Gated linear unit: sigmoid of the first half times the second half."""
    x = _as_tensor(x)
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"GLU needs an even last extent, got {n}")
    return mul(sigmoid(slice_last(x, 0, n // 2)), slice_last(x, n // 2, n))


def sum(x: ArrayLike, axis=None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), _backward, "sum")


def mean(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),), "mean")


def cross_entropy(logits: ArrayLike, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    keep = tgt != ignore_index if ignore_index is not None else np.ones(tgt.shape, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy over an all-padding target")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(len(tgt))
    safe_tgt = np.where(keep, tgt, 0)
    nll = -logp[rows, safe_tgt]
    loss = np.asarray((nll * keep).sum() / n, dtype=logits.data.dtype)

    def _backward(g):
        p = np.exp(logp)
        p[rows, safe_tgt] -= 1.0
        p *= (keep / n)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), _backward, "cross_entropy")


# ---------------------------------------------------------------------------
# tape and reverse pass


class Tape:
    """Topologically ordered record of the operations leading to one output.

    ``entries`` holds ``(output_id, input_ids, backward_fn)`` with every
    operation appearing after the operations producing its inputs.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes
        self.entries = [(n.node_id, tuple(p.node_id for p in n._parents), n._backward) for n in nodes if not n.is_leaf]

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def free(self) -> None:
        for node in self.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node.requires_grad = False
        self.nodes = []
        self.entries = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    The graph behind ``loss`` is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad (or its graph was already freed)")
    tape = Tape.record(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    tape.free()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, coords=None) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates (all of them unless ``coords`` gives flat indices). ``x`` is
    perturbed in place and restored.
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    first = f(x)
    second = f(x)
    if first.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError("two forward passes disagree; disable dropout")
    saved = x.grad
    x.grad = None
    backward(second)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    x.grad = saved
    del first
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
