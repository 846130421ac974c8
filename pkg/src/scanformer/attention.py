"""Multi-head attention and the convolution-inspired modifications.

The sequence-mixing sublayer can be plain multi-head attention, attention
scaled by a learned sigmoid gate, attention restricted to a fixed span,
attention with a learned clamped relative-position bias, or a GLU
convolution replacing attention altogether.
"""

from __future__ import annotations

import math
import os
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, parameter, uniform_fan, zeros


class AttentionParams(Module):
    """Query/key/value/output projections (each d x d) for ``n_heads`` heads."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = uniform_fan(rng, d_model, d_model)
        self.k = uniform_fan(rng, d_model, d_model)
        self.v = uniform_fan(rng, d_model, d_model)
        self.out = uniform_fan(rng, d_model, d_model)

    @property
    def head_dim(self) -> int:
        return self.q.shape[0] // self.n_heads


class GateParam(Module):
    """Scalar gate sigmoid(beta) applied to a sublayer output.

    ``override`` pins the gate to a constant (e.g. 1.0 to neutralise it)
    without touching the learned value.
    """

    def __init__(self, beta0: float = -1.0):
        self.beta0 = beta0
        self.beta = parameter(np.asarray(beta0))
        self.override: Optional[float] = None

    def value(self) -> Tensor:
        if self.override is not None:
            return Tensor(self.override)
        return ad.sigmoid(self.beta)


class SpanBias(Module):
    """Span restriction for one stack of self-attention layers.

    ``fixed`` holds no parameters. ``t5`` holds, per layer, a learned table of
    shape (2s+1, n_heads) indexed by the clamped offset ``i - j`` (query minus
    key) shifted by ``s``; tables start at zero.
    """

    def __init__(self, mode: str, span: int, n_layers: int, n_heads: int):
        if mode not in ("fixed", "t5"):
            raise ValueError(f"unknown span mode {mode!r}")
        if span < 0:
            raise ValueError(f"span must be non-negative, got {span}")
        self.mode = mode
        self.span = span
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.tables = [zeros(2 * span + 1, n_heads) for _ in range(n_layers)] if mode == "t5" else []


class ConvMixerParams(Module):
    def __init__(self, d_model: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd number, got {kernel_size}")
        self.kernel_size = kernel_size
        self.weight = uniform_fan(rng, kernel_size * d_model, 2 * d_model, shape=(kernel_size, d_model, 2 * d_model))


def causal_mask(tq: int, tk: Optional[int] = None) -> np.ndarray:
    tk = tq if tk is None else tk
    m = np.zeros((tq, tk), dtype=ad.get_dtype())
    m[np.triu_indices(tq, k=1, m=tk)] = -np.inf
    return m


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    lead = x.shape[:-2]
    t, d = x.shape[-2:]
    x = x.reshape(lead + (t, n_heads, d // n_heads))
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    h, t, dh = x.shape[-3:]
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(lead + (t, h * dh))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    bias=None,
    causal: bool = False,
    mask: Optional[np.ndarray] = None,
    dropout_p: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``x_q`` is ``[..., tq, d]`` and ``x_kv`` is ``[..., tk, d]``. ``bias`` is
    added to the logits (``[tq, tk]`` or ``[n_heads, tq, tk]``, may carry
    gradient); ``mask`` is a constant additive array broadcasting to
    ``[..., n_heads, tq, tk]``. Logits are scaled by 1/sqrt(head_dim).
    """
    h = params.n_heads
    q = _split_heads(ad.matmul(x_q, params.q), h)
    k = _split_heads(ad.matmul(x_kv, params.k), h)
    v = _split_heads(ad.matmul(x_kv, params.v), h)
    kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = ad.mul(ad.matmul(q, kt), 1.0 / math.sqrt(params.head_dim))
    if causal:
        cm = causal_mask(x_q.shape[-2], x_kv.shape[-2])
        mask = cm if mask is None else mask + cm
    weights = ad.softmax_with_bias(logits, bias, mask)
    attended = ad.dropout(weights, dropout_p, rng, training)
    out = ad.matmul(_merge_heads(ad.matmul(attended, v)), params.out)
    if return_weights:
        return out, weights
    return out


def sag_apply(attn_out: Tensor, gate: GateParam) -> Tensor:
    """Scale a sublayer output by the gate value sigmoid(beta)."""
    return ad.mul(attn_out, gate.value())


def fixed_span_bias(t: int, s: int) -> Tensor:
    """``[t, t]`` bias: 0 where |i - j| <= s, -inf elsewhere."""
    if t < 1 or s < 0:
        raise ValueError(f"need t >= 1 and s >= 0, got t={t}, s={s}")
    offsets = np.abs(np.arange(t)[:, None] - np.arange(t)[None, :])
    return Tensor(np.where(offsets <= s, 0.0, -np.inf))


def relative_offsets(t: int, s: int) -> np.ndarray:
    """Table row for each (i, j): clamp(i - j, -s, s) + s."""
    off = np.arange(t)[:, None] - np.arange(t)[None, :]
    return np.clip(off, -s, s) + s


def t5_bias(table: SpanBias, layer: int, t: int, causal: bool = False) -> Tensor:
    """Per-head ``[n_heads, t, t]`` bias looked up from a layer's learned table."""
    if table.mode != "t5":
        raise ValueError("t5_bias needs a t5 span table")
    if not 0 <= layer < table.n_layers:
        raise IndexError(f"layer {layer} out of range for {table.n_layers} layers")
    looked_up = ad.embedding(table.tables[layer], relative_offsets(t, table.span))
    bias = ad.transpose(looked_up, (2, 0, 1))
    if causal:
        bias = ad.add(bias, causal_mask(t))
    return bias


def conv_mixer(x: Tensor, params: ConvMixerParams, causal: bool = False, keep: Optional[np.ndarray] = None) -> Tensor:
    """Convolution to 2d channels followed by GLU back to d channels.

    ``keep`` (``[..., t]`` of 0/1) zeroes padding positions before mixing so
    they cannot leak into real positions.
    """
    if keep is not None:
        x = ad.mul(x, keep[..., None].astype(x.data.dtype) * np.ones(x.shape[-1], dtype=x.data.dtype))
    return ad.glu(ad.conv1d(x, params.weight, "causal" if causal else "symmetric"))


def bias_preferences(table: SpanBias, causal: bool = False) -> tuple:
    """Softmax of each head's learned bias over relative distances.

    Distances are reported as ``d = j - i`` (key position minus query
    position). For causal tables only ``d <= 0`` is reported, since positive
    distances are always masked. Returns ``(distances, [probs per layer])``
    with ``probs`` of shape ``[n_heads, n_bins]``.
    """
    if table.mode != "t5":
        raise ValueError("bias preferences need a t5 span table")
    s = table.span
    distances = np.arange(-s, 1 if causal else s + 1)
    prefs = []
    for tab in table.tables:
        # offset i - j = -d lives at row s - d
        b = tab.data[s - distances].T.astype(np.float64)
        b = b - b.max(axis=1, keepdims=True)
        e = np.exp(b)
        prefs.append(e / e.sum(axis=1, keepdims=True))
    return distances, prefs


def write_bias_preferences(table: SpanBias, out_dir, side: str, causal: bool = False) -> list:
    """Write one text matrix per layer: rows are heads, columns distance bins."""
    os.makedirs(out_dir, exist_ok=True)
    distances, prefs = bias_preferences(table, causal)
    paths = []
    for layer, probs in enumerate(prefs):
        path = os.path.join(out_dir, f"{side}.layer{layer}.txt")
        header = "distances " + " ".join(str(int(d)) for d in distances)
        np.savetxt(path, probs, fmt="%.8f", header=header)
        paths.append(path)
    return paths


def read_bias_preferences(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    distances = np.array([int(x) for x in header.lstrip("# ").split()[1:]])
    probs = np.atleast_2d(np.loadtxt(path))
    return distances, probs
