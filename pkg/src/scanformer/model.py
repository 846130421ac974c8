"""Post-norm encoder/decoder Transformer with pluggable sequence-mixing sublayers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    ConvMixerParams,
    GateParam,
    SpanBias,
    conv_mixer,
    fixed_span_bias,
    multi_head_attention,
    sag_apply,
    t5_bias,
)
from .autodiff import Tensor
from .nn import Module, ones, parameter, uniform_fan, zeros

VARIANTS = ("vanilla", "sag", "sag_conv", "sag_fixed_span", "sag_t5")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("+", "_").replace("-", "_").replace(" ", "_")
    aliases = {"transformer": "vanilla", "sag_fixed": "sag_fixed_span", "sag_cnn": "sag_conv"}
    key = aliases.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return key


def strict_fields(cls, data: dict) -> dict:
    """Reject keys that are not fields of dataclass ``cls``."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return dict(data)


@dataclass
class ModelConfig:
    variant: str = "vanilla"
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 256
    dropout: float = 0.1
    attention_dropout: float = 0.1
    span: int = 4
    kernel_size: Optional[int] = None
    beta0_encoder: float = -1.0
    beta0_decoder: float = -1.0
    gate_cross_attention: bool = False
    max_positions: int = 64
    src_vocab_size: int = 16
    tgt_vocab_size: int = 9
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.d_ffn < 1 or self.max_positions < 1:
            raise ConfigError("n_layers, d_ffn and max_positions must be positive")
        if self.span < 0:
            raise ConfigError(f"span must be non-negative, got {self.span}")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attention_dropout < 1.0):
            raise ConfigError("dropout probabilities must be in [0, 1)")
        if self.kernel_size is not None and self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def gated(self) -> bool:
        return self.variant != "vanilla"

    @property
    def conv_kernel(self) -> int:
        # a kernel of 2s+1 covers the same window as span s
        return self.kernel_size if self.kernel_size is not None else 2 * self.span + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**strict_fields(cls, data))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0 : 2 * (d // 2) : 2] = np.sin(angle)
    table[:, 1 : 2 * (d // 2) : 2] = np.cos(angle)
    return table


class LayerNorm(Module):
    def __init__(self, d: int, eps: float):
        self.gain = ones(d)
        self.shift = zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, rng: np.random.Generator):
        self.w1 = uniform_fan(rng, d, d_ffn)
        self.b1 = zeros(d_ffn)
        self.w2 = uniform_fan(rng, d_ffn, d)
        self.b2 = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        if cfg.variant == "sag_conv":
            self.mixer = ConvMixerParams(d, cfg.conv_kernel, rng)
        else:
            self.mixer = AttentionParams(d, cfg.n_heads, rng)
        self.gate = GateParam(cfg.beta0_encoder) if cfg.gated else None
        self.norm1 = LayerNorm(d, cfg.layer_norm_eps)
        self.ffn = FeedForward(d, cfg.d_ffn, rng)
        self.norm2 = LayerNorm(d, cfg.layer_norm_eps)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        if cfg.variant == "sag_conv":
            self.mixer = ConvMixerParams(d, cfg.conv_kernel, rng)
        else:
            self.mixer = AttentionParams(d, cfg.n_heads, rng)
        self.gate = GateParam(cfg.beta0_decoder) if cfg.gated else None
        self.norm1 = LayerNorm(d, cfg.layer_norm_eps)
        self.cross = AttentionParams(d, cfg.n_heads, rng)
        self.cross_gate = GateParam(cfg.beta0_decoder) if cfg.gated and cfg.gate_cross_attention else None
        self.norm2 = LayerNorm(d, cfg.layer_norm_eps)
        self.ffn = FeedForward(d, cfg.d_ffn, rng)
        self.norm3 = LayerNorm(d, cfg.layer_norm_eps)


def _key_padding_mask(keep: np.ndarray, dtype) -> np.ndarray:
    # [B, t] keep flags -> [B, 1, 1, t] additive mask
    return np.where(keep, 0.0, -np.inf).astype(dtype)[:, None, None, :]


def _merge_masks(*masks) -> Optional[np.ndarray]:
    present = [m for m in masks if m is not None]
    if not present:
        return None
    out = present[0]
    for m in present[1:]:
        out = out + m
    out = np.array(out)
    # rows with every key masked only occur at padding queries; let them see everything
    dead = np.isneginf(out).all(axis=-1)
    if dead.any():
        out = np.broadcast_to(out, out.shape).copy()
        out[dead] = 0.0
    return out


class Seq2SeqModel(Module):
    """Encoder/decoder stacks; every sublayer is residual -> dropout -> add -> layer norm."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.src_embed = parameter(rng.normal(0.0, d**-0.5, size=(cfg.src_vocab_size, d)))
        self.tgt_embed = parameter(rng.normal(0.0, d**-0.5, size=(cfg.tgt_vocab_size, d)))
        self.src_embed.data[0] = 0.0
        self.tgt_embed.data[0] = 0.0
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.encoder_span: Optional[SpanBias] = None
        self.decoder_span: Optional[SpanBias] = None
        if cfg.variant in ("sag_fixed_span", "sag_t5"):
            mode = "t5" if cfg.variant == "sag_t5" else "fixed"
            self.encoder_span = SpanBias(mode, cfg.span, cfg.n_layers, cfg.n_heads)
            self.decoder_span = SpanBias(mode, cfg.span, cfg.n_layers, cfg.n_heads)
        self.out_proj = uniform_fan(rng, d, cfg.tgt_vocab_size)
        self.out_bias = zeros(cfg.tgt_vocab_size)
        self.positions = sinusoidal_positions(cfg.max_positions, d).astype(ad.get_dtype())
        self.training = False
        self.rng: Optional[np.random.Generator] = None

    # -- mode handling -----------------------------------------------------

    def astype(self, dtype) -> "Seq2SeqModel":
        """Cast parameters (and the position table) to ``dtype`` in place."""
        for p in self.parameters():
            if p.data.dtype != dtype:
                p.data = p.data.astype(dtype)
        self.positions = self.positions.astype(dtype)
        return self

    def train(self, rng: Optional[np.random.Generator] = None) -> "Seq2SeqModel":
        self.training = True
        self.rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        return self

    def eval(self) -> "Seq2SeqModel":
        self.training = False
        return self

    def gates(self) -> list:
        out = []
        for layer in self.encoder + self.decoder:
            for g in (layer.gate, getattr(layer, "cross_gate", None)):
                if g is not None:
                    out.append(g)
        return out

    def set_gate_override(self, value: Optional[float]) -> None:
        for g in self.gates():
            g.override = value

    def _dropout(self, x: Tensor, p: float) -> Tensor:
        return ad.dropout(x, p, self.rng, self.training)

    # -- forward pieces ----------------------------------------------------

    def embed(self, tokens, side: str = "src") -> Tensor:
        """Token embedding (scaled by sqrt(d)) plus sinusoidal position, then dropout."""
        ids = np.asarray(tokens, dtype=np.int64)
        table = self.src_embed if side == "src" else self.tgt_embed
        t = ids.shape[-1]
        if t > self.config.max_positions:
            raise ValueError(f"sequence length {t} exceeds max_positions={self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"token id out of range for {side} vocabulary of size {table.shape[0]}")
        x = ad.mul(ad.embedding(table, ids), math.sqrt(self.config.d_model))
        x = ad.add(x, self.positions[:t])
        return self._dropout(x, self.config.dropout)

    def _mix(self, layer, idx: int, x: Tensor, span: Optional[SpanBias], causal: bool, keep, key_mask) -> Tensor:
        cfg = self.config
        if isinstance(layer.mixer, ConvMixerParams):
            y = conv_mixer(x, layer.mixer, causal=causal, keep=keep)
        else:
            t = x.shape[-2]
            bias = None
            span_mask = None
            if span is not None and span.mode == "t5":
                bias = t5_bias(span, idx, t)
            elif span is not None:
                span_mask = fixed_span_bias(t, span.span).data
            mask = _merge_masks(key_mask, span_mask)
            y = multi_head_attention(
                x, x, layer.mixer, bias=bias, causal=causal, mask=mask,
                dropout_p=cfg.attention_dropout, rng=self.rng, training=self.training,
            )
        if layer.gate is not None:
            y = sag_apply(y, layer.gate)
        return y

    def encode(self, src, src_keep: Optional[np.ndarray] = None) -> Tensor:
        """Encode ``src`` ids (``[t]`` or ``[B, t]``) to ``[..., t, d]``."""
        ids = np.asarray(src, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        keep = ids != 0 if src_keep is None else np.asarray(src_keep, dtype=bool).reshape(ids.shape)
        key_mask = None if keep.all() else _key_padding_mask(keep, ad.get_dtype())
        x = self.embed(ids, "src")
        for i, layer in enumerate(self.encoder):
            y = self._mix(layer, i, x, self.encoder_span, False, keep if not keep.all() else None, key_mask)
            x = layer.norm1(ad.add(x, self._dropout(y, self.config.dropout)))
            y = layer.ffn(x)
            x = layer.norm2(ad.add(x, self._dropout(y, self.config.dropout)))
        if single:
            x = ad.reshape(x, x.shape[1:])
        return x

    def decode_step(self, prefix, enc_out: Tensor, src_keep: Optional[np.ndarray] = None) -> Tensor:
        """Logits ``[..., t, |V_tgt|]`` for every position of a target prefix."""
        ids = np.asarray(prefix, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            enc_out = ad.reshape(enc_out, (1,) + enc_out.shape)
        if ids.shape[-1] and np.any(ids[:, 0] != 1):
            raise ValueError("target prefix must start with the begin-of-sequence id")
        cross_mask = None
        if src_keep is not None:
            keep = np.asarray(src_keep, dtype=bool).reshape(ids.shape[0], -1)
            if not keep.all():
                cross_mask = _key_padding_mask(keep, ad.get_dtype())
        x = self.embed(ids, "tgt")
        for i, layer in enumerate(self.decoder):
            y = self._mix(layer, i, x, self.decoder_span, True, None, None)
            x = layer.norm1(ad.add(x, self._dropout(y, self.config.dropout)))
            y = multi_head_attention(
                x, enc_out, layer.cross, mask=cross_mask,
                dropout_p=self.config.attention_dropout, rng=self.rng, training=self.training,
            )
            if layer.cross_gate is not None:
                y = sag_apply(y, layer.cross_gate)
            x = layer.norm2(ad.add(x, self._dropout(y, self.config.dropout)))
            y = layer.ffn(x)
            x = layer.norm3(ad.add(x, self._dropout(y, self.config.dropout)))
        logits = ad.add(ad.matmul(x, self.out_proj), self.out_bias)
        if single:
            logits = ad.reshape(logits, logits.shape[1:])
        return logits

    def forward(self, src, tgt_in) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        keep = src != 0
        return self.decode_step(tgt_in, self.encode(src, keep), keep)

    __call__ = forward


def loss(logits: Tensor, gold, pad_id: int = 0) -> Tensor:
    """Mean token negative log-likelihood over non-pad gold positions."""
    return ad.cross_entropy(logits, gold, ignore_index=pad_id)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Seq2SeqModel, *, step: int = 0, optimizer_state=None, vocabs=None, extra=None) -> None:
    """Write parameters, config, optimizer moments and step to an ``.npz`` container."""
    names = dict(model.named_parameters())
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "shapes": {n: list(p.shape) for n, p in names.items()},
        "vocabs": [v.to_list() for v in vocabs] if vocabs is not None else None,
        "extra": extra or {},
        "adam_step": int(optimizer_state.step) if optimizer_state is not None else None,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for n, p in names.items():
        arrays[f"param/{n}"] = p.data
    if optimizer_state is not None:
        for n in names:
            if n in optimizer_state.m:
                arrays[f"adam_m/{n}"] = optimizer_state.m[n]
                arrays[f"adam_v/{n}"] = optimizer_state.v[n]
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple:
    """Return ``(meta, arrays)`` from a checkpoint file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        if "__meta__" not in npz:
            raise CheckpointError(f"{path} is not a checkpoint")
        meta = json.loads(bytes(npz["__meta__"]).decode())
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_into(model: Seq2SeqModel, meta: dict, arrays: dict) -> None:
    """Copy checkpoint parameters into ``model``; mismatches raise with a per-name diff."""
    expected = {n: tuple(p.shape) for n, p in model.named_parameters()}
    stored = {n: tuple(s) for n, s in meta["shapes"].items()}
    problems = []
    for n in sorted(set(expected) | set(stored)):
        if n not in stored:
            problems.append(f"missing {n} {expected[n]}")
        elif n not in expected:
            problems.append(f"unexpected {n} {stored[n]}")
        elif expected[n] != stored[n]:
            problems.append(f"{n}: checkpoint {stored[n]} vs model {expected[n]}")
    if meta["config"] != model.config.to_dict():
        diff = [
            f"{k}: {meta['config'].get(k)!r} vs {v!r}"
            for k, v in model.config.to_dict().items()
            if meta["config"].get(k) != v
        ]
        problems.append("config differs: " + "; ".join(diff))
    if problems:
        raise CheckpointError("checkpoint does not match model: " + " | ".join(problems))
    for n, p in model.named_parameters():
        p.data = arrays[f"param/{n}"].astype(ad.get_dtype()).copy()
        p.grad = None


def load_checkpoint(path) -> tuple:
    """Rebuild a model from a checkpoint. Returns ``(model, meta, arrays)``."""
    meta, arrays = read_checkpoint(path)
    model = Seq2SeqModel(ModelConfig.from_dict(meta["config"]))
    load_into(model, meta, arrays)
    return model, meta, arrays
