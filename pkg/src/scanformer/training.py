"""Optimisation: Adam, global-norm clipping, the training loop and seed-averaged grids."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, Seq2SeqModel, loss as token_loss, save_checkpoint, strict_fields
from .scan import Split, Vocab, build_vocab

logger = logging.getLogger(__name__)

_MAX_STEP = np.iinfo(np.int64).max


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_tokens: Optional[int] = None
    epochs: int = 250
    clip_norm: float = 1.0
    seeds: tuple = (0, 1, 2)
    checkpoint_every: int = 25
    jump_repeat: int = 1
    precision: str = "float32"
    max_decode_len: int = 60

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.clip_norm <= 0:
            raise ValueError("lr >= 0, batch_size >= 1, epochs >= 0 and clip_norm > 0 are required")
        if self.jump_repeat < 1:
            raise ValueError("jump_repeat must be at least 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**strict_fields(cls, data))


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    test_accuracy: Optional[float] = None
    wall_time: float = 0.0
    steps: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# optimisation primitives


def _named(params) -> list:
    if isinstance(params, dict):
        return list(params.items())
    items = list(params)
    if items and isinstance(items[0], tuple):
        return items
    return [(f"param{i}", p) for i, p in enumerate(items)]


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in _named(params):
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    named = _named(params)
    for name, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    norm = global_grad_norm(named)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for _, p in named:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(scale)
    return scale


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    if state.step >= _MAX_STEP:
        raise OverflowError("Adam step counter overflow")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in _named(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise ValueError(f"Adam state shape {state.m[name].shape} != parameter {name} {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def encode_examples(examples, src_vocab: Vocab, tgt_vocab: Vocab) -> list:
    """(source ids + eos, target ids) pairs."""
    return [
        (src_vocab.encode(ex.command) + [src_vocab.eos_id], tgt_vocab.encode(ex.actions))
        for ex in examples
    ]


def collate(pairs) -> Batch:
    src = _pad([s for s, _ in pairs])
    tgt_in = _pad([[Vocab.bos_id] + t for _, t in pairs])
    tgt_out = _pad([t + [Vocab.eos_id] for _, t in pairs])
    return Batch(src, tgt_in, tgt_out)


def make_batches(pairs, batch_size: int, rng: np.random.Generator, max_tokens: Optional[int] = None, pool: int = 50) -> list:
    """Length-bucketed shuffled batches.

    Examples are shuffled, sorted by length inside pools of ``pool`` batches,
    cut into batches, and the batch order shuffled again.
    """
    order = rng.permutation(len(pairs))
    batches = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        chunk = sorted(order[start : start + span], key=lambda i: (len(pairs[i][0]), len(pairs[i][1])))
        if max_tokens is None:
            groups = [chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size)]
        else:
            groups, cur, longest = [], [], 0
            for i in chunk:
                n = max(longest, len(pairs[i][0]), len(pairs[i][1]) + 1)
                if cur and n * (len(cur) + 1) > max_tokens:
                    groups.append(cur)
                    cur, n = [], max(len(pairs[i][0]), len(pairs[i][1]) + 1)
                cur.append(i)
                longest = n
            if cur:
                groups.append(cur)
        batches.extend(groups)
    perm = rng.permutation(len(batches))
    return [collate([pairs[i] for i in batches[j]]) for j in perm]


# ---------------------------------------------------------------------------
# training loop


def run_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    cfg = model_config.to_dict()
    cfg.pop("seed")
    tc = train_config.to_dict()
    tc.pop("seeds")
    text = json.dumps({"model": cfg, "train": tc}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def split_vocabs(split: Split) -> tuple:
    return build_vocab(list(split.train) + list(split.test))


def fit(
    model: Seq2SeqModel,
    split: Split,
    config: TrainConfig,
    *,
    vocabs: Optional[tuple] = None,
    run_dir: Optional[str] = None,
    max_steps: Optional[int] = None,
    evaluate_test: bool = True,
) -> RunRecord:
    """Train ``model`` on ``split.train`` for ``config.epochs`` epochs.

    No validation-based selection happens; when ``evaluate_test`` is set the
    final model is scored on ``split.test`` by greedy exact match.
    """
    from .evaluation import evaluate_model

    if not split.train:
        raise ValueError("cannot fit on an empty training set")
    src_vocab, tgt_vocab = vocabs if vocabs is not None else split_vocabs(split)
    mc = model.config
    if mc.src_vocab_size != len(src_vocab) or mc.tgt_vocab_size != len(tgt_vocab):
        raise ValueError(
            f"model vocab sizes ({mc.src_vocab_size}, {mc.tgt_vocab_size}) do not match "
            f"data ({len(src_vocab)}, {len(tgt_vocab)})"
        )
    train = list(split.train)
    if config.jump_repeat > 1:
        train += [ex for ex in split.train if ex.command == ("jump",)] * (config.jump_repeat - 1)
    pairs = encode_examples(train, src_vocab, tgt_vocab)
    seed = mc.seed
    record = RunRecord(run_hash(mc, config), seed)
    state = AdamState()
    named = list(model.named_parameters())
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        _atomic_write(os.path.join(run_dir, "config.json"),
                      json.dumps({"model": mc.to_dict(), "train": config.to_dict()}, sort_keys=True, indent=2))
        metrics = open(os.path.join(run_dir, "metrics.jsonl"), "a", encoding="utf-8")
    else:
        metrics = None

    def checkpoint(name: str) -> None:
        if run_dir is not None:
            save_checkpoint(os.path.join(run_dir, name), model, step=state.step,
                            optimizer_state=state, vocabs=(src_vocab, tgt_vocab))

    start = time.perf_counter()
    step = 0
    try:
        with ad.precision(config.precision):
            model.astype(ad.get_dtype())
            for epoch in range(config.epochs):
                rng = np.random.default_rng([seed, epoch, 1])
                batches = make_batches(pairs, config.batch_size, rng, config.max_tokens)
                total, count = 0.0, 0
                for batch in batches:
                    if max_steps is not None and step >= max_steps:
                        break
                    model.train(np.random.default_rng([seed, step, 2]))
                    value = token_loss(model(batch.src, batch.tgt_in), batch.tgt_out, Vocab.pad_id)
                    if not np.isfinite(value.item()):
                        checkpoint("last_good.npz")
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                    model.zero_grad()
                    ad.backward(value)
                    clip_gradients(named, config.clip_norm)
                    adam_step(named, state, config.lr, config.beta1, config.beta2, config.eps)
                    record.step_losses.append(value.item())
                    total += value.item() * len(batch)
                    count += len(batch)
                    step += 1
                if count:
                    record.epoch_losses.append(total / count)
                    elapsed = time.perf_counter() - start
                    logger.info("epoch %d loss %.5f (%.1fs)", epoch, total / count, elapsed)
                    if metrics is not None:
                        metrics.write(json.dumps({"epoch": epoch, "loss": total / count, "wall_time": elapsed}) + "\n")
                        metrics.flush()
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    checkpoint(f"checkpoint_epoch{epoch + 1}.npz")
                if max_steps is not None and step >= max_steps:
                    break
            model.eval()
            checkpoint("final.npz")
            if evaluate_test and split.test:
                record.test_accuracy, _ = evaluate_model(
                    model, split.test, src_vocab, tgt_vocab, max_len=config.max_decode_len)
    finally:
        model.eval()
        if metrics is not None:
            metrics.close()
    record.steps = step
    record.wall_time = time.perf_counter() - start
    if run_dir is not None:
        _atomic_write(os.path.join(run_dir, "run_record.json"), json.dumps(record.to_dict(), indent=2))
    return record


# ---------------------------------------------------------------------------
# grids


def mean_sem(values: Sequence[float]) -> tuple:
    """Mean and standard error of the mean (``None`` for fewer than two values)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean of an empty list")
    m = float(arr.mean())
    if arr.size < 2:
        return m, None
    return m, float(arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class GridSpec:
    """Base configs plus axes to sweep; axis keys name ModelConfig or TrainConfig fields."""

    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        spec = cls(**strict_fields(cls, data))
        strict_fields(ModelConfig, spec.model)
        strict_fields(TrainConfig, spec.train)
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(spec.grid) - model_keys - train_keys)
        if unknown:
            raise ValueError(f"unknown grid axes: {', '.join(unknown)}")
        return spec

    def cells(self) -> Iterable[tuple]:
        keys = sorted(self.grid)
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            m, t = dict(self.model), dict(self.train)
            for k, v in zip(keys, combo):
                (m if k in model_keys else t)[k] = v
            yield m, t


@dataclass
class GridRow:
    model: dict
    train: dict
    accuracies: list
    mean: float
    sem: Optional[float]
    run_hash: str


@dataclass
class GridResult:
    rows: list
    best: GridRow


def grid_run(spec: GridSpec, split: Split, run_root: Optional[str] = None) -> GridResult:
    """Fit every grid cell with every seed, then pick the cell with the best mean test accuracy."""
    src_vocab, tgt_vocab = split_vocabs(split)
    rows = []
    for model_dict, train_dict in spec.cells():
        train_config = TrainConfig.from_dict(train_dict)
        accuracies = []
        digest = None
        for seed in train_config.seeds:
            mc = ModelConfig.from_dict({**model_dict, "seed": seed, "src_vocab_size": len(src_vocab),
                                        "tgt_vocab_size": len(tgt_vocab)})
            digest = run_hash(mc, train_config)
            run_dir = os.path.join(run_root, digest, str(seed)) if run_root else None
            record = fit(Seq2SeqModel(mc), split, train_config, vocabs=(src_vocab, tgt_vocab), run_dir=run_dir)
            accuracies.append(record.test_accuracy)
            logger.info("cell %s seed %d accuracy %.4f", digest, seed, record.test_accuracy)
        m, s = mean_sem(accuracies)
        rows.append(GridRow(model_dict, train_dict, accuracies, m, s, digest))
    if not rows:
        raise ValueError("empty grid")
    best = max(rows, key=lambda r: r.mean)
    return GridResult(rows, best)
