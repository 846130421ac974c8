"""Greedy decoding, exact-match scoring, evaluation reports and bias export."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import write_bias_preferences
from .autodiff import Tensor
from .model import Seq2SeqModel, load_checkpoint
from .scan import Vocab
from .training import _atomic_write, _pad, mean_sem

MAX_DECODE_LEN = 60
MAX_MISMATCH_LINES = 100


class VocabMismatchError(ValueError):
    pass


@dataclass
class Decoded:
    tokens: list
    truncated: bool


def greedy_decode(model: Seq2SeqModel, src, max_len: int = MAX_DECODE_LEN, batch_size: int = 512) -> list:
    """Decode each source id sequence by repeatedly appending the argmax token.

    ``src`` is one id sequence or a list of them. Decoding stops at
    end-of-sequence (not included in the output) or after ``max_len`` tokens,
    in which case the result is flagged truncated. Ties go to the lowest id.
    """
    single = len(src) > 0 and np.isscalar(src[0])
    seqs = [list(src)] if single else [list(s) for s in src]
    results = []
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            for start in range(0, len(seqs), batch_size):
                results.extend(_decode_batch(model, seqs[start : start + batch_size], max_len))
    finally:
        model.training = was_training
    return results[0] if single else results


def _decode_batch(model: Seq2SeqModel, seqs: list, max_len: int) -> list:
    src = _pad(seqs)
    keep = src != 0
    enc = model.encode(src, keep).data
    n = len(seqs)
    prefix = np.full((n, 1), Vocab.bos_id, dtype=np.int64)
    out = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_len):
        logits = model.decode_step(prefix[active], Tensor(enc[active], dtype=enc.dtype), keep[active]).data[:, -1]
        nxt = logits.argmax(axis=-1)
        column = np.zeros(n, dtype=np.int64)
        column[active] = nxt
        prefix = np.concatenate([prefix, column[:, None]], axis=1)
        for row, tok in zip(active, nxt):
            if tok == Vocab.eos_id:
                done[row] = True
            else:
                out[row].append(int(tok))
        active = active[~done[active]]
        if active.size == 0:
            break
    return [Decoded(out[i], not done[i]) for i in range(n)]


def exact_match_accuracy(predictions: Sequence, references: Sequence) -> float:
    """Fraction of predictions equal token-for-token to their reference."""
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise ValueError("exact match over an empty list")
    hits = sum(list(p) == list(r) for p, r in zip(predictions, references))
    return hits / len(references)


def check_vocab(examples, src_vocab: Vocab, tgt_vocab: Vocab) -> None:
    src_missing = sorted({t for ex in examples for t in ex.command} - set(src_vocab.stoi))
    tgt_missing = sorted({t for ex in examples for t in ex.actions} - set(tgt_vocab.stoi))
    if src_missing or tgt_missing:
        raise VocabMismatchError(f"dataset tokens missing from checkpoint vocabulary: {src_missing + tgt_missing}")


def evaluate_model(model: Seq2SeqModel, examples, src_vocab: Vocab, tgt_vocab: Vocab, max_len: int = MAX_DECODE_LEN):
    """Greedy exact-match accuracy plus ``(command, gold, prediction)`` triples."""
    if not examples:
        raise ValueError("cannot evaluate on an empty test set")
    check_vocab(examples, src_vocab, tgt_vocab)
    src = [src_vocab.encode(ex.command) + [src_vocab.eos_id] for ex in examples]
    decoded = greedy_decode(model, src, max_len)
    preds = [tuple(tgt_vocab.decode(d.tokens)) for d in decoded]
    golds = [ex.actions for ex in examples]
    acc = exact_match_accuracy(preds, golds)
    return acc, [(ex.command, ex.actions, p) for ex, p in zip(examples, preds)]


@dataclass
class EvalReport:
    split: str
    variant: str
    seeds: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    mean: float = 0.0
    sem: Optional[float] = None
    sample_path: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)


def format_prediction(command, gold, pred) -> str:
    match = int(tuple(gold) == tuple(pred))
    return f"SRC: {' '.join(command)}\tGOLD: {' '.join(gold)}\tPRED: {' '.join(pred)}\tMATCH: {match}"


def parse_prediction_file(path) -> tuple:
    """Read a prediction dump back as (predictions, references)."""
    preds, golds = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            fields = dict(part.split(": ", 1) if ": " in part else (part.rstrip(":"), "") for part in line.rstrip("\n").split("\t"))
            golds.append(tuple(fields["GOLD"].split()))
            preds.append(tuple(fields["PRED"].split()))
    return preds, golds


def evaluate(checkpoints, examples, split: str, out_dir: Optional[str] = None, max_len: int = MAX_DECODE_LEN) -> EvalReport:
    """Score one or more checkpoints (one per seed) on ``examples``.

    With ``out_dir`` set, writes ``predictions.seed<k>.tsv``, a capped
    ``mismatches.seed<k>.txt`` sample, and ``report.json``.
    """
    if isinstance(checkpoints, (str, os.PathLike)):
        checkpoints = [checkpoints]
    if not examples:
        raise ValueError("cannot evaluate on an empty test set")
    loaded = []
    for path in checkpoints:
        model, meta, _ = load_checkpoint(path)
        if not meta.get("vocabs"):
            raise VocabMismatchError(f"checkpoint {path} carries no vocabulary")
        loaded.append((model, meta))
    seeds, accuracies = [], []
    sample_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for model, meta in loaded:
        src_vocab, tgt_vocab = (Vocab.from_list(v) for v in meta["vocabs"])
        # decode in the precision the checkpoint was trained in
        with ad.precision("float32" if model.src_embed.data.dtype == np.float32 else "float64"):
            acc, triples = evaluate_model(model, examples, src_vocab, tgt_vocab, max_len)
        seed = model.config.seed
        seeds.append(seed)
        accuracies.append(acc)
        if out_dir is not None:
            lines = [format_prediction(*t) for t in triples]
            _atomic_write(os.path.join(out_dir, f"predictions.seed{seed}.tsv"), "\n".join(lines) + "\n")
            wrong = [line for line, t in zip(lines, triples) if tuple(t[1]) != tuple(t[2])]
            sample_path = os.path.join(out_dir, f"mismatches.seed{seed}.txt")
            _atomic_write(sample_path, "".join(w + "\n" for w in wrong[:MAX_MISMATCH_LINES]))
    m, s = mean_sem(accuracies)
    report = EvalReport(split, loaded[0][0].config.variant, seeds, accuracies, m, s, sample_path)
    if out_dir is not None:
        _atomic_write(os.path.join(out_dir, "report.json"), json.dumps(report.to_dict(), indent=2))
    return report


def export_bias(checkpoint, out_dir: str) -> list:
    """Write per-layer bias preference matrices for both stacks of a t5 checkpoint."""
    model, _, _ = load_checkpoint(checkpoint)
    if model.config.variant != "sag_t5" or model.encoder_span is None:
        raise ValueError(f"bias export needs a sag_t5 checkpoint, got variant {model.config.variant!r}")
    paths = write_bias_preferences(model.encoder_span, out_dir, "encoder", causal=False)
    paths += write_bias_preferences(model.decoder_span, out_dir, "decoder", causal=True)
    return paths
