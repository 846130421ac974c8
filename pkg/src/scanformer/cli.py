"""Command-line entry point: ``scanformer <subcommand> ...``.

Subcommands: gen-data, train, grid, eval, export-bias, grad-check. Failures
print a single ``error: <kind>: <message>`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import scan
from .evaluation import evaluate, export_bias
from .model import ModelConfig, Seq2SeqModel, loss, normalize_variant
from .training import GridSpec, TrainConfig, fit, grid_run, run_hash, split_vocabs


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError("missing-file", f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise CliError("config", f"unknown top-level config keys: {', '.join(unknown)}")
    return data


def _read_split(args) -> scan.Split:
    if args.data_dir:
        train = os.path.join(args.data_dir, f"{args.split}.train.txt")
        test = os.path.join(args.data_dir, f"{args.split}.test.txt")
        for path in (train, test):
            if not os.path.exists(path):
                raise CliError("missing-file", f"dataset file not found: {path}")
        return scan.read_split(args.split, args.data_dir)
    return scan.build_split(scan.SplitSpec(args.split, args.train_fraction, args.data_seed))


def _configs(args, split: scan.Split) -> tuple:
    file_cfg = _load_config_file(args.config) if args.config else {}
    model = dict(file_cfg.get("model", {}))
    train = dict(file_cfg.get("train", {}))
    overrides = {"variant": args.variant, "span": args.span, "kernel_size": args.kernel_size,
                 "n_layers": args.layers, "n_heads": args.heads, "d_model": args.d_model, "d_ffn": args.d_ffn}
    model.update({k: v for k, v in overrides.items() if v is not None})
    if args.beta0 is not None:
        model["beta0_encoder"] = model["beta0_decoder"] = args.beta0
    if args.seed is not None:
        model["seed"] = args.seed
    sv, tv = split_vocabs(split)
    model["src_vocab_size"], model["tgt_vocab_size"] = len(sv), len(tv)
    for key in ("epochs", "batch_size", "lr", "jump_repeat", "precision", "checkpoint_every"):
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    return ModelConfig.from_dict(model), TrainConfig.from_dict(train), (sv, tv)


def cmd_gen_data(args) -> int:
    split = scan.build_split(scan.SplitSpec(args.split, args.train_fraction, args.seed or 0))
    train_path, test_path = scan.write_split(split, args.out)
    print(json.dumps({"split": split.name, "train": train_path, "test": test_path,
                      "n_train": len(split.train), "n_test": len(split.test)}))
    return 0


def cmd_train(args) -> int:
    split = _read_split(args)
    model_cfg, train_cfg, vocabs = _configs(args, split)
    run_dir = os.path.join(args.runs, run_hash(model_cfg, train_cfg), str(model_cfg.seed))
    record = fit(Seq2SeqModel(model_cfg), split, train_cfg, vocabs=vocabs, run_dir=run_dir)
    print(json.dumps({"run_dir": run_dir, "test_accuracy": record.test_accuracy,
                      "final_loss": record.epoch_losses[-1] if record.epoch_losses else None}))
    return 0


def cmd_grid(args) -> int:
    if not os.path.exists(args.grid):
        raise CliError("missing-file", f"grid file not found: {args.grid}")
    with open(args.grid, encoding="utf-8") as fh:
        spec = GridSpec.from_dict(json.load(fh))
    result = grid_run(spec, _read_split(args), run_root=args.runs)
    rows = [{"model": r.model, "train": r.train, "accuracies": r.accuracies, "mean": r.mean, "sem": r.sem,
             "run_hash": r.run_hash} for r in result.rows]
    text = json.dumps({"rows": rows, "best": rows[result.rows.index(result.best)]}, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    for path in args.checkpoint:
        if not os.path.exists(path):
            raise CliError("missing-file", f"checkpoint not found: {path}")
    if not os.path.exists(args.test):
        raise CliError("missing-file", f"test file not found: {args.test}")
    examples = scan.deserialize(args.test)
    name = os.path.basename(args.test).split(".")[0]
    report = evaluate(args.checkpoint, examples, name, out_dir=args.out, max_len=args.max_len)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_export_bias(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise CliError("missing-file", f"checkpoint not found: {args.checkpoint}")
    for path in export_bias(args.checkpoint, args.out):
        print(path)
    return 0


def cmd_grad_check(args) -> int:
    """Finite-difference check of the full model loss on one SCAN batch."""
    data = scan.full_dataset()
    rng = np.random.default_rng(args.seed or 0)
    batch = [data[i] for i in rng.choice(len(data), size=4, replace=False)]
    sv, tv = scan.build_vocab(data)
    with ad.precision("float64"):
        cfg = ModelConfig(variant=normalize_variant(args.variant or "sag_t5"), n_layers=2, n_heads=2, d_model=16,
                          d_ffn=32, dropout=0.0, attention_dropout=0.0, span=args.span or 2,
                          src_vocab_size=len(sv), tgt_vocab_size=len(tv), seed=args.seed or 0)
        model = Seq2SeqModel(cfg)
        from .training import collate, encode_examples

        b = collate(encode_examples(batch, sv, tv))
        worst = 0.0
        for name, p in model.named_parameters():
            coords = rng.choice(p.size, size=min(p.size, args.coords), replace=False)
            err = ad.grad_check(lambda _: loss(model(b.src, b.tgt_in), b.tgt_out), p, coords=coords)
            worst = max(worst, err)
    print(json.dumps({"variant": cfg.variant, "max_relative_error": worst}))
    return 0 if worst < 1e-3 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scanformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def model_flags(p):
        p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
        p.add_argument("--variant")
        p.add_argument("--span", type=int)
        p.add_argument("--kernel-size", type=int)
        p.add_argument("--beta0", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--d-model", type=int)
        p.add_argument("--d-ffn", type=int)

    def split_flags(p):
        p.add_argument("--split", choices=scan.SPLIT_NAMES, default="simple")
        p.add_argument("--data-dir", help="directory with <split>.train.txt / <split>.test.txt")
        p.add_argument("--train-fraction", type=float, default=0.8)
        p.add_argument("--data-seed", type=int, default=0)
        p.add_argument("--runs", default="runs")

    p = sub.add_parser("gen-data", help="write a SCAN split to text files")
    p.add_argument("--split", choices=scan.SPLIT_NAMES, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and score it on the test split")
    model_flags(p)
    split_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--jump-repeat", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run a hyperparameter grid over seeds")
    split_flags(p)
    p.add_argument("--grid", required=True, help="JSON grid spec with model/train/grid sections")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="greedy-decode a test file with one checkpoint per seed")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=60)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-bias", help="write relative-position preferences of a t5 checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_bias)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model loss")
    p.add_argument("--variant")
    p.add_argument("--span", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--coords", type=int, default=8, help="coordinates sampled per parameter")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
