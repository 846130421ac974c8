"""The SCAN command language: grammar, interpreter, splits, vocabularies and files.

Grammar (canonical SCAN)::

    C -> S and S | S after S | S
    S -> V twice | V thrice | V
    V -> W opposite D' | W around D' | D | U
    D -> U left | U right | turn left | turn right
    W -> U | turn
    U -> walk | look | run | jump
"""

from __future__ import annotations

import itertools
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PRIMITIVES = ("walk", "look", "run", "jump")
DIRECTIONS = ("left", "right")
REPEATS = {"twice": 2, "thrice": 3}
CONJUNCTIONS = ("and", "after")

SOURCE_TOKENS = frozenset(PRIMITIVES + DIRECTIONS + ("turn", "opposite", "around", "twice", "thrice", "and", "after"))
ACTION_TOKENS = frozenset(("WALK", "LOOK", "RUN", "JUMP", "LTURN", "RTURN"))
MAX_COMMAND_LENGTH = 9
MAX_ACTION_LENGTH = 48

SPLIT_NAMES = ("simple", "jump", "around-right")

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

_ACTION_OF = {u: u.upper() for u in PRIMITIVES}
_TURN_OF = {"left": "LTURN", "right": "RTURN"}


class ScanParseError(ValueError):
    """An ungrammatical command. ``position`` is the 0-based token index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token {position}")
        self.position = position


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ScanExample:
    command: tuple
    actions: tuple

    @classmethod
    def from_strings(cls, command: str, actions: str) -> "ScanExample":
        return cls(tuple(command.split()), tuple(actions.split()))

    @property
    def command_text(self) -> str:
        return " ".join(self.command)

    @property
    def action_text(self) -> str:
        return " ".join(self.actions)


@dataclass(frozen=True)
class SplitSpec:
    name: str
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class Split:
    name: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# grammar


def _verb_phrases() -> list:
    phrases = []
    for w in PRIMITIVES + ("turn",):
        for mod in ("opposite", "around"):
            for d in DIRECTIONS:
                phrases.append(f"{w} {mod} {d}")
    for w in PRIMITIVES + ("turn",):
        for d in DIRECTIONS:
            phrases.append(f"{w} {d}")
    phrases.extend(PRIMITIVES)
    return phrases


def enumerate_commands() -> list:
    """Every command derivable from the grammar, sorted lexicographically."""
    sentences = []
    for v in _verb_phrases():
        sentences.append(v)
        sentences.extend(f"{v} {r}" for r in REPEATS)
    commands = set(sentences)
    for left, right in itertools.product(sentences, repeat=2):
        for conj in CONJUNCTIONS:
            commands.add(f"{left} {conj} {right}")
    return sorted(commands)


def _parse_verb(tokens: Sequence[str], offset: int) -> list:
    n = len(tokens)
    if n == 0:
        raise ScanParseError("empty phrase", offset)
    head = tokens[0]
    if head not in PRIMITIVES and head != "turn":
        raise ScanParseError(f"expected a verb, got {head!r}", offset)
    body = [_ACTION_OF[head]] if head in PRIMITIVES else []
    if n == 1:
        if head == "turn":
            raise ScanParseError("'turn' needs a direction", offset + 1)
        return body
    if n == 2:
        if tokens[1] in ("opposite", "around"):
            raise ScanParseError(f"{tokens[1]!r} needs a direction", offset + 2)
        if tokens[1] not in DIRECTIONS:
            raise ScanParseError(f"expected a direction, got {tokens[1]!r}", offset + 1)
        return [_TURN_OF[tokens[1]]] + body
    if n == 3:
        mod, d = tokens[1], tokens[2]
        if mod not in ("opposite", "around"):
            raise ScanParseError(f"expected 'opposite' or 'around', got {mod!r}", offset + 1)
        if d not in DIRECTIONS:
            raise ScanParseError(f"expected a direction, got {d!r}", offset + 2)
        turn = _TURN_OF[d]
        if mod == "opposite":
            return [turn, turn] + body
        return ([turn] + body) * 4
    raise ScanParseError(f"unexpected token {tokens[3]!r}", offset + 3)


def _parse_sentence(tokens: Sequence[str], offset: int) -> list:
    for k, tok in enumerate(tokens[:-1]):
        if tok in REPEATS:
            raise ScanParseError(f"unexpected token {tokens[k + 1]!r} after {tok!r}", offset + k + 1)
    if tokens and tokens[-1] in REPEATS:
        return _parse_verb(tokens[:-1], offset) * REPEATS[tokens[-1]]
    return _parse_verb(tokens, offset)


def interpret(command) -> tuple:
    """Map a command (string or token sequence) to its action sequence."""
    tokens = command.split() if isinstance(command, str) else list(command)
    if not tokens:
        raise ScanParseError("empty command", 0)
    for i, tok in enumerate(tokens):
        if tok not in SOURCE_TOKENS:
            raise ScanParseError(f"unknown token {tok!r}", i)
    conj = [i for i, tok in enumerate(tokens) if tok in CONJUNCTIONS]
    if len(conj) > 1:
        raise ScanParseError("at most one conjunction allowed", conj[1])
    if not conj:
        return tuple(_parse_sentence(tokens, 0))
    i = conj[0]
    left = _parse_sentence(tokens[:i], 0)
    right = _parse_sentence(tokens[i + 1 :], i + 1)
    return tuple(left + right if tokens[i] == "and" else right + left)


def full_dataset() -> list:
    return [ScanExample(tuple(c.split()), interpret(c)) for c in enumerate_commands()]


# ---------------------------------------------------------------------------
# splits


def _is_jump_train(cmd: tuple) -> bool:
    return "jump" not in cmd or cmd == ("jump",)


def _has_around_right(cmd: tuple) -> bool:
    return any(a == "around" and b == "right" for a, b in zip(cmd, cmd[1:]))


def build_split(spec: SplitSpec, examples: Sequence[ScanExample] | None = None) -> Split:
    """Partition the full corpus into train/test sets."""
    if spec.name not in SPLIT_NAMES:
        raise ValueError(f"unknown split {spec.name!r}; expected one of {SPLIT_NAMES}")
    data = sorted(examples if examples is not None else full_dataset(), key=lambda e: e.command)
    if spec.name == "simple":
        if not 0.0 <= spec.train_fraction <= 1.0:
            raise ValueError(f"train fraction must be in [0, 1], got {spec.train_fraction}")
        order = list(range(len(data)))
        random.Random(spec.seed).shuffle(order)
        n_train = round(spec.train_fraction * len(data))
        train = sorted((data[i] for i in order[:n_train]), key=lambda e: e.command)
        test = sorted((data[i] for i in order[n_train:]), key=lambda e: e.command)
        return Split("simple", train, test)
    keep = _is_jump_train if spec.name == "jump" else (lambda c: not _has_around_right(c))
    train = [e for e in data if keep(e.command)]
    test = [e for e in data if not keep(e.command)]
    return Split(spec.name, train, test)


# ---------------------------------------------------------------------------
# vocabularies


class Vocab:
    """Token <-> id map with pad/bos/eos reserved as ids 0, 1, 2."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    pad_id = 0
    bos_id = 1
    eos_id = 2

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved specials")
        vocab = cls(itos[3:])
        if vocab.itos != list(itos):
            raise ValueError("vocabulary list is not in canonical order")
        return vocab


def build_vocab(examples: Sequence[ScanExample]) -> tuple:
    """Source and target vocabularies for a corpus."""
    if not examples:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    src, tgt = set(), set()
    for ex in examples:
        if not ex.command or not ex.actions:
            raise ValueError(f"example with empty side: {ex!r}")
        if any(not t for t in ex.command + ex.actions):
            raise ValueError(f"empty token in example {ex!r}")
        src.update(ex.command)
        tgt.update(ex.actions)
    return Vocab(src), Vocab(tgt)


# ---------------------------------------------------------------------------
# files


def format_line(example: ScanExample) -> str:
    return f"IN: {example.command_text} OUT: {example.action_text}"


def parse_line(line: str, lineno: int = 1) -> ScanExample:
    tokens = line.split()
    if not tokens or tokens[0] != "IN:":
        raise DatasetFormatError("missing 'IN:'", lineno)
    if "OUT:" not in tokens:
        raise DatasetFormatError("missing 'OUT:'", lineno)
    cut = tokens.index("OUT:")
    command, actions = tokens[1:cut], tokens[cut + 1 :]
    if not command:
        raise DatasetFormatError("empty command", lineno)
    if not actions:
        raise DatasetFormatError("empty action sequence", lineno)
    return ScanExample(tuple(command), tuple(actions))


def serialize(examples: Iterable[ScanExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(format_line(ex) + "\n")


def deserialize(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


def write_split(split: Split, out_dir) -> tuple:
    """Write ``<name>.train.txt`` and ``<name>.test.txt`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    train_path = os.path.join(out_dir, f"{split.name}.train.txt")
    test_path = os.path.join(out_dir, f"{split.name}.test.txt")
    serialize(split.train, train_path)
    serialize(split.test, test_path)
    return train_path, test_path


def read_split(name: str, data_dir) -> Split:
    return Split(
        name,
        deserialize(os.path.join(data_dir, f"{name}.train.txt")),
        deserialize(os.path.join(data_dir, f"{name}.test.txt")),
    )
