"""Synthetic parametric-shape domain with exact area/volume.

Vocabulary (1-based): ``1..B`` are ordinal parameter bins over
``[PARAM_LO, PARAM_HI]``, then ``CMD_BOX``, ``CMD_CYL``, ``END``, ``PAD``.
A program is a list of disjointly placed boxes ``(w, h, depth)`` and
cylinders ``(r, h)``, encoded as::

    [CMD kind] [bin] ... [CMD kind] [bin] ... END PAD PAD ...

Dataset files are JSON Lines, one object per record with keys ``tokens``
(list of int), ``area`` and ``volume`` (floats). The condition transform is a
single JSON object with keys ``log_offset``, ``mean`` and ``std`` (lists, one
entry per condition dimension, ordered area then volume).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

PARAM_LO, PARAM_HI = 0.2, 5.0
N_PARAMS = {"box": 3, "cylinder": 2}
CONDITION_NAMES = ("area", "volume")


@dataclass(frozen=True)
class Vocab:
    bins: int = 32
    length: int = 24
    max_primitives: int = 4

    @property
    def box(self) -> int:
        return self.bins + 1

    @property
    def cyl(self) -> int:
        return self.bins + 2

    @property
    def end(self) -> int:
        return self.bins + 3

    @property
    def pad(self) -> int:
        return self.bins + 4

    @property
    def K(self) -> int:
        return self.bins + 4

    @property
    def bin_width(self) -> float:
        return (PARAM_HI - PARAM_LO) / self.bins

    def bin_center(self, token: int) -> float:
        return PARAM_LO + (token - 0.5) * self.bin_width

    def quantize(self, value: float) -> int:
        if not PARAM_LO <= value <= PARAM_HI:
            raise InvalidArgument(f"parameter {value} outside [{PARAM_LO}, {PARAM_HI}]")
        return min(int((value - PARAM_LO) / self.bin_width) + 1, self.bins)


DEFAULT_VOCAB = Vocab()


@dataclass(frozen=True)
class Primitive:
    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in N_PARAMS:
            raise InvalidArgument(f"unknown primitive kind {self.kind!r}")
        if len(self.params) != N_PARAMS[self.kind]:
            raise InvalidArgument(f"{self.kind} takes {N_PARAMS[self.kind]} parameters")
        if any(not p > 0 for p in self.params):
            raise InvalidArgument("primitive parameters must be strictly positive")

    def area(self) -> float:
        if self.kind == "box":
            w, h, dpt = self.params
            return 2.0 * (w * h + w * dpt + h * dpt)
        r, h = self.params
        return 2.0 * math.pi * r * r + 2.0 * math.pi * r * h

    def volume(self) -> float:
        if self.kind == "box":
            w, h, dpt = self.params
            return w * h * dpt
        r, h = self.params
        return math.pi * r * r * h


@dataclass(frozen=True)
class Program:
    primitives: tuple[Primitive, ...]


class DecodeError(ValueError):
    """Grammar violation at ``position`` (0-based); ``expected`` names the token class."""

    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.reason = message
        self.position = position
        self.expected = expected


def encode_program(program: Program, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    prims = program.primitives
    if not 1 <= len(prims) <= vocab.max_primitives:
        raise InvalidArgument(f"program must have 1..{vocab.max_primitives} primitives")
    tokens = []
    for prim in prims:
        tokens.append(vocab.box if prim.kind == "box" else vocab.cyl)
        tokens.extend(vocab.quantize(p) for p in prim.params)
    tokens.append(vocab.end)
    if len(tokens) > vocab.length:
        raise InvalidArgument(f"program needs {len(tokens)} tokens > length {vocab.length}")
    return tokens + [vocab.pad] * (vocab.length - len(tokens))


def decode_program(tokens, vocab: Vocab = DEFAULT_VOCAB) -> Program:
    """Strict parse; raises :class:`DecodeError` on any grammar violation."""
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    for pos, tok in enumerate(tokens):
        if not 1 <= tok <= vocab.K:
            raise DecodeError(f"token {tok} outside vocabulary", pos, "vocabulary token")
    if n == 0 or tokens[0] in (vocab.pad, vocab.end):
        raise DecodeError("empty program", 0, "command")
    prims = []
    pos = 0
    while True:
        if pos >= n:
            raise DecodeError("missing END", pos, "END")
        tok = tokens[pos]
        if tok == vocab.end:
            break
        if tok not in (vocab.box, vocab.cyl):
            raise DecodeError(f"unexpected token {tok}", pos, "command or END")
        if len(prims) == vocab.max_primitives:
            raise DecodeError("too many primitives", pos, "END")
        kind = "box" if tok == vocab.box else "cylinder"
        params = []
        for k in range(N_PARAMS[kind]):
            p = pos + 1 + k
            if p >= n:
                raise DecodeError("truncated primitive", p, "parameter")
            if not 1 <= tokens[p] <= vocab.bins:
                raise DecodeError(f"unexpected token {tokens[p]}", p, "parameter")
            params.append(vocab.bin_center(tokens[p]))
        prims.append(Primitive(kind, tuple(params)))
        pos += 1 + N_PARAMS[kind]
    for p in range(pos + 1, n):
        if tokens[p] != vocab.pad:
            raise DecodeError(f"unexpected token {tokens[p]} after END", p, "PAD")
    return Program(tuple(prims))


def evaluate_properties(program: Program) -> np.ndarray:
    """Exact ``(area, volume)``; primitives are disjoint so both are additive."""
    area = math.fsum(p.area() for p in program.primitives)
    volume = math.fsum(p.volume() for p in program.primitives)
    return np.array([area, volume])


def token_count(tokens, vocab: Vocab = DEFAULT_VOCAB) -> int:
    """Number of non-PAD tokens (the END token included)."""
    return sum(1 for t in tokens if t != vocab.pad)


def random_program(rng: np.random.Generator, vocab: Vocab = DEFAULT_VOCAB) -> Program:
    """Random program whose parameters sit on bin centres (exactly representable)."""
    count = int(rng.integers(1, vocab.max_primitives + 1))
    prims = []
    for _ in range(count):
        kind = "box" if rng.random() < 0.5 else "cylinder"
        bins = rng.integers(1, vocab.bins + 1, size=N_PARAMS[kind])
        prims.append(Primitive(kind, tuple(vocab.bin_center(int(b)) for b in bins)))
    return Program(tuple(prims))


# -- condition normalisation -------------------------------------------------

@dataclass
class ConditionTransform:
    mean: np.ndarray
    std: np.ndarray
    log_offset: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.log_offset is None:
            self.log_offset = np.zeros_like(self.mean)
        self.log_offset = np.asarray(self.log_offset, dtype=np.float64)
        if np.any(~(self.std > 0)):
            raise InvalidArgument("standard deviations must be positive")

    @classmethod
    def fit(cls, conds) -> "ConditionTransform":
        logs = np.log(np.asarray(conds, dtype=np.float64))
        std = logs.std(axis=0)
        return cls(logs.mean(axis=0), np.where(std > 0, std, 1.0))

    def to_dict(self) -> dict:
        return {"log_offset": self.log_offset.tolist(), "mean": self.mean.tolist(),
                "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ConditionTransform":
        return cls(d["mean"], d["std"], d.get("log_offset"))


def normalize_condition(C, transform: ConditionTransform) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if np.any(~(C > 0)):
        raise InvalidArgument("conditions must be strictly positive")
    return (np.log(C + transform.log_offset) - transform.mean) / transform.std


def denormalize_condition(z, transform: ConditionTransform) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.exp(z * transform.std + transform.mean) - transform.log_offset


# -- dataset files -----------------------------------------------------------

@dataclass
class Dataset:
    tokens: np.ndarray          # (N, D) int
    conds: np.ndarray           # (N, 2) area, volume

    def __len__(self):
        return len(self.tokens)

    def normalized(self, transform: ConditionTransform) -> np.ndarray:
        return normalize_condition(self.conds, transform)


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, data: Dataset) -> None:
    lines = [json.dumps({"tokens": [int(t) for t in row], "area": float(c[0]),
                         "volume": float(c[1])})
             for row, c in zip(data.tokens, data.conds)]
    _atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


def read_dataset(path) -> Dataset:
    tokens, conds = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                tokens.append(rec["tokens"])
                conds.append((rec["area"], rec["volume"]))
    return Dataset(np.array(tokens, dtype=np.int64).reshape(len(tokens), -1),
                   np.array(conds, dtype=np.float64).reshape(len(conds), 2))


def write_transform(path, transform: ConditionTransform) -> None:
    _atomic_write_text(Path(path), json.dumps(transform.to_dict()) + "\n")


def read_transform(path) -> ConditionTransform:
    with open(path, encoding="utf-8") as fh:
        return ConditionTransform.from_dict(json.loads(fh.readline()))


SPLIT_NAMES = ("train", "val", "test")


def generate_dataset(count: int, seed: int, ratios=(0.8, 0.1, 0.1),
                     out_dir=None, vocab: Vocab = DEFAULT_VOCAB, max_tokens: int = 64,
                     max_attempts_factor: int = 10):
    """Sample, deduplicate, filter, split and (optionally) write a dataset.

    Programs are drawn until ``count`` unique sequences of at most
    ``max_tokens`` tokens are collected (or ``max_attempts_factor * count``
    draws are spent).
    Returns ``(splits, transform)`` where ``splits`` maps split name to
    :class:`Dataset`. The transform is fit on the training split only.
    """
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0) \
            or ratios[0] == 0:
        raise InvalidArgument(f"split ratios must be three nonnegative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    seen = set()
    rows, conds = [], []
    attempts = 0
    while len(rows) < count and attempts < max_attempts_factor * count:
        attempts += 1
        prog = random_program(rng, vocab)
        tokens = tuple(encode_program(prog, vocab))
        if tokens in seen or token_count(tokens, vocab) > max_tokens:
            continue
        seen.add(tokens)
        rows.append(tokens)
        conds.append(evaluate_properties(decode_program(tokens, vocab)))
    order = rng.permutation(len(rows))
    tokens = np.array(rows, dtype=np.int64)[order]
    conds = np.array(conds)[order]
    n = len(rows)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    cuts = [0, n_train, n_train + n_val, n]
    splits = {name: Dataset(tokens[a:b], conds[a:b])
              for name, a, b in zip(SPLIT_NAMES, cuts[:-1], cuts[1:])}
    transform = ConditionTransform.fit(splits["train"].conds)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, data in splits.items():
            write_dataset(out / f"{name}.jsonl", data)
        write_transform(out / "transform.json", transform)
    return splits, transform


def load_splits(data_dir):
    data_dir = Path(data_dir)
    splits = {name: read_dataset(data_dir / f"{name}.jsonl") for name in SPLIT_NAMES}
    return splits, read_transform(data_dir / "transform.json")


def realized_properties(tokens, vocab: Vocab = DEFAULT_VOCAB):
    """Oracle properties of a generated sequence, or ``None`` if it does not decode."""
    try:
        return evaluate_properties(decode_program(tokens, vocab))
    except DecodeError:
        return None
