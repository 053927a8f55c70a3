"""Synthetic graded tasks and the line-delimited dataset format.

Each split is a UTF-8 file with one JSON object per line holding two
space-joined token strings, ``source`` and ``target``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .model import RESERVED, Example, Vocab

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reverse"
    vocab_size: int = 50
    length_range: tuple[int, int] = (5, 15)
    sizes: tuple[int, int, int] = (2000, 200, 200)
    seed: int = 0
    data_dir: str = ""

    @classmethod
    def from_config(cls, cfg: Mapping) -> "TaskSpec":
        return cls(
            cfg["task"],
            cfg["vocab_size"],
            (cfg["min_len"], cfg["max_len"]),
            (cfg["n_train"], cfg["n_valid"], cfg["n_test"]),
            cfg["seed"],
            cfg["data_dir"],
        )

    def validate(self) -> None:
        if self.kind not in ("reverse", "sort", "file"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must be >= 8")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid length range {self.length_range}")
        if any(n < 0 for n in self.sizes):
            raise ConfigError("split sizes must be >= 0")
        if self.kind == "file" and not self.data_dir:
            raise ConfigError("task=file needs data_dir")


def task_target(kind: str, source: Sequence[int]) -> tuple[int, ...]:
    if kind == "reverse":
        return tuple(reversed(source))
    if kind == "sort":
        return tuple(sorted(source))
    raise ConfigError(f"task {kind!r} has no generator")


def _generate(spec: TaskSpec) -> list[list[Example]]:
    lo, hi = spec.length_range
    n_content = spec.vocab_size - len(RESERVED)
    seen: set[tuple[int, ...]] = set()
    splits = []
    # one independent stream per split; sources already used by any split are redrawn
    for rng, n in zip((np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)), spec.sizes):
        out = []
        while len(out) < n:
            length = int(rng.integers(lo, hi + 1))
            src = tuple(int(t) + len(RESERVED) for t in rng.integers(0, n_content, size=length))
            if src in seen:
                continue
            seen.add(src)
            out.append(Example(src, task_target(spec.kind, src)))
        splits.append(out)
    return splits


def write_split(path: str | Path, examples: Sequence[Example], vocab: Vocab) -> None:
    lines = [
        json.dumps({"source": vocab.decode(ex.source), "target": vocab.decode(ex.target)}) + "\n"
        for ex in examples
    ]
    Path(path).write_bytes("".join(lines).encode("utf-8"))


def read_split(path: str | Path, vocab: Vocab) -> list[Example]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(Example(vocab.encode(rec["source"]), vocab.encode(rec["target"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}:{n}: bad record ({exc})") from None
    return out


def file_vocab(data_dir: str | Path, vocab_size: int) -> Vocab:
    """Vocabulary of every token in a file-backed task, padded to ``vocab_size``."""
    tokens = set()
    for split in SPLITS:
        for line in (Path(data_dir) / f"{split}.jsonl").read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                tokens.update(rec["source"].split())
                tokens.update(rec["target"].split())
    tokens = sorted(tokens)
    spare = vocab_size - len(RESERVED) - len(tokens)
    if spare < 0:
        raise ConfigError(f"data needs vocab_size >= {len(tokens) + len(RESERVED)}")
    return Vocab(tokens + [f"<spare{i}>" for i in range(spare)])


def make_dataset(spec: TaskSpec, out_dir: str | Path | None = None):
    """Build (or, for ``kind='file'``, read) the three splits.

    Returns ``(vocab, {split: examples})``; with ``out_dir`` the generated
    splits are also written as ``<split>.jsonl``.
    """
    spec.validate()
    if spec.kind == "file":
        vocab = file_vocab(spec.data_dir, spec.vocab_size)
        splits = {s: read_split(Path(spec.data_dir) / f"{s}.jsonl", vocab) for s in SPLITS}
    else:
        vocab = Vocab.synthetic(spec.vocab_size)
        splits = dict(zip(SPLITS, _generate(spec)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, examples in splits.items():
            write_split(out / f"{name}.jsonl", examples, vocab)
    return vocab, splits
