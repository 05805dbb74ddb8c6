"""Dynamic padding: each batch is padded only to its own longest sequence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PAD
from .errors import ConfigError, DataError
from .numerics import Rng


@dataclass(frozen=True)
class EncodedExample:
    ids: tuple[int, ...]
    label: int


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, L) int64
    attention_mask: np.ndarray  # (B, L) float64 of {0, 1}
    labels: np.ndarray  # (B,) int64
    lengths: np.ndarray  # (B,) int64

    @property
    def width(self) -> int:
        return self.token_ids.shape[1]

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def pad_batch(seqs: Sequence[Sequence[int]], labels: Sequence[int], width: int | None = None) -> Batch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if (lengths == 0).any():
        raise DataError("cannot batch an empty sequence")
    L = int(lengths.max()) if width is None else width
    if L < lengths.max():
        raise ConfigError(f"pad width {L} shorter than longest sequence {lengths.max()}")
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    return Batch(ids, mask, np.asarray(labels, dtype=np.int64), lengths)


def make_batches(
    examples: Sequence[EncodedExample],
    batch_size: int,
    shuffle: bool = False,
    rng: Rng | None = None,
    bucket_by_length: bool = False,
) -> list[Batch]:
    """Partition (optionally shuffled) examples into dynamically padded batches.

    The final partial batch is kept. ``bucket_by_length`` sorts by length after
    shuffling; it is off by default because it changes batch composition.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not examples:
        raise DataError("cannot batch an empty dataset")
    order = np.arange(len(examples))
    if shuffle:
        if rng is None:
            raise ConfigError("shuffle=True needs an Rng")
        order = rng.permutation(len(examples))
    if bucket_by_length:
        order = np.array(sorted(order, key=lambda i: len(examples[i].ids)), dtype=np.int64)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        batches.append(pad_batch([ex.ids for ex in chunk], [ex.label for ex in chunk]))
    return batches


def padding_savings(lengths_or_examples, batch_size: int) -> float:
    """Fraction of token cells saved by dynamic padding vs a global max width."""
    lengths = [len(x.ids) if isinstance(x, EncodedExample) else int(x) for x in lengths_or_examples]
    if not lengths:
        raise DataError("padding_savings needs at least one example")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    global_max = max(lengths)
    dynamic = 0
    fixed = 0
    for start in range(0, len(lengths), batch_size):
        chunk = lengths[start : start + batch_size]
        dynamic += len(chunk) * max(chunk)
        fixed += len(chunk) * global_max
    return 1.0 - dynamic / fixed
