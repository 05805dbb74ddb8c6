"""Corpus ingestion, vocabulary, dataset statistics, synthetic long-tail data
and label-noise injection."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .numerics import Rng

PAD, UNK, CLS = 0, 1, 2
SPECIALS = ("[PAD]", "[UNK]", "[CLS]")


@dataclass(frozen=True)
class Example:
    text: str
    label_id: int


@dataclass
class Dataset:
    examples: list[Example]
    label_map: dict[str, int]

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    @property
    def labels(self) -> list[int]:
        return [ex.label_id for ex in self.examples]

    def label_names(self) -> list[str]:
        names = [""] * len(self.label_map)
        for name, i in self.label_map.items():
            names[i] = name
        return names

    def __len__(self) -> int:
        return len(self.examples)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Token to id map with PAD=0, UNK=1, CLS=2 reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpus: Iterable[Example | str], max_size: int) -> Vocab:
    """Keep the ``max_size - 3`` most frequent tokens, ties broken lexicographically."""
    if max_size < 4:
        raise ConfigError(f"max_size must be >= 4, got {max_size}")
    texts = [ex.text if isinstance(ex, Example) else ex for ex in corpus]
    if not texts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in texts for tok in tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIALS) + [tok for tok, _ in ranked[: max_size - 3]])


def encode(text: str, vocab: Vocab, max_len: int) -> list[int]:
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    ids = [CLS] + [vocab.id(tok) for tok in tokenize(text)]
    return ids[:max_len]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_label_map(path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: label map is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}: label map must be a JSON object")
    ids = sorted(raw.values())
    if ids != list(range(len(ids))):
        raise DataError(f"{path}: label ids must be dense in [0, {len(ids)})")
    return {str(k): int(v) for k, v in raw.items()}


def save_label_map(label_map: dict[str, int], path) -> None:
    ordered = dict(sorted(label_map.items(), key=lambda kv: kv[1]))
    Path(path).write_text(json.dumps(ordered, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def label_map_from_names(names: Iterable[str]) -> dict[str, int]:
    """Ids assigned in lexicographic order of label strings."""
    return {name: i for i, name in enumerate(sorted(set(names)))}


def _read_records(path) -> list[tuple[int, str, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str) or not isinstance(obj.get("label"), str):
                raise ParseError(f'{path}: line {lineno}: expected string fields "text" and "label"')
            records.append((lineno, obj["text"], obj["label"]))
    return records


def load_jsonl(path, label_map: dict[str, int] | None = None) -> Dataset:
    """Read ``{"text", "label"}`` lines. Without a label map one is derived."""
    records = _read_records(path)
    if label_map is None:
        label_map = label_map_from_names(label for _, _, label in records)
    examples = []
    for lineno, text, label in records:
        if label not in label_map:
            raise DataError(f"{path}: line {lineno}: unknown label {label!r}")
        examples.append(Example(text, label_map[label]))
    return Dataset(examples, dict(label_map))


def save_jsonl(dataset: Dataset, path) -> None:
    names = dataset.label_names()
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps({"text": ex.text, "label": names[ex.label_id]}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def class_distribution(examples: Sequence[Example] | Dataset, num_classes: int | None = None) -> list[int]:
    if isinstance(examples, Dataset):
        num_classes = examples.num_classes if num_classes is None else num_classes
        examples = examples.examples
    if num_classes is None:
        num_classes = max((ex.label_id for ex in examples), default=-1) + 1
    counts = [0] * num_classes
    for ex in examples:
        counts[ex.label_id] += 1
    return counts


@dataclass
class Histogram:
    bin_width: int
    counts: list[int]
    overflow: int
    threshold: int

    def to_json(self) -> dict:
        return {"bin_width": self.bin_width, "bin_starts": [i * self.bin_width for i in range(len(self.counts))], "counts": self.counts, "threshold": self.threshold}


@dataclass
class DatasetStats:
    class_counts: list[int]
    word_counts: list[int]
    char_counts: list[int]
    word_hist: Histogram
    char_hist: Histogram
    clip_percentile: float

    def to_json(self) -> dict:
        return {
            "class_counts": self.class_counts,
            "word_hist": self.word_hist.to_json(),
            "char_hist": self.char_hist.to_json(),
            "overflow": {"word": self.word_hist.overflow, "char": self.char_hist.overflow},
            "clip_percentile": self.clip_percentile,
        }


def percentile_threshold(values: Sequence[int], pct: float) -> int:
    """Nearest-rank percentile: the smallest value with at least pct% of data at or below it."""
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, math.ceil(pct * len(ordered) / 100.0))
    return ordered[rank - 1]


def _histogram(values: Sequence[int], pct: float, bin_width: int) -> Histogram:
    threshold = percentile_threshold(values, pct)
    kept = [v for v in values if v <= threshold]
    nbins = threshold // bin_width + 1 if values else 0
    counts = [0] * nbins
    for v in kept:
        counts[v // bin_width] += 1
    return Histogram(bin_width, counts, len(values) - len(kept), threshold)


def length_stats(
    examples: Sequence[Example | str], clip_percentile: float = 99.5, word_bin: int = 1, char_bin: int = 5
) -> DatasetStats:
    if not 0 < clip_percentile <= 100:
        raise ConfigError(f"clip_percentile must be in (0, 100], got {clip_percentile}")
    texts = [ex.text if isinstance(ex, Example) else ex for ex in examples]
    words = [len(t.split()) for t in texts]
    chars = [len(t) for t in texts]
    labelled = [ex for ex in examples if isinstance(ex, Example)]
    return DatasetStats(
        class_counts=class_distribution(labelled),
        word_counts=words,
        char_counts=chars,
        word_hist=_histogram(words, clip_percentile, word_bin),
        char_hist=_histogram(chars, clip_percentile, char_bin),
        clip_percentile=clip_percentile,
    )


def dataset_stats(dataset: Dataset, clip_percentile: float = 99.5, word_bin: int = 1, char_bin: int = 5) -> DatasetStats:
    stats = length_stats(dataset.examples, clip_percentile, word_bin, char_bin)
    stats.class_counts = class_distribution(dataset)
    return stats


# ---------------------------------------------------------------------------
# Synthetic long-tail corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_classes: int = 82
    head_count: int = 600
    tail_count: int = 7
    exponent: float = 2.0
    min_tokens: int = 8
    max_tokens: int = 24
    keywords_per_class: int = 8
    keyword_prob: float = 0.3
    filler_vocab: int = 200
    overlap: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.head_count >= self.tail_count >= 1:
            raise ConfigError("need head_count >= tail_count >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must be in [0, 1)")
        if self.exponent < 0:
            raise ConfigError("exponent must be >= 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if self.keywords_per_class < 1 or self.filler_vocab < 1:
            raise ConfigError("keyword and filler pools must be non-empty")
        if not 0.0 < self.keyword_prob <= 1.0:
            raise ConfigError("keyword_prob must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def class_counts_for(config: SynthConfig) -> list[int]:
    """count(c) = round(head * (c+1)^-exponent), never below tail_count."""
    return [
        max(config.tail_count, int(math.floor(config.head_count * (c + 1) ** (-config.exponent) + 0.5)))
        for c in range(config.num_classes)
    ]


def class_name(c: int, num_classes: int) -> str:
    width = max(2, len(str(num_classes - 1)))
    return f"class_{c:0{width}d}"


def sibling_of(c: int, num_classes: int) -> int | None:
    """Classes are paired (0,1), (2,3), ...; a trailing odd class has no sibling."""
    s = c ^ 1
    return s if s < num_classes else None


def keyword_pools(config: SynthConfig) -> list[list[str]]:
    """Per-class keyword pools; siblings share ``overlap`` of their pool."""
    k = config.keywords_per_class
    shared = int(math.floor(config.overlap * k + 0.5))
    pools = [[f"kw{c}_{j}" for j in range(k)] for c in range(config.num_classes)]
    for c in range(1, config.num_classes, 2):
        pools[c][:shared] = pools[c - 1][:shared]
    return pools


def synth_generate(config: SynthConfig) -> Dataset:
    """Bag-of-keyword documents with a power-law class-size schedule."""
    config.validate()
    rng = Rng(config.seed)
    pools = keyword_pools(config)
    fillers = [f"w{j}" for j in range(config.filler_vocab)]
    counts = class_counts_for(config)
    rows: list[Example] = []
    for c, n in enumerate(counts):
        pool = pools[c]
        for _ in range(n):
            length = config.min_tokens + rng.randint(config.max_tokens - config.min_tokens + 1)
            u = rng.uniform(length)
            picks = rng.uniform(length)
            toks = [
                pool[min(int(p * len(pool)), len(pool) - 1)] if ui < config.keyword_prob else fillers[min(int(p * len(fillers)), len(fillers) - 1)]
                for ui, p in zip(u, picks)
            ]
            if not any(t in pool for t in toks):
                toks[rng.randint(length)] = pool[rng.randint(len(pool))]
            rows.append(Example(" ".join(toks), c))
    order = rng.permutation(len(rows))
    names = [class_name(c, config.num_classes) for c in range(config.num_classes)]
    return Dataset([rows[i] for i in order], label_map_from_names(names))


def nearest_class_oracle(text: str, pools: list[list[str]]) -> int:
    """Predict the class whose keyword pool has the most hits (lowest id on ties)."""
    toks = tokenize(text)
    sets = [set(p) for p in pools]
    hits = [sum(t in s for t in toks) for s in sets]
    return int(np.argmax(hits))


def split_dataset(dataset: Dataset, dev_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; every class with >= 2 examples gets at least one dev item."""
    if not 0.0 < dev_fraction < 1.0:
        raise ConfigError("dev_fraction must be in (0, 1)")
    rng = Rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(dataset.examples):
        by_class.setdefault(ex.label_id, []).append(i)
    dev_idx: set[int] = set()
    for c in sorted(by_class):
        idx = by_class[c]
        if len(idx) < 2:
            continue
        n_dev = min(len(idx) - 1, max(1, int(math.floor(dev_fraction * len(idx) + 0.5))))
        perm = rng.permutation(len(idx))
        dev_idx.update(idx[j] for j in perm[:n_dev])
    train = [ex for i, ex in enumerate(dataset.examples) if i not in dev_idx]
    dev = [ex for i, ex in enumerate(dataset.examples) if i in dev_idx]
    return Dataset(train, dict(dataset.label_map)), Dataset(dev, dict(dataset.label_map))


# ---------------------------------------------------------------------------
# Label noise
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMap:
    """For each class, adjacent classes and mixing weights summing to 1."""

    adjacency: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for c, nbrs in self.adjacency.items():
            if not nbrs:
                continue
            if any(n == c for n, _ in nbrs):
                raise ConfigError(f"class {c} is listed as adjacent to itself")
            total = sum(w for _, w in nbrs)
            if total <= 0 or any(w < 0 for _, w in nbrs):
                raise ConfigError(f"class {c}: adjacency weights must be non-negative with positive sum")
            self.adjacency[c] = [(int(n), w / total) for n, w in nbrs]

    def neighbors(self, c: int) -> list[tuple[int, float]]:
        return self.adjacency.get(c, [])

    @classmethod
    def siblings(cls, num_classes: int) -> "ConfusionMap":
        """Each class adjacent to its keyword-sharing sibling."""
        adj = {}
        for c in range(num_classes):
            s = sibling_of(c, num_classes)
            adj[c] = [(s, 1.0)] if s is not None else []
        return cls(adj)

    def to_json(self) -> dict:
        return {str(c): [[n, w] for n, w in nbrs] for c, nbrs in self.adjacency.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "ConfusionMap":
        return cls({int(c): [(int(n), float(w)) for n, w in nbrs] for c, nbrs in obj.items()})


@dataclass
class NoisyDataset:
    dataset: Dataset
    flips: int
    flipped: list[int]


def inject_label_noise(dataset: Dataset, rate: float, confusion: ConfusionMap, rng: Rng) -> NoisyDataset:
    """Flip each label with probability ``rate`` to an adjacent class."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"noise rate must be in [0, 1], got {rate}")
    out = []
    flipped = []
    for i, ex in enumerate(dataset.examples):
        if rate > 0 and rng.uniform() < rate:
            nbrs = confusion.neighbors(ex.label_id)
            if not nbrs:
                raise DataError(f"example {i}: class {ex.label_id} has no adjacent class to flip to")
            new = nbrs[rng.choice([w for _, w in nbrs])][0]
            out.append(Example(ex.text, new))
            flipped.append(i)
        else:
            out.append(ex)
    return NoisyDataset(Dataset(out, dict(dataset.label_map)), len(flipped), flipped)
