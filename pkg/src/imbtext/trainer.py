"""Fine-tuning loop: AdamW with layer-wise lr decay and a cosine schedule."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .batching import EncodedExample, make_batches
from .checkpoint import Checkpoint
from .data import Dataset, Vocab, build_vocab, encode
from .encoder import EncoderConfig
from .errors import CheckpointError, ConfigError, NumericError
from .model import Classifier, ModelConfig
from .numerics import Rng, no_grad
from .objectives import MetricsReport, confusion_matrix, label_smoothed_ce
from .pooling import HeadConfig, default_rates

log = logging.getLogger(__name__)

PAPER_BASE_LR = 2e-5  # for a pretrained 12-layer encoder
DESK_BASE_LR = 3e-4  # from-scratch desk-scale default


@dataclass
class TrainConfig:
    base_lr: float = DESK_BASE_LR
    llrd_decay: float = 0.95
    epsilon_smoothing: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    eval_batch_size: int = 128
    warmup_steps: int | None = None  # None -> 10% of total steps
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    pooling: str = "hybrid"
    vocab_size: int = 5000
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ffn_dim: int | None = None
    max_len: int = 128
    attention_mode: str = "bidirectional"
    freeze_encoder: bool = False
    num_paths: int = 5
    dropout_rates: list[float] | None = None
    head_hidden_dim: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.dropout_rates is None:
            self.dropout_rates = default_rates(self.num_paths)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.llrd_decay <= 1.0:
            raise ConfigError(f"llrd_decay must be in (0, 1], got {self.llrd_decay}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0 and batch_size >= 1")
        if not 0.0 <= self.epsilon_smoothing < 1.0:
            raise ConfigError("epsilon_smoothing must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, vocab_size: int, num_classes: int) -> ModelConfig:
        enc = EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            ffn_dim=self.ffn_dim,
            max_len=self.max_len,
            attention_mode=self.attention_mode,
        )
        head = HeadConfig(num_classes, self.head_hidden_dim, self.num_paths, list(self.dropout_rates))
        return ModelConfig(enc, head, self.pooling, self.freeze_encoder)


# ---------------------------------------------------------------------------
# Parameter groups, schedule, optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    name: str
    params: list[str]
    lr_mult: float
    weight_decay: bool


_LAYER = re.compile(r"^layers\.(\d+)\.")


def no_weight_decay(name: str) -> bool:
    """Layer-norm parameters and biases are exempt from weight decay."""
    return name.endswith((".b", ".gamma", ".beta"))


def layer_depth(name: str, num_layers: int) -> int:
    """Decay exponent: 0 for head/pooling, L - l for layer l, L + 1 for embeddings."""
    if name.startswith("embed."):
        return num_layers + 1
    m = _LAYER.match(name)
    if m:
        return num_layers - int(m.group(1))
    return 0


def build_llrd_groups(model: Classifier, base_lr: float, decay: float) -> list[ParamGroup]:
    """Group trainable parameters by (depth, weight-decay flag).

    ``base_lr`` is accepted for symmetry with the optimizer call site; the
    groups carry multipliers, the schedule supplies the absolute rate.
    """
    if not 0.0 < decay <= 1.0:
        raise ConfigError(f"llrd decay must be in (0, 1], got {decay}")
    L = model.num_layers
    groups: dict[tuple[int, bool], ParamGroup] = {}
    for name in model.trainable():
        depth = layer_depth(name, L)
        wd = not no_weight_decay(name)
        key = (depth, wd)
        if key not in groups:
            label = "head" if depth == 0 else ("embed" if depth == L + 1 else f"layer{L - depth}")
            groups[key] = ParamGroup(f"{label}.{'decay' if wd else 'no_decay'}", [], decay**depth, wd)
        groups[key].params.append(name)
    return sorted(groups.values(), key=lambda g: (-g.lr_mult, g.name))


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be smaller than total_steps")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lrs: dict[str, float] | float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: dict[str, float] | float = 0.0,
) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        lr = lrs[name] if isinstance(lrs, dict) else lrs
        wd = weight_decay[name] if isinstance(weight_decay, dict) else weight_decay
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * w
        w -= lr * update


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def encode_dataset(dataset: Dataset, vocab: Vocab, max_len: int) -> list[EncodedExample]:
    return [EncodedExample(tuple(encode(ex.text, vocab, max_len)), ex.label_id) for ex in dataset.examples]


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best dev macro-F1
    final: Checkpoint
    history: list[dict]


def make_checkpoint(model: Classifier, config: TrainConfig, vocab: Vocab, label_map: dict[str, int], step: int) -> Checkpoint:
    return Checkpoint(
        model.state_dict(),
        {"train": config.to_dict(), "model": model.config.to_dict()},
        list(vocab.itos),
        dict(label_map),
        step,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    try:
        mcfg = ModelConfig.from_dict(ckpt.config["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config lacks a model section ({exc})") from None
    if len(ckpt.vocab) != mcfg.encoder.vocab_size or ckpt.tensors.get("embed.token", np.empty((0, 0))).shape[0] != len(ckpt.vocab):
        raise CheckpointError(
            f"vocab mismatch: {len(ckpt.vocab)} tokens vs vocab_size {mcfg.encoder.vocab_size} / "
            f"embedding rows {ckpt.tensors.get('embed.token', np.empty((0,))).shape[0]}"
        )
    return Classifier.from_state(mcfg, ckpt.tensors)


def predict_logits(model: Classifier, encoded: Sequence[EncodedExample], batch_size: int = 128) -> np.ndarray:
    """Eval-mode logits in input order."""
    if not encoded:
        return np.zeros((0, model.config.head.num_classes))
    out = []
    for batch in make_batches(encoded, batch_size, shuffle=False):
        out.append(model.predict(batch.token_ids, batch.attention_mask))
    return np.concatenate(out, axis=0)


def _report(model: Classifier, encoded: Sequence[EncodedExample], num_classes: int, batch_size: int) -> MetricsReport:
    logits = predict_logits(model, encoded, batch_size)
    preds = logits.argmax(axis=1)
    golds = [ex.label for ex in encoded]
    return MetricsReport.from_confusion(confusion_matrix(preds, golds, num_classes))


def align_labels(dataset: Dataset, label_map: dict[str, int]) -> Dataset:
    """Re-express ``dataset`` ids in ``label_map`` by label name."""
    if dataset.label_map == label_map:
        return dataset
    names = dataset.label_names()
    missing = sorted({names[ex.label_id] for ex in dataset.examples} - set(label_map))
    if missing:
        raise CheckpointError(f"labels not covered by the checkpoint label map: {missing}")
    from .data import Example

    return Dataset([Example(ex.text, label_map[names[ex.label_id]]) for ex in dataset.examples], dict(label_map))


def train(
    config: TrainConfig,
    train_set: Dataset,
    dev_set: Dataset | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Fine-tune encoder + pooling + head; keep the best dev macro-F1 checkpoint."""
    if not train_set.examples:
        raise ConfigError("training set is empty")
    label_map = train_set.label_map
    if dev_set is not None:
        dev_set = align_labels(dev_set, label_map)
    vocab = vocab or build_vocab(train_set.examples, config.vocab_size)
    C = len(label_map)
    model = Classifier(config.model_config(len(vocab), C), seed=config.seed)
    train_enc = encode_dataset(train_set, vocab, config.max_len)
    dev_enc = encode_dataset(dev_set, vocab, config.max_len) if dev_set is not None and dev_set.examples else None

    root = Rng(config.seed)
    shuffle_rng = root.spawn(1)
    dropout_rng = root.spawn(2)
    groups = build_llrd_groups(model, config.base_lr, config.llrd_decay)
    mult = {n: g.lr_mult for g in groups for n in g.params}
    wd = {n: (config.weight_decay if g.weight_decay else 0.0) for g in groups for n in g.params}
    trainable = model.trainable()
    state = OptimizerState()

    per_epoch = math.ceil(len(train_enc) / config.batch_size)
    total = per_epoch * config.epochs
    warmup = config.warmup_steps if config.warmup_steps is not None else int(0.1 * total)
    if total and warmup >= total:
        raise ConfigError(f"warmup_steps ({warmup}) must be below total steps ({total})")

    init = make_checkpoint(model, config, vocab, label_map, 0)
    best, best_f1 = init, -1.0
    history: list[dict] = []
    step = 0
    lr = 0.0
    for epoch in range(config.epochs):
        loss_sum, seen = 0.0, 0
        for batch in make_batches(train_enc, config.batch_size, shuffle=True, rng=shuffle_rng):
            logits = model.forward(batch.token_ids, batch.attention_mask, training=True, rng=dropout_rng)
            loss = label_smoothed_ce(logits, batch.labels, config.epsilon_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"training diverged at step {step}: loss={value}")
            for p in trainable.values():
                p.grad = None
            loss.backward()
            lr = cosine_lr(step, total, warmup, config.base_lr)
            adamw_step(
                {n: p.data for n, p in trainable.items()},
                {n: p.grad for n, p in trainable.items() if p.grad is not None},
                state,
                {n: lr * mult[n] for n in trainable},
                config.betas,
                config.adam_eps,
                wd,
            )
            loss_sum += value * len(batch)
            seen += len(batch)
            step += 1
        entry = {"epoch": epoch + 1, "train_loss": loss_sum / seen, "dev_accuracy": None, "dev_macro_f1": None, "lr_last": lr}
        if dev_enc is not None:
            rep = _report(model, dev_enc, C, config.eval_batch_size)
            entry["dev_accuracy"], entry["dev_macro_f1"] = rep.accuracy, rep.macro_f1
            if rep.macro_f1 > best_f1:
                best_f1 = rep.macro_f1
                best = make_checkpoint(model, config, vocab, label_map, step)
        log.info("epoch %d loss %.4f dev_f1 %s", epoch + 1, entry["train_loss"], entry["dev_macro_f1"])
        history.append(entry)
    final = make_checkpoint(model, config, vocab, label_map, step)
    if dev_enc is None:
        best = final
    return TrainResult(best, final, history)


def evaluate(ckpt: Checkpoint, dataset: Dataset, batch_size: int = 128) -> MetricsReport:
    """Eval-mode forward, argmax predictions, metrics over the checkpoint's classes."""
    model = model_from_checkpoint(ckpt)
    dataset = align_labels(dataset, ckpt.label_map)
    vocab = Vocab(ckpt.vocab)
    encoded = encode_dataset(dataset, vocab, model.config.encoder.max_len)
    return _report(model, encoded, len(ckpt.label_map), batch_size)


def history_jsonl(history: list[dict]) -> str:
    keys = ("epoch", "train_loss", "dev_accuracy", "dev_macro_f1", "lr_last")
    return "".join(json.dumps({k: h[k] for k in keys}) + "\n" for h in history)
