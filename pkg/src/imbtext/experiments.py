"""Reusable experiment recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import ConfusionMap, Dataset, SynthConfig, inject_label_noise, split_dataset, synth_generate
from .numerics import Rng
from .objectives import MetricsReport
from .trainer import TrainConfig, TrainResult, evaluate, train

# frozen causal encoder read out at its last token, same head as arm (a)
ARM_B = {"attention_mode": "causal", "freeze_encoder": True, "pooling": "last"}
ARM_A = {"attention_mode": "bidirectional", "freeze_encoder": False, "pooling": "hybrid"}


@dataclass
class SynthSplit:
    train: Dataset
    dev: Dataset
    flips: int = 0


def noisy_synth_split(synth: SynthConfig, noise_rate: float = 0.0, dev_fraction: float = 0.2) -> SynthSplit:
    """Generate, split (stratified), then flip training labels to sibling classes.

    Only the training split is corrupted so dev scores measure the clean task.
    """
    data = synth_generate(synth)
    tr, dev = split_dataset(data, dev_fraction, seed=synth.seed)
    flips = 0
    if noise_rate > 0:
        noisy = inject_label_noise(tr, noise_rate, ConfusionMap.siblings(synth.num_classes), Rng(synth.seed).spawn(7))
        tr, flips = noisy.dataset, noisy.flips
    return SynthSplit(tr, dev, flips)


@dataclass
class CompareResult:
    arm_a: MetricsReport
    arm_b: MetricsReport
    history_a: list[dict] = field(default_factory=list)
    history_b: list[dict] = field(default_factory=list)

    @property
    def delta_macro_f1(self) -> float:
        return self.arm_a.macro_f1 - self.arm_b.macro_f1

    def to_dict(self) -> dict:
        return {
            "arm_a": {"setup": ARM_A, "report": self.arm_a.to_dict(), "history": self.history_a},
            "arm_b": {"setup": ARM_B, "report": self.arm_b.to_dict(), "history": self.history_b},
            "delta_macro_f1": self.delta_macro_f1,
        }


def compare_arms(config: TrainConfig, split: SynthSplit | tuple[Dataset, Dataset]) -> CompareResult:
    """Train both arms on the same data, seed and budget; score the final weights on dev."""
    tr, dev = (split.train, split.dev) if isinstance(split, SynthSplit) else split
    results: list[TrainResult] = []
    for setup in (ARM_A, ARM_B):
        cfg = replace(config, **setup)
        results.append(train(cfg, tr, dev))
    a, b = results
    return CompareResult(evaluate(a.final, dev), evaluate(b.final, dev), a.history, b.history)
