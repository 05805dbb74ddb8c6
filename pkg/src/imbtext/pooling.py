"""Sequence pooling (cls / mean / attention / hybrid) and the multi-sample
dropout classification head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import INIT_STD, LN_EPS, TokenStates, last_position_pool, linear
from .errors import ConfigError, DegenerateMaskError, ShapeError
from .numerics import Rng, Tensor, concat, dropout, gelu, layer_norm, ordered_sum, softmax_masked

POOLING_MODES = ("cls", "mean", "attn", "hybrid", "last")


def pooled_dim(mode: str, d_model: int) -> int:
    if mode not in POOLING_MODES:
        raise ConfigError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")
    return 2 * d_model if mode == "hybrid" else d_model


@dataclass
class PooledFeatures:
    h_pooled: Tensor
    h_mean: Tensor | None = None
    h_attn: Tensor | None = None

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Recover (mean, attention) halves from the concatenated vector."""
        d = self.h_pooled.shape[-1] // 2
        return self.h_pooled.data[..., :d], self.h_pooled.data[..., d:]


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not (mask.sum(axis=-1) > 0).all():
        raise DegenerateMaskError("pooling over a sequence with every position masked")
    return mask


def cls_pool(states: TokenStates | Tensor) -> Tensor:
    x = states.states if isinstance(states, TokenStates) else states
    return x[:, 0]


def mean_pool(states: Tensor, mask: np.ndarray) -> Tensor:
    """Average of unmasked token states."""
    mask = _check_mask(mask)
    total = ordered_sum(states * Tensor(mask[..., None]), axis=1)
    return total / Tensor(mask.sum(axis=1, keepdims=True))


def attention_scores(states: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # per-token dot product reduced over features only, so it is unaffected by L
    return (states * w).sum(axis=-1) + b


def attention_pool(states: Tensor, mask: np.ndarray, w: Tensor, b: Tensor, return_weights: bool = False):
    """Learned-score softmax over unmasked tokens, then a weighted sum of states."""
    mask = _check_mask(mask)
    if w.shape != (states.shape[-1],):
        raise ShapeError(f"attention scorer has shape {w.shape}, states have d_model {states.shape[-1]}")
    alpha = softmax_masked(attention_scores(states, w, b), mask.astype(bool))
    h = ordered_sum(states * alpha.reshape(*alpha.shape, 1), axis=1)
    return (h, alpha.data) if return_weights else h


def hybrid_pool(states: Tensor, mask: np.ndarray, w: Tensor, b: Tensor) -> PooledFeatures:
    """[mean ; attention] concatenation, mean half first."""
    h_mean = mean_pool(states, mask)
    h_attn = attention_pool(states, mask, w, b)
    return PooledFeatures(concat([h_mean, h_attn], axis=-1), h_mean, h_attn)


def pool(states: TokenStates, mode: str, params: dict[str, Tensor]) -> PooledFeatures:
    x, mask = states.states, states.mask
    if mode == "cls":
        return PooledFeatures(cls_pool(x))
    if mode == "mean":
        h = mean_pool(x, mask)
        return PooledFeatures(h, h_mean=h)
    if mode == "attn":
        h = attention_pool(x, mask, params["pool.attn.w"], params["pool.attn.b"])
        return PooledFeatures(h, h_attn=h)
    if mode == "hybrid":
        return hybrid_pool(x, mask, params["pool.attn.w"], params["pool.attn.b"])
    if mode == "last":
        return PooledFeatures(last_position_pool(states))
    raise ConfigError(f"unknown pooling mode {mode!r}")


def init_pool_params(mode: str, d_model: int, rng: Rng) -> dict[str, Tensor]:
    if mode not in ("attn", "hybrid"):
        return {}
    return {
        "pool.attn.w": Tensor(rng.normal((d_model,), INIT_STD), requires_grad=True, name="pool.attn.w"),
        "pool.attn.b": Tensor(np.zeros(()), requires_grad=True, name="pool.attn.b"),
    }


# ---------------------------------------------------------------------------
# Multi-sample dropout head
# ---------------------------------------------------------------------------


def default_rates(num_paths: int, low: float = 0.1, high: float = 0.3) -> list[float]:
    """``num_paths`` rates evenly spaced over [low, high]."""
    if num_paths == 1:
        return [low]
    return [round(float(r), 12) for r in np.linspace(low, high, num_paths)]


@dataclass
class HeadConfig:
    num_classes: int
    hidden_dim: int | None = None
    num_paths: int = 5
    dropout_rates: list[float] = field(default_factory=lambda: default_rates(5))

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.num_paths < 1 or len(self.dropout_rates) != self.num_paths:
            raise ConfigError(f"got {len(self.dropout_rates)} dropout rates for {self.num_paths} paths")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_head_params(input_dim: int, config: HeadConfig, rng: Rng) -> dict[str, Tensor]:
    hidden = config.hidden_dim
    C = config.num_classes
    return {
        "head.dense.w": Tensor(rng.normal((input_dim, hidden), INIT_STD), requires_grad=True, name="head.dense.w"),
        "head.dense.b": Tensor(np.zeros(hidden), requires_grad=True, name="head.dense.b"),
        "head.ln.gamma": Tensor(np.ones(hidden), requires_grad=True, name="head.ln.gamma"),
        "head.ln.beta": Tensor(np.zeros(hidden), requires_grad=True, name="head.ln.beta"),
        "head.out.w": Tensor(rng.normal((hidden, C), INIT_STD), requires_grad=True, name="head.out.w"),
        "head.out.b": Tensor(np.zeros(C), requires_grad=True, name="head.out.b"),
    }


def head_trunk(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """GELU(LN(dense(h))), shared by every dropout path."""
    if h.shape[-1] != params["head.dense.w"].shape[0]:
        raise ShapeError(f"head expects input dim {params['head.dense.w'].shape[0]}, got {h.shape[-1]}")
    z = linear(h, params["head.dense.w"], params["head.dense.b"])
    return gelu(layer_norm(z, params["head.ln.gamma"], params["head.ln.beta"], LN_EPS))


def head_forward(h: Tensor, params: dict[str, Tensor], config: HeadConfig, training: bool, rng: Rng | None = None) -> Tensor:
    """Average of the classifier logits over ``num_paths`` dropout masks.

    In eval mode every path is the identity, so the classifier runs once.
    """
    config.validate()
    z = head_trunk(h, params)
    w, b = params["head.out.w"], params["head.out.b"]
    if not training:
        return linear(z, w, b)
    total = None
    for rate in config.dropout_rates:
        logits = linear(dropout(z, rate, rng, training), w, b)
        total = logits if total is None else total + logits
    return total * (1.0 / config.num_paths)
