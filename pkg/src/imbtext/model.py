"""Encoder + pooling + head composed into one classifier with named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, encode_sequence, init_encoder_params
from .errors import ConfigError
from .numerics import Rng, Tensor, no_grad
from .pooling import HeadConfig, head_forward, init_head_params, init_pool_params, pool, pooled_dim


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    head: HeadConfig
    pooling: str = "hybrid"
    freeze_encoder: bool = False

    def __post_init__(self):
        pooled_dim(self.pooling, self.encoder.d_model)
        if self.head.hidden_dim is None:
            self.head.hidden_dim = self.encoder.d_model
        self.head.validate()

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "head": self.head.to_dict(),
            "pooling": self.pooling,
            "freeze_encoder": self.freeze_encoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(
                encoder=EncoderConfig(**d["encoder"]),
                head=HeadConfig(**d["head"]),
                pooling=d.get("pooling", "hybrid"),
                freeze_encoder=d.get("freeze_encoder", False),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None


class Classifier:
    """Holds parameters by name; ``forward`` returns (B, C) logits."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            rng = Rng(seed)
            params = init_encoder_params(config.encoder, rng)
            params.update(init_pool_params(config.pooling, config.encoder.d_model, rng))
            params.update(init_head_params(pooled_dim(config.pooling, config.encoder.d_model), config.head, rng))
        self.params = params
        if config.freeze_encoder:
            for name in self.encoder_param_names():
                self.params[name].requires_grad = False

    @property
    def num_layers(self) -> int:
        return self.config.encoder.num_layers

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("embed.", "layers."))]

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def features(self, token_ids: np.ndarray, mask: np.ndarray):
        if self.config.freeze_encoder:
            with no_grad():
                states = encode_sequence(token_ids, mask, self.config.encoder, self.params)
                feats = pool(states, self.config.pooling, self.params)
            if self.config.pooling in ("attn", "hybrid"):
                # the attention scorer still trains on top of frozen states
                states.states = Tensor(states.states.data)
                feats = pool(states, self.config.pooling, self.params)
            return feats
        states = encode_sequence(token_ids, mask, self.config.encoder, self.params)
        return pool(states, self.config.pooling, self.params)

    def forward(self, token_ids: np.ndarray, mask: np.ndarray, training: bool = False, rng: Rng | None = None) -> Tensor:
        feats = self.features(token_ids, mask)
        return head_forward(feats.h_pooled, self.params, self.config.head, training, rng)

    def predict(self, token_ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(token_ids, mask, training=False).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "Classifier":
        params = {n: Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=n) for n, a in tensors.items()}
        return cls(config, params=params)
