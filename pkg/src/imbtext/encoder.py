"""Small post-LN transformer encoder with bidirectional or causal attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DegenerateMaskError, ShapeError
from .numerics import Rng, Tensor, embedding, gelu, layer_norm, matmul, ordered_sum, softmax_masked

# BERT-family arrangement: y = LN(x + Attn(x)); out = LN(y + FFN(y))
POST_LAYER_NORM = True
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ffn_dim: int | None = None
    max_len: int = 128
    attention_mode: str = "bidirectional"

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.num_heads <= 0 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be a positive multiple of num_heads ({self.num_heads})")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.num_layers < 0 or self.vocab_size < 4:
            raise ConfigError("need num_layers >= 0 and vocab_size >= 4")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ConfigError(f"attention_mode must be 'bidirectional' or 'causal', got {self.attention_mode!r}")

    @property
    def causal(self) -> bool:
        return self.attention_mode == "causal"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenStates:
    states: Tensor  # (B, L, D)
    mask: np.ndarray  # (B, L) of {0, 1}


def _param(rng: Rng, shape, name: str) -> Tensor:
    return Tensor(rng.normal(shape, INIT_STD), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_encoder_params(config: EncoderConfig, rng: Rng) -> dict[str, Tensor]:
    """normal(0, 0.02) matrices, zero biases, unit/zero layer norms."""
    D, F = config.d_model, config.ffn_dim
    p: dict[str, Tensor] = {}

    def add(t: Tensor):
        p[t.name] = t

    add(_param(rng, (config.vocab_size, D), "embed.token"))
    add(_param(rng, (config.max_len, D), "embed.position"))
    for i in range(config.num_layers):
        pre = f"layers.{i}"
        for proj in ("q", "k", "v", "o"):
            add(_param(rng, (D, D), f"{pre}.attn.{proj}.w"))
            # a key bias only shifts each query's scores uniformly: softmax ignores it
            if proj != "k":
                add(_zeros((D,), f"{pre}.attn.{proj}.b"))
        add(_ones((D,), f"{pre}.ln1.gamma"))
        add(_zeros((D,), f"{pre}.ln1.beta"))
        add(_param(rng, (D, F), f"{pre}.ffn.in.w"))
        add(_zeros((F,), f"{pre}.ffn.in.b"))
        add(_param(rng, (F, D), f"{pre}.ffn.out.w"))
        add(_zeros((D,), f"{pre}.ffn.out.b"))
        add(_ones((D,), f"{pre}.ln2.gamma"))
        add(_zeros((D,), f"{pre}.ln2.beta"))
    return p


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def embed(token_ids: np.ndarray, mask: np.ndarray, params: dict[str, Tensor]) -> TokenStates:
    """Token embedding plus learned absolute position embedding."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be (B, L), got shape {token_ids.shape}")
    L = token_ids.shape[1]
    pos_table = params["embed.position"]
    if L > pos_table.shape[0]:
        raise ShapeError(f"sequence length {L} exceeds max_len {pos_table.shape[0]}")
    vocab = params["embed.token"].shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab):
        raise ShapeError(f"token id out of range for vocab_size {vocab}")
    tok = embedding(params["embed.token"], token_ids)
    pos = embedding(pos_table, np.arange(L))
    return TokenStates(tok + pos, np.asarray(mask, dtype=np.float64))


def attention_mask(mask: np.ndarray, causal: bool) -> np.ndarray:
    """Boolean (B, 1, L, L) mask: key is unpadded, and key <= query if causal."""
    keys = np.asarray(mask, dtype=bool)
    if not keys.any(axis=-1).all():
        raise DegenerateMaskError("a sequence has every position masked")
    allowed = keys[:, None, None, :]
    if causal:
        L = keys.shape[-1]
        allowed = allowed & np.tri(L, dtype=bool)[None, None]
    return allowed


def self_attention(
    x: TokenStates,
    params: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    causal: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product self-attention.

    Returns new TokenStates, plus the (B, H, L, L) weights when asked.
    """
    X = x.states
    B, L, D = X.shape
    if D % num_heads:
        raise ConfigError(f"d_model {D} not divisible by {num_heads} heads")
    dh = D // num_heads
    allowed = attention_mask(x.mask, causal)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(X, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]))
    k = heads(matmul(X, params[f"{prefix}.k.w"]))
    v = heads(linear(X, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = softmax_masked(scores, allowed)
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, L, D)
    out = TokenStates(linear(ctx, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"]), x.mask)
    if return_weights:
        return out, weights.data
    return out


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = gelu(linear(x, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"]))
    return linear(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def transformer_block(x: TokenStates, params: dict[str, Tensor], layer: int, num_heads: int, causal: bool = False) -> TokenStates:
    pre = f"layers.{layer}"
    attn = self_attention(x, params, f"{pre}.attn", num_heads, causal)
    y = layer_norm(x.states + attn.states, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"], LN_EPS)
    out = layer_norm(y + feed_forward(y, params, f"{pre}.ffn"), params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"], LN_EPS)
    return TokenStates(out, x.mask)


def encode_sequence(token_ids: np.ndarray, mask: np.ndarray, config: EncoderConfig, params: dict[str, Tensor]) -> TokenStates:
    """Embeddings followed by ``num_layers`` blocks; returns final-layer states."""
    x = embed(token_ids, mask, params)
    for i in range(config.num_layers):
        x = transformer_block(x, params, i, config.num_heads, config.causal)
    return x


def last_position_pool(states: TokenStates) -> Tensor:
    """State at each sequence's last unmasked position."""
    lengths = np.asarray(states.mask, dtype=bool).sum(axis=1)
    if (lengths == 0).any():
        raise DegenerateMaskError("cannot take the last position of an empty sequence")
    B = states.states.shape[0]
    return states.states[np.arange(B), lengths - 1]


def extract_decoder_feature(
    token_ids: np.ndarray,
    mask: np.ndarray,
    config: EncoderConfig,
    params: dict[str, Tensor],
    mode: str = "last",
) -> np.ndarray:
    """Frozen final-layer features of a causal encoder, shape (B, d_model).

    ``mode='last'`` takes the last unmasked token; ``mode='mean'`` averages
    unmasked tokens. No gradient flows into the encoder.
    """
    from .numerics import no_grad

    if not config.causal:
        raise ConfigError("decoder feature extraction expects attention_mode='causal'")
    with no_grad():
        states = encode_sequence(token_ids, mask, config, params)
        if mode == "last":
            feat = last_position_pool(states)
        elif mode == "mean":
            m = Tensor(np.asarray(mask, dtype=np.float64)[..., None])
            feat = ordered_sum(states.states * m, axis=1) / Tensor(m.data.sum(axis=1))
        else:
            raise ConfigError(f"feature mode must be 'last' or 'mean', got {mode!r}")
    return feat.data.copy()
