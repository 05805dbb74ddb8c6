import math

import numpy as np
import pytest

from imbtext.encoder import (
    EncoderConfig,
    TokenStates,
    embed,
    encode_sequence,
    extract_decoder_feature,
    init_encoder_params,
    self_attention,
    transformer_block,
)
from imbtext.errors import ConfigError, DegenerateMaskError, ShapeError
from imbtext.numerics import Rng, Tensor, grad_check, layer_norm
from imbtext.pooling import mean_pool


def setup(L=5, B=2, layers=2, causal=False, seed=0, vocab=30, d=8, heads=2):
    cfg = EncoderConfig(vocab, d, heads, layers, max_len=16, attention_mode="causal" if causal else "bidirectional")
    params = init_encoder_params(cfg, Rng(seed))
    # move away from the tiny init so differences are visible
    r = np.random.default_rng(seed)
    for p in params.values():
        p.data[...] = r.uniform(-1, 1, p.shape) if not p.name.endswith("gamma") else 1 + 0.2 * r.uniform(-1, 1, p.shape)
    ids = r.integers(3, vocab, (B, L))
    mask = np.ones((B, L))
    return cfg, params, ids, mask


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(10, d_model=10, num_heads=3)
    with pytest.raises(ConfigError):
        EncoderConfig(10, max_len=1)
    assert EncoderConfig(10, d_model=8, num_heads=2).ffn_dim == 32


def test_no_key_bias_parameter():
    params = init_encoder_params(EncoderConfig(10, 8, 2, 1), Rng(0))
    assert "layers.0.attn.k.b" not in params
    assert {"layers.0.attn.q.b", "layers.0.attn.v.b", "layers.0.attn.o.b"} <= set(params)


def test_embed_zero_tables():
    cfg, params, ids, mask = setup()
    params["embed.token"].data[...] = 0
    params["embed.position"].data[...] = 0
    assert not embed(ids, mask, params).states.data.any()


def test_embed_lookup_oracle_and_additivity():
    cfg, params, ids, mask = setup()
    ids[0, :2] = 7
    st = embed(ids, mask, params).states.data
    tok, pos = params["embed.token"].data, params["embed.position"].data
    oracle = np.array([[tok[i] + pos[t] for t, i in enumerate(row)] for row in ids])
    assert np.allclose(st, oracle, atol=1e-12)
    assert np.allclose(st[0, 1] - st[0, 0], pos[1] - pos[0], atol=1e-12)


def test_embed_errors():
    cfg, params, ids, mask = setup()
    with pytest.raises(ShapeError):
        embed(np.full((1, 3), 99), np.ones((1, 3)), params)
    with pytest.raises(ShapeError):
        embed(np.full((1, 17), 3), np.ones((1, 17)), params)


def naive_attention_weights(X, params, prefix, heads):
    L, D = X.shape
    dh = D // heads
    q = X @ params[f"{prefix}.q.w"].data + params[f"{prefix}.q.b"].data
    k = X @ params[f"{prefix}.k.w"].data
    out = np.zeros((heads, L, L))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            s = [sum(q[i, sl][j] * k[u, sl][j] for j in range(dh)) / math.sqrt(dh) for u in range(L)]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            out[h, i] = [x / sum(e) for x in e]
    return out


def test_attention_matches_naive_oracle():
    cfg, params, ids, mask = setup(L=3, B=1)
    x = embed(ids, mask, params)
    _, w = self_attention(x, params, "layers.0.attn", 2, return_weights=True)
    oracle = naive_attention_weights(x.states.data[0], params, "layers.0.attn", 2)
    assert np.allclose(w[0], oracle, atol=1e-10)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)


def test_attention_single_token():
    cfg, params, ids, mask = setup(L=1, B=1)
    x = embed(ids, mask, params)
    out = self_attention(x, params, "layers.0.attn", 2).states.data
    x0 = x.states.data[0, 0]
    v = x0 @ params["layers.0.attn.v.w"].data + params["layers.0.attn.v.b"].data
    o = v @ params["layers.0.attn.o.w"].data + params["layers.0.attn.o.b"].data
    assert np.allclose(out[0, 0], o, atol=1e-12)


def test_causal_weights_upper_triangle_zero():
    cfg, params, ids, mask = setup(L=6, causal=True)
    _, w = self_attention(embed(ids, mask, params), params, "layers.0.attn", 2, causal=True, return_weights=True)
    assert not np.triu(w, k=1).any()


def test_padding_gets_zero_weight():
    cfg, params, ids, mask = setup(L=5)
    mask[1, 3:] = 0
    _, w = self_attention(embed(ids, mask, params), params, "layers.0.attn", 2, return_weights=True)
    assert not w[1, :, :, 3:].any()


def test_degenerate_mask():
    cfg, params, ids, mask = setup()
    mask[0] = 0
    with pytest.raises(DegenerateMaskError):
        encode_sequence(ids, mask, cfg, params)


def test_block_with_zero_weights_is_double_layer_norm():
    cfg, params, ids, mask = setup(layers=1)
    for name, p in params.items():
        if name.startswith("layers.0.") and (".attn." in name or ".ffn." in name):
            p.data[...] = 0
        if name.endswith("gamma"):
            p.data[...] = 1
        if name.endswith("beta"):
            p.data[...] = 0
    x = embed(ids, mask, params)
    out = transformer_block(x, params, 0, 2).states.data
    ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
    expected = layer_norm(layer_norm(x.states, ones, zeros), ones, zeros).data
    assert np.allclose(out, expected, atol=1e-12)
    assert out.shape == x.states.shape


def test_block_gradient():
    cfg, params, ids, mask = setup(layers=1, L=4, B=2)
    mask[1, 3] = 0
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 4, 8)), requires_grad=True, name="x")
    w = Tensor(np.random.default_rng(2).uniform(-1, 1, (2, 4, 8)))
    fn = lambda: (transformer_block(TokenStates(x, mask), params, 0, 2).states * w).sum()
    block = {k: v for k, v in params.items() if k.startswith("layers.0")}
    assert grad_check(fn, {"x": x, **block}) < 1e-6


def test_zero_layers_returns_embeddings():
    cfg, params, ids, mask = setup(layers=0)
    assert np.array_equal(encode_sequence(ids, mask, cfg, params).states.data, embed(ids, mask, params).states.data)


def test_two_layers_compose():
    cfg, params, ids, mask = setup(layers=2)
    x = embed(ids, mask, params)
    manual = transformer_block(transformer_block(x, params, 0, 2), params, 1, 2)
    assert np.array_equal(encode_sequence(ids, mask, cfg, params).states.data, manual.states.data)


def test_pad_token_id_does_not_leak():
    cfg, params, ids, mask = setup(L=6)
    mask[0, 4:] = 0
    a = encode_sequence(ids, mask, cfg, params).states.data
    ids2 = ids.copy()
    ids2[0, 4:] = 9
    b = encode_sequence(ids2, mask, cfg, params).states.data
    assert np.allclose(a[0, :4], b[0, :4], rtol=0, atol=1e-10)


def test_padding_invariance_of_mean_pool():
    cfg, params, ids, mask = setup(L=5)
    a = mean_pool(encode_sequence(ids, mask, cfg, params).states, mask).data
    ids2 = np.concatenate([ids, np.zeros((2, 3), dtype=ids.dtype)], axis=1)
    mask2 = np.concatenate([mask, np.zeros((2, 3))], axis=1)
    b = mean_pool(encode_sequence(ids2, mask2, cfg, params).states, mask2).data
    assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_causal_leakage():
    cfg, params, ids, mask = setup(L=6, causal=True)
    a = encode_sequence(ids, mask, cfg, params).states.data
    ids2 = ids.copy()
    ids2[:, 3] = 4 if ids[0, 3] != 4 else 5
    b = encode_sequence(ids2, mask, cfg, params).states.data
    assert np.allclose(a[:, :3], b[:, :3], rtol=0, atol=1e-10)
    assert not np.allclose(a[:, 3:], b[:, 3:])


def test_decoder_feature_single_position_and_padding():
    cfg, params, ids, mask = setup(L=1, B=1, causal=True)
    f = extract_decoder_feature(ids, mask, cfg, params)
    assert np.array_equal(f, encode_sequence(ids, mask, cfg, params).states.data[:, 0])
    ids2 = np.concatenate([ids, np.zeros((1, 3), dtype=ids.dtype)], axis=1)
    mask2 = np.concatenate([mask, np.zeros((1, 3))], axis=1)
    # BLAS may round a 1-row and a 4-row product differently
    assert np.allclose(extract_decoder_feature(ids2, mask2, cfg, params), f, rtol=0, atol=1e-10)


def test_decoder_feature_requires_causal_and_no_grad():
    cfg, params, ids, mask = setup()
    with pytest.raises(ConfigError):
        extract_decoder_feature(ids, mask, cfg, params)
    cfg, params, ids, mask = setup(causal=True)
    extract_decoder_feature(ids, mask, cfg, params)
    assert all(p.grad is None for p in params.values())


def test_decoder_feature_prefix_sensitive():
    cfg, params, ids, mask = setup(L=5, causal=True)
    a = extract_decoder_feature(ids, mask, cfg, params)
    ids2 = np.concatenate([np.full((2, 1), 7), ids], axis=1)
    b = extract_decoder_feature(ids2, np.ones((2, 6)), cfg, params)
    assert not np.allclose(a, b)


def cos_dist(a, b):
    return 1 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_suffix_perturbation_bias():
    """Last-token causal features move more under a last-token edit than bidirectional means."""
    r = np.random.default_rng(0)
    cfg_b, pb, _, _ = setup(L=10, B=1, causal=False, seed=3)
    cfg_c = EncoderConfig(30, 8, 2, 2, max_len=16, attention_mode="causal")
    d_mean, d_last = [], []
    for _ in range(100):
        ids = r.integers(3, 30, (1, 10))
        ids2 = ids.copy()
        ids2[0, -1] = 3 + (ids[0, -1] - 3 + 1 + r.integers(0, 26)) % 27
        m = np.ones((1, 10))
        ma = mean_pool(encode_sequence(ids, m, cfg_b, pb).states, m).data[0]
        mb = mean_pool(encode_sequence(ids2, m, cfg_b, pb).states, m).data[0]
        d_mean.append(cos_dist(ma, mb))
        d_last.append(cos_dist(extract_decoder_feature(ids, m, cfg_c, pb)[0], extract_decoder_feature(ids2, m, cfg_c, pb)[0]))
    assert np.mean(d_mean) < np.mean(d_last)
