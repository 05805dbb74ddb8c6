import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model
from imbtext.encoder import TokenStates, linear
from imbtext.errors import ConfigError, DegenerateMaskError, ShapeError
from imbtext.numerics import Rng, Tensor, dropout, grad_check
from imbtext.pooling import (
    HeadConfig,
    attention_pool,
    cls_pool,
    default_rates,
    head_forward,
    head_trunk,
    hybrid_pool,
    init_head_params,
    mean_pool,
    pool,
    pooled_dim,
)


def states(B=2, L=7, D=4, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-2, 2, (B, L, D)), requires_grad=True, name="h")


def scorer(D=4, seed=1, zero=False):
    r = np.random.default_rng(seed)
    w = Tensor(np.zeros(D) if zero else r.uniform(-1, 1, D), requires_grad=True, name="w")
    b = Tensor(np.array(0.0 if zero else r.uniform(-1, 1)), requires_grad=True, name="b")
    return w, b


def test_cls_pool():
    h = states()
    assert np.array_equal(cls_pool(h).data, h.data[:, 0])
    h2 = Tensor(h.data.copy())
    h2.data[:, 1:] = 99
    assert np.array_equal(cls_pool(h2).data, h.data[:, 0])


def test_mean_pool_cases():
    assert mean_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), np.array([[1, 1]])).data.tolist() == [[2.0, 3.0]]
    out = mean_pool(Tensor([[[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]]]), np.array([[1, 1, 0]]))
    assert out.data.tolist() == [[2.0, 3.0]]


def test_mean_pool_loop_oracle():
    h = states(L=7)
    m = np.array([[1, 1, 0, 1, 1, 1, 0], [1, 0, 0, 0, 0, 0, 0]], dtype=float)
    out = mean_pool(h, m).data
    for b in range(2):
        acc = np.zeros(4)
        for t in range(7):
            acc += m[b, t] * h.data[b, t]
        assert np.allclose(out[b], acc / m[b].sum(), atol=1e-12)


def test_mean_pool_all_masked():
    with pytest.raises(DegenerateMaskError):
        mean_pool(states(), np.zeros((2, 7)))


def test_attention_pool_zero_scorer_is_mean():
    h = states()
    m = np.ones((2, 7))
    m[0, 5:] = 0
    w, b = scorer(zero=True)
    assert np.allclose(attention_pool(h, m, w, b).data, mean_pool(h, m).data, atol=1e-12)


def test_attention_pool_single_position():
    h = states()
    m = np.zeros((2, 7))
    m[:, 3] = 1
    w, b = scorer()
    assert np.allclose(attention_pool(h, m, w, b).data, h.data[:, 3], atol=1e-15)


def test_attention_pool_bad_scorer_shape():
    with pytest.raises(ShapeError):
        attention_pool(states(), np.ones((2, 7)), Tensor(np.zeros(3)), Tensor(np.array(0.0)))


def test_attention_pool_gradients():
    h = states(B=2, L=5)
    m = np.ones((2, 5))
    m[1, 3:] = 0
    w, b = scorer()
    v = Tensor(np.random.default_rng(5).uniform(-1, 1, (2, 4)))
    fn = lambda: (attention_pool(h, m, w, b) * v).sum()
    assert grad_check(fn, {"w": w, "h": h}) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_attention_pool_convex_hull(seed, n_valid):
    h = states(B=1, L=7, seed=seed)
    m = np.zeros((1, 7))
    m[0, :n_valid] = 1
    w, b = scorer(seed=seed + 1)
    out, alpha = attention_pool(h, m, w, b, return_weights=True)
    valid = h.data[0, :n_valid]
    assert (alpha >= 0).all() and abs(alpha.sum() - 1) < 1e-12
    assert (out.data[0] >= valid.min(0) - 1e-12).all() and (out.data[0] <= valid.max(0) + 1e-12).all()


def test_hybrid_zero_scorer_halves_equal():
    h = states()
    w, b = scorer(zero=True)
    mean, attn = hybrid_pool(h, np.ones((2, 7)), w, b).split()
    assert np.allclose(mean, attn, atol=1e-12)


def test_hybrid_dimension():
    assert pooled_dim("hybrid", 64) == 128
    h = Tensor(np.random.default_rng(0).normal(size=(3, 5, 64)))
    w = Tensor(np.zeros(64))
    assert hybrid_pool(h, np.ones((3, 5)), w, Tensor(np.array(0.0))).h_pooled.shape == (3, 128)


def test_hybrid_halves_bitwise():
    h = states()
    m = np.ones((2, 7))
    m[1, 4:] = 0
    w, b = scorer()
    feats = hybrid_pool(h, m, w, b)
    mean, attn = feats.split()
    assert np.array_equal(mean, mean_pool(h, m).data)
    assert np.array_equal(attn, attention_pool(h, m, w, b).data)


@pytest.mark.parametrize("mode", ["cls", "mean", "attn", "hybrid", "last"])
def test_pooling_padding_bit_invariance(mode):
    h = states(L=5)
    m = np.ones((2, 5))
    m[1, 3:] = 0
    w, b = scorer()
    params = {"pool.attn.w": w, "pool.attn.b": b}
    a = pool(TokenStates(h, m), mode, params).h_pooled.data
    junk = np.random.default_rng(9).normal(size=(2, 3, 4))
    h2 = Tensor(np.concatenate([h.data, junk], axis=1))
    m2 = np.concatenate([m, np.zeros((2, 3))], axis=1)
    assert np.array_equal(pool(TokenStates(h2, m2), mode, params).h_pooled.data, a)


def test_unknown_pooling_mode():
    with pytest.raises(ConfigError):
        pooled_dim("max", 8)


# --- head ------------------------------------------------------------------------------


def head_setup(num_paths=5, rates=None, C=3, D=6):
    cfg = HeadConfig(C, D, num_paths, rates if rates is not None else default_rates(num_paths))
    params = init_head_params(2 * D, cfg, Rng(0))
    r = np.random.default_rng(3)
    for p in params.values():
        p.data[...] = r.uniform(-1, 1, p.shape)
    h = Tensor(r.uniform(-2, 2, (4, 2 * D)), requires_grad=True, name="h")
    return cfg, params, h


def test_default_rates():
    assert default_rates(5) == [0.1, 0.15, 0.2, 0.25, 0.3]
    assert HeadConfig(3).dropout_rates == [0.1, 0.15, 0.2, 0.25, 0.3]


def test_rate_count_mismatch():
    cfg, params, h = head_setup()
    cfg.dropout_rates = [0.1, 0.2]
    with pytest.raises(ConfigError):
        head_forward(h, params, cfg, training=True, rng=Rng(0))


def test_eval_head_equals_single_rate_zero_head_bitwise():
    cfg, params, h = head_setup()
    single = HeadConfig(cfg.num_classes, cfg.hidden_dim, 1, [0.0])
    multi = head_forward(h, params, cfg, training=False).data
    plain = head_forward(h, params, single, training=False).data
    trained_single = head_forward(h, params, single, training=True, rng=Rng(0)).data
    assert np.array_equal(multi, plain)
    assert np.array_equal(multi, trained_single)


def test_training_head_replay_oracle():
    cfg, params, h = head_setup()
    out = head_forward(h, params, cfg, training=True, rng=Rng(77)).data
    rng = Rng(77)
    z = head_trunk(h, params)
    paths = [linear(dropout(z, r, rng, True), params["head.out.w"], params["head.out.b"]).data for r in cfg.dropout_rates]
    total = paths[0]
    for p in paths[1:]:
        total = total + p
    assert np.array_equal(out, total * (1.0 / 5))
    assert np.allclose(out, np.mean(paths, axis=0), atol=1e-12)


def test_head_input_dim_check():
    cfg, params, h = head_setup()
    with pytest.raises(ShapeError):
        head_forward(Tensor(np.zeros((1, 5))), params, cfg, training=False)


def test_hybrid_head_gradient_eval():
    cfg, params, _ = head_setup(D=4)
    h = states(L=5)
    w, b = scorer()
    m = np.ones((2, 5))
    m[0, 4] = 0
    v = Tensor(np.random.default_rng(8).uniform(-1, 1, (2, 3)))
    fn = lambda: (head_forward(hybrid_pool(h, m, w, b).h_pooled, params, cfg, training=False) * v).sum()
    assert grad_check(fn, {"h": h, "w": w, **params}) < 1e-4


def test_model_eval_padding_invariance():
    model = small_model()
    ids = np.array([[2, 5, 6, 7], [2, 9, 0, 0]])
    m = (ids != 0).astype(float)
    m[0] = 1
    a = model.predict(ids, m)
    ids2 = np.concatenate([ids, np.zeros((2, 2), dtype=int)], axis=1)
    m2 = np.concatenate([m, np.zeros((2, 2))], axis=1)
    assert np.allclose(model.predict(ids2, m2), a, rtol=0, atol=1e-10)
