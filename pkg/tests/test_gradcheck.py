import numpy as np
import pytest

from imbtext.gradcheck import GradCheckConfig, build_probe, model_gradcheck
from imbtext.numerics import no_grad
from imbtext.trainer import TrainConfig


def test_zero_layer_model_passes():
    rep = model_gradcheck(GradCheckConfig(train=TrainConfig(num_layers=0)))
    assert rep["passed"], rep["max_rel_error"]


def test_report_lists_every_parameter():
    cfg = GradCheckConfig(train=TrainConfig(num_layers=1, d_model=16, num_heads=2))
    model, _, _ = build_probe(cfg)
    rep = model_gradcheck(cfg)
    assert set(rep["parameters"]) == set(model.trainable())
    assert all(v["probed"] == min(24, v["size"]) for v in rep["parameters"].values())


@pytest.mark.parametrize("pooling", ["cls", "mean", "attn", "last"])
def test_other_pooling_modes(pooling):
    rep = model_gradcheck(GradCheckConfig(train=TrainConfig(num_layers=1, d_model=16, num_heads=2, pooling=pooling)))
    assert rep["passed"], rep["max_rel_error"]


@pytest.mark.parametrize("seed", range(4))
def test_pool_bias_gradient_is_structurally_zero(seed):
    """Softmax ignores a shared score offset, so d loss / d b is exactly zero.

    The central difference then only sees last-bit rounding of the loss.
    """
    cfg = GradCheckConfig(train=TrainConfig(num_layers=1, d_model=16, num_heads=2), probe_seed=seed)
    model, loss, _ = build_probe(cfg)
    for p in model.params.values():
        p.grad = None
    value = loss()
    value.backward()
    b = model.params["pool.attn.b"]
    assert abs(float(b.grad)) <= 1e-15
    orig = float(b.data)
    with no_grad():
        b.data[...] = orig + cfg.eps
        up = loss().item()
        b.data[...] = orig - cfg.eps
        down = loss().item()
    b.data[...] = orig
    ulp = np.spacing(abs(value.item()))
    assert abs(up - down) <= 4 * ulp
