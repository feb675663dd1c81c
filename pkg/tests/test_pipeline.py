import math

import numpy as np
import pytest

from vinf.errors import ConfigError, PartitionError
from vinf.pipeline import (
    Block,
    DenoiseConfig,
    Distributed,
    Model,
    ModelConfig,
    build_model,
    denoise,
    eps_theta,
    eps_theta_distributed,
)
from vinf.tensor import DTYPE, max_abs_diff, tensor_from_seed
from vinf.temporal import AttentionParams, ConvKernel, DualScopeConfig, GroupNormParams


def small_model(**kw):
    base = dict(blocks=2, channels=4, taps=3, groups=2,
                dual_scope=DualScopeConfig(n_local=4, n_global=4))
    base.update(kw)
    return build_model(ModelConfig(**base))


def test_weights_deterministic_and_seeded():
    a, b = small_model(), small_model()
    for x, y in zip(a.blocks, b.blocks):
        assert np.array_equal(x.conv.weights, y.conv.weights)
        assert np.array_equal(x.attn.wo, y.attn.wo)
    c = small_model(weight_seed=1)
    assert not np.array_equal(a.blocks[0].conv.weights, c.blocks[0].conv.weights)


def test_parameter_count():
    model = small_model()
    c, k, layers = 4, 3, 2
    assert model.n_params == layers * (2 * c + k * c * c + c + 2 * c + 4 * c * c)


def test_model_config_rules():
    with pytest.raises(ConfigError):
        ModelConfig(taps=4)
    with pytest.raises(ConfigError):
        ModelConfig(channels=6, groups=4)
    with pytest.raises(ConfigError):
        ModelConfig(blocks=0)


def test_closed_form_single_block():
    c = 1
    zeros = np.zeros((c, c), DTYPE)
    block = Block(
        stub=(np.ones(c, DTYPE), np.zeros(c, DTYPE)),
        conv=ConvKernel(np.zeros((3, c, c), DTYPE), np.zeros(c, DTYPE)),
        norm=GroupNormParams(1, np.ones(c, DTYPE), np.zeros(c, DTYPE)),
        attn=AttentionParams(zeros, zeros, zeros, zeros),
    )
    model = Model(ModelConfig(blocks=1, channels=1, groups=1,
                              dual_scope=DualScopeConfig(n_local=2, n_global=2)), [block])
    x = np.array([0.5, -0.25], DTYPE).reshape(2, 1, 1, 1)
    u0, u1 = math.tanh(0.5), math.tanh(-0.25)
    d = (u0 - u1) / 2
    e0 = d / math.sqrt(d * d + 1e-5)
    eps = eps_theta(x, 900.0, model)
    assert eps.ravel().tolist() == pytest.approx([e0, -e0], abs=1e-6)


def test_distributed_single_worker_is_bitwise():
    model = small_model()
    x = tensor_from_seed((16, 2, 2, 4), 3)
    eps, _ = eps_theta_distributed(x, 900.0, model, Distributed(1))
    assert np.array_equal(eps, eps_theta(x, 900.0, model))


def test_mode_equivalence_one_step():
    model = small_model(dual_scope=DualScopeConfig())
    x = tensor_from_seed((32, 2, 2, 4), 3)
    eps, report = eps_theta_distributed(x, 900.0, model, Distributed(4, validating=True))
    assert max_abs_diff(eps, eps_theta(x, 900.0, model)) <= 1e-5
    assert report.calls_by_kind() == {"conv": 8, "groupnorm": 8, "attention": 8}


def test_zero_steps_rejected():
    with pytest.raises(ConfigError):
        DenoiseConfig(0)


def test_single_step_unrolled():
    model = small_model()
    x = tensor_from_seed((8, 2, 2, 4), 5)
    out = denoise(x, model, DenoiseConfig(1))
    manual = (x.astype(np.float64) - 1.0 * eps_theta(x, 1000.0, model)).astype(DTYPE)
    assert np.array_equal(out, manual)


def test_timesteps_descend():
    assert DenoiseConfig(4).timesteps == [1000.0, 750.0, 500.0, 250.0]


def test_bias_policy_counts():
    model = small_model(blocks=1)
    x = tensor_from_seed((8, 1, 1, 4), 6)
    _, report = denoise(x, model, DenoiseConfig(30), Distributed(2))
    for w in report.workers:
        assert w.bias_global_calls == 6
        assert w.bias_local_calls == 24


def test_distributed_denoise_close_to_sequential():
    model = small_model()
    x = tensor_from_seed((16, 2, 2, 4), 7)
    dcfg = DenoiseConfig(5)
    ref = denoise(x, model, dcfg)
    for n in (2, 4):
        out, _ = denoise(x, model, dcfg, Distributed(n, validating=True))
        assert max_abs_diff(out, ref) <= 5e-5


def test_distributed_rejects_bad_plans():
    model = small_model()
    with pytest.raises(PartitionError):
        denoise(tensor_from_seed((10, 1, 1, 4), 0), model, DenoiseConfig(1), Distributed(4))
    with pytest.raises(ConfigError, match="halo"):
        denoise(tensor_from_seed((8, 1, 1, 4), 0), model, DenoiseConfig(1), Distributed(8))


def test_ablation_changes_output():
    model = small_model()
    x = tensor_from_seed((16, 2, 2, 4), 8)
    ref = denoise(x, model, DenoiseConfig(2))
    out, report = denoise(x, model, DenoiseConfig(2), Distributed(4, ablate=frozenset({"conv"})))
    assert max_abs_diff(out, ref) > 1e-3
    assert "conv" not in report.bytes_by_kind()
