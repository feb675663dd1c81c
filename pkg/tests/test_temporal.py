import math

import numpy as np
import pytest

from oracles import attention_loops, conv_loops, dual_scope_loops, group_norm_two_pass
from vinf.errors import ConfigError
from vinf.tensor import max_abs_diff, splitmix_floats, tensor_from_seed
from vinf.temporal import (
    AttentionParams,
    ConvKernel,
    DualScopeConfig,
    GroupNormParams,
    attention_full,
    build_global_index_set,
    build_local_window,
    dual_scope_reference,
    group_norm,
    spatial_stub,
    temporal_conv,
)


def rand(shape, seed, scale=1.0):
    return (splitmix_floats(seed, int(np.prod(shape))).reshape(shape) * scale).astype(np.float32)


def attn_params(c, seed, scale=None):
    s = scale if scale is not None else 1.0 / math.sqrt(c)
    return AttentionParams(*(rand((c, c), seed + j, s) for j in range(4)))


# -- spatial stub ------------------------------------------------------------

def test_stub_is_per_frame():
    v = tensor_from_seed((6, 2, 2, 3), 4)
    perm = [3, 0, 5, 1, 4, 2]
    assert np.array_equal(spatial_stub(v[perm], 9), spatial_stub(v, 9)[perm])
    assert np.array_equal(spatial_stub(v, 9), spatial_stub(v, 9))


def test_stub_forced_identity_coefficients():
    v = tensor_from_seed((2, 1, 1, 3), 1)
    out = spatial_stub(v, 0, coeffs=(np.ones(3), np.zeros(3)))
    assert out[1, 0, 0, 2] == np.float32(math.tanh(float(v[1, 0, 0, 2])))


# -- temporal conv -------------------------------------------------------------

def test_conv_identity_kernel():
    v = tensor_from_seed((5, 2, 2, 3), 2)
    assert np.array_equal(temporal_conv(v, ConvKernel.identity(3)), v)


def test_conv_averaging_boundary():
    c = 2
    w = np.stack([np.eye(c) / 3] * 3).astype(np.float32)
    out = temporal_conv(np.ones((6, 1, 1, c), np.float32), ConvKernel(w, np.zeros(c, np.float32)))
    assert np.allclose(out[1:-1], 1.0, atol=1e-7)
    assert np.allclose(out[[0, -1]], 2.0 / 3.0, atol=1e-7)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_triple_loop(k):
    v = rand((8, 2, 1, 2), 10)
    kern = ConvKernel(rand((k, 2, 2), 20), rand((2,), 30))
    assert max_abs_diff(temporal_conv(v, kern), conv_loops(v, kern.weights, kern.bias)) <= 1e-6


def test_conv_rejects_even_taps():
    with pytest.raises(ConfigError):
        ConvKernel(np.zeros((2, 1, 1), np.float32), np.zeros(1, np.float32))


# -- group norm ----------------------------------------------------------------

def test_group_norm_constant_input():
    p = GroupNormParams(2, np.ones(4, np.float32), np.zeros(4, np.float32))
    assert np.array_equal(group_norm(np.full((3, 2, 2, 4), 0.7, np.float32), p),
                          np.zeros((3, 2, 2, 4), np.float32))


def test_group_norm_zero_gamma():
    beta = np.array([0.1, -0.2, 0.3, 0.4], np.float32)
    p = GroupNormParams(2, np.zeros(4, np.float32), beta)
    out = group_norm(tensor_from_seed((3, 2, 2, 4), 1), p)
    assert np.array_equal(out, np.broadcast_to(beta, out.shape))


def test_group_norm_matches_two_pass():
    v = tensor_from_seed((8, 2, 2, 4), 6)
    gamma, beta = np.ones(4, np.float32), np.zeros(4, np.float32)
    out = group_norm(v, GroupNormParams(2, gamma, beta))
    ref = group_norm_two_pass(v, 2, gamma, beta)
    assert max_abs_diff(out, ref) <= 1e-5
    for g in range(2):
        chunk = out[..., 2 * g:2 * g + 2].astype(np.float64)
        assert abs(chunk.mean()) <= 1e-6
        # eps keeps the variance a hair under one
        assert abs(chunk.var() - 1.0) <= 1e-4


def test_group_norm_groups_must_divide():
    with pytest.raises(ConfigError):
        GroupNormParams(3, np.ones(4, np.float32), np.zeros(4, np.float32))


# -- full attention ------------------------------------------------------------

def test_attention_single_frame():
    v = tensor_from_seed((1, 2, 1, 3), 3)
    p = attn_params(3, 40)
    expect = (p.wo.astype(np.float64) @ p.wv.astype(np.float64) @ v[0, 1, 0].astype(np.float64))
    assert max_abs_diff(attention_full(v, p)[0, 1, 0], expect) <= 1e-6


def test_attention_zero_query_is_uniform():
    v = tensor_from_seed((5, 1, 2, 2), 8)
    p = attn_params(2, 50)
    p = AttentionParams(np.zeros((2, 2), np.float32), p.wk, p.wv, p.wo)
    out = attention_full(v, p).astype(np.float64)
    vals = v.astype(np.float64) @ p.wv.T.astype(np.float64)
    expect = vals.mean(axis=0) @ p.wo.T.astype(np.float64)
    for f in range(5):
        assert max_abs_diff(out[f], expect) <= 1e-6


def test_attention_matches_brute_force():
    v = rand((4, 2, 1, 2), 60)
    p = attn_params(2, 70, scale=1.0)
    out, scores = attention_full(v, p, return_scores=True)
    assert max_abs_diff(out, attention_loops(v, p.wq, p.wk, p.wv, p.wo)) <= 1e-6
    assert scores.shape == (2, 4, 4)
    assert np.allclose(scores.sum(axis=-1), 1.0)


# -- dual-scope attention --------------------------------------------------------

def test_local_window_examples():
    assert build_local_window(16, 64, 16) == list(range(8, 25))
    assert build_local_window(0, 64, 16) == list(range(0, 9))
    assert build_local_window(63, 64, 16) == list(range(55, 64))


def test_global_index_examples():
    assert build_global_index_set(32, 16) == list(range(0, 32, 2))
    assert build_global_index_set(16, 16) == list(range(16))
    assert build_global_index_set(24, 16) == [0, 1, 3, 4, 6, 7, 9, 10, 12, 13, 15, 16, 18, 19, 21, 22]
    with pytest.raises(ConfigError):
        build_global_index_set(8, 16)


def test_dual_scope_degenerates_to_full_attention():
    f = 10
    v = tensor_from_seed((f, 2, 2, 4), 12)
    p = attn_params(4, 80)
    cfg = DualScopeConfig(n_local=2 * (f - 1), n_global=0, bias=0.0)
    assert max_abs_diff(dual_scope_reference(v, 900.0, p, cfg), attention_full(v, p)) <= 1e-6


def test_dual_scope_bias_switches_with_timestep():
    v = tensor_from_seed((32, 2, 2, 4), 13)
    p = attn_params(4, 90)
    cfg = DualScopeConfig()
    assert max_abs_diff(dual_scope_reference(v, 900.0, p, cfg),
                        dual_scope_reference(v, 700.0, p, cfg)) > 0


@pytest.mark.parametrize("t", [700.0, 900.0])
def test_dual_scope_scalar_brute_force(t):
    v = rand((4, 1, 1, 1), 100)
    p = attn_params(1, 110, scale=1.0)
    cfg = DualScopeConfig(n_local=2, n_global=2, bias=1.5)
    ref = dual_scope_loops(v, p.wq, p.wk, p.wv, p.wo, 2, 2, 1.5, t, cfg.t_star)
    assert max_abs_diff(dual_scope_reference(v, t, p, cfg), ref) <= 1e-6


@pytest.mark.parametrize("t", [700.0, 900.0])
def test_dual_scope_brute_force_defaults(t):
    v = tensor_from_seed((20, 1, 2, 3), 14)
    p = attn_params(3, 120)
    cfg = DualScopeConfig(n_local=6, n_global=5)
    ref = dual_scope_loops(v, p.wq, p.wk, p.wv, p.wo, 6, 5, cfg.bias, t, cfg.t_star)
    assert max_abs_diff(dual_scope_reference(v, t, p, cfg), ref) <= 1e-6


def test_dual_scope_config_rules():
    with pytest.raises(ConfigError):
        DualScopeConfig(n_local=3)
    assert DualScopeConfig(bias=2.0, t_star=800.0).logit_bias(801.0) == (0.0, 2.0)
    assert DualScopeConfig(bias=2.0, t_star=800.0).logit_bias(800.0) == (2.0, 0.0)
