"""ssm-kernel: recurrence oracle, scan equivalence, block and adapter checks."""

from __future__ import annotations

import math

import numpy as np
import pytest

from emshape.ssm import (
    AdapterConfig,
    Discretization,
    ScanNumericError,
    SsmParams,
    TokenSequence,
    adapter_forward,
    causal_depthwise_conv,
    discretize,
    layer_norm,
    load_ssm_params,
    mamba_block_forward,
    random_block_params,
    random_ssm_params,
    save_ssm_params,
    scan_parallel,
    scan_sequential,
    selective_inputs,
    selective_scan_parallel,
    selective_scan_sequential,
    zero_block_params,
    _prefix_scan,
)


def unrolled_oracle(a, d, delta, b_seq, c_seq, x, method=Discretization.ZOH):
    """Scalar-math re-statement of the recurrence, kept independent of the
    library's vectorized evaluation."""
    length, n_ch = x.shape
    n_state = a.shape[1]
    y = np.zeros((length, n_ch))
    for c in range(n_ch):
        h = [0.0] * n_state
        for t in range(length):
            out = 0.0
            for n in range(n_state):
                abar = math.exp(delta[t, c] * a[c, n])
                if method is Discretization.ZOH:
                    bbar = (abar - 1.0) / a[c, n] * b_seq[t, n]
                else:
                    bbar = delta[t, c] * b_seq[t, n]
                h[n] = abar * h[n] + bbar * x[t, c]
                out += c_seq[t, n] * h[n]
            y[t, c] = out + d[c] * x[t, c]
    return y


def random_scan_inputs(rng, length, n_ch, n_state):
    a = -rng.uniform(0.2, 1.5, size=(n_ch, n_state))
    d = rng.normal(size=n_ch)
    delta = rng.uniform(1e-3, 0.2, size=(length, n_ch))
    b_seq = rng.normal(size=(length, n_state))
    c_seq = rng.normal(size=(length, n_state))
    x = rng.normal(size=(length, n_ch))
    return a, d, delta, b_seq, c_seq, x


def rel_diff(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.mark.parametrize("method", [Discretization.ZOH, Discretization.EULER])
def test_sequential_matches_unrolled_oracle(method):
    rng = np.random.default_rng(0)
    a, d, delta, b_seq, c_seq, x = random_scan_inputs(rng, 64, 3, 4)
    got = selective_scan_sequential(a, d, delta, b_seq, c_seq, x, method)
    ref = unrolled_oracle(a, d, delta, b_seq, c_seq, x, method)
    assert rel_diff(got, ref) <= 1e-5


def test_single_token_scan():
    # L=1: y_1 = <C_1, Bbar * x_1> + D * x_1, no history
    rng = np.random.default_rng(1)
    a, d, delta, b_seq, c_seq, x = random_scan_inputs(rng, 1, 4, 6)
    got = selective_scan_sequential(a, d, delta, b_seq, c_seq, x)
    _, bbar = discretize(a, delta, b_seq, Discretization.ZOH)
    expect = (bbar[0] * x[0][:, None]) @ c_seq[0] + d * x[0]
    assert np.allclose(got[0], expect, rtol=1e-12)
    par = selective_scan_parallel(a, d, delta, b_seq, c_seq, x)
    assert np.array_equal(got, par)


def test_zoh_zero_delta_is_skip_identity():
    rng = np.random.default_rng(2)
    a, d, _, b_seq, c_seq, x = random_scan_inputs(rng, 16, 3, 5)
    delta = np.zeros((16, 3))
    for scan in (selective_scan_sequential, selective_scan_parallel):
        y = scan(a, d, delta, b_seq, c_seq, x, Discretization.ZOH)
        assert np.array_equal(y, d * x)


def test_parallel_matches_sequential_random_lengths():
    rng = np.random.default_rng(3)
    for length in [1, 2, 3, 5, 16, 63, 64, 65, 100, 257]:
        n_ch = int(rng.integers(1, 9))
        n_state = int(rng.integers(1, 17))
        a, d, delta, b_seq, c_seq, x = random_scan_inputs(rng, length, n_ch, n_state)
        seq = selective_scan_sequential(a, d, delta, b_seq, c_seq, x)
        par = selective_scan_parallel(a, d, delta, b_seq, c_seq, x)
        assert rel_diff(par, seq) <= 1e-5


def test_param_driven_scans_agree():
    rng = np.random.default_rng(4)
    for method in Discretization:
        params = random_ssm_params(5, 7, rng, discretization=method)
        tokens = TokenSequence(rng.normal(size=(40, 5)))
        seq = scan_sequential(params, tokens).features
        par = scan_parallel(params, tokens).features
        assert rel_diff(par, seq) <= 1e-5


def test_prefix_scan_degenerates_to_prefix_sums():
    # with all multipliers exactly 1, the operator is plain addition;
    # integer-valued inputs make every association exact
    rng = np.random.default_rng(5)
    a = np.ones((37, 2, 3))
    b = rng.integers(-8, 9, size=(37, 2, 3)).astype(np.float64)
    h = _prefix_scan(a, b)
    assert np.array_equal(h, np.cumsum(b, axis=0))


def test_causality_both_scans():
    rng = np.random.default_rng(6)
    a, d, delta_map_unused, b_seq, c_seq, x = random_scan_inputs(rng, 48, 3, 4)
    params = random_ssm_params(3, 4, rng)
    tokens = TokenSequence(rng.normal(size=(48, 3)))
    bumped = tokens.features.copy()
    t_cut = 29
    bumped[t_cut] += 2.5
    for scan in (scan_sequential, scan_parallel):
        y0 = scan(params, tokens).features
        y1 = scan(params, TokenSequence(bumped)).features
        assert np.array_equal(y0[:t_cut], y1[:t_cut])
        assert not np.allclose(y0[t_cut:], y1[t_cut:])


def test_linearity_with_frozen_selectivity():
    rng = np.random.default_rng(7)
    a, d, delta, b_seq, c_seq, x1 = random_scan_inputs(rng, 33, 4, 5)
    x2 = rng.normal(size=x1.shape)
    alpha, beta = 1.7, -0.4
    lhs = selective_scan_sequential(a, d, delta, b_seq, c_seq, alpha * x1 + beta * x2)
    rhs = alpha * selective_scan_sequential(a, d, delta, b_seq, c_seq, x1) + \
        beta * selective_scan_sequential(a, d, delta, b_seq, c_seq, x2)
    assert rel_diff(lhs, rhs) <= 1e-5


def test_stability_long_sequence():
    # bounded inputs and strictly negative decay: geometric bound on |h|
    rng = np.random.default_rng(8)
    n_ch, n_state, length = 2, 4, 100_000
    a = -rng.uniform(0.5, 1.0, size=(n_ch, n_state))
    d = rng.normal(size=n_ch)
    delta = rng.uniform(0.05, 0.2, size=(length, n_ch))
    b_seq = rng.normal(size=(length, n_state))
    c_seq = rng.normal(size=(length, n_state))
    x = rng.uniform(-1.0, 1.0, size=(length, n_ch))

    abar, bbar = discretize(a, delta, b_seq, Discretization.ZOH)
    h = _prefix_scan(abar, bbar * x[:, :, None])
    assert np.all(np.isfinite(h))
    a_max = float(abar.max())
    assert a_max < 1.0
    b_max = float(np.abs(bbar * x[:, :, None]).max())
    assert np.abs(h).max() <= b_max / (1.0 - a_max) + 1e-9

    y = selective_scan_parallel(a, d, delta, b_seq, c_seq, x)
    assert np.all(np.isfinite(y))


def test_non_finite_reports_token_index():
    rng = np.random.default_rng(9)
    a, d, delta, b_seq, c_seq, x = random_scan_inputs(rng, 8, 2, 3)
    x[5] = 1e308
    d[:] = 1e308  # d*x overflows at token 5
    with pytest.raises(ScanNumericError) as err:
        selective_scan_sequential(a, d, delta, b_seq, c_seq, x)
    assert err.value.token_index == 5
    with pytest.raises(ScanNumericError) as err:
        selective_scan_parallel(a, d, delta, b_seq, c_seq, x)
    assert err.value.token_index == 5


def test_ssm_params_validation():
    rng = np.random.default_rng(10)
    good = random_ssm_params(3, 4, rng)
    with pytest.raises(ValueError, match="negative"):
        SsmParams(
            a=np.abs(good.a),
            d=good.d,
            dt_weight=good.dt_weight,
            dt_bias=good.dt_bias,
            b_weight=good.b_weight,
            c_weight=good.c_weight,
        )
    with pytest.raises(ValueError):
        SsmParams(
            a=good.a,
            d=np.zeros(7),
            dt_weight=good.dt_weight,
            dt_bias=good.dt_bias,
            b_weight=good.b_weight,
            c_weight=good.c_weight,
        )


def test_selective_inputs_positive_delta():
    rng = np.random.default_rng(11)
    params = random_ssm_params(4, 4, rng)
    delta, _, _ = selective_inputs(params, rng.normal(size=(30, 4)) * 5)
    assert np.all(delta > 0)


def test_token_sequence_origin_validation():
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((5, 2)), origin_shape=(2, 2, 2))
    ok = TokenSequence(np.zeros((8, 2)), origin_shape=(2, 2, 2))
    assert ok.length == 8


def test_adapter_config_validation():
    with pytest.raises(ValueError):
        AdapterConfig(norm_eps=0.0)
    with pytest.raises(ValueError):
        AdapterConfig(expand=0)
    with pytest.raises(ValueError):
        AdapterConfig(conv_width=0)


def test_causal_conv_is_causal():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(3, 4))
    bias = rng.normal(size=3)
    u = rng.normal(size=(20, 3))
    bumped = u.copy()
    bumped[10] += 1.0
    y0 = causal_depthwise_conv(u, w, bias)
    y1 = causal_depthwise_conv(bumped, w, bias)
    assert np.array_equal(y0[:10], y1[:10])
    assert not np.array_equal(y0[10:], y1[10:])


def test_block_shape_contract_and_zero_case():
    rng = np.random.default_rng(13)
    cfg = AdapterConfig()
    params = random_block_params(cfg, channels=3, state_dim=4, rng=rng)
    tokens = TokenSequence(rng.normal(size=(17, 3)))
    out = mamba_block_forward(cfg, params, tokens)
    assert out.features.shape == (17, 3)

    zeros = TokenSequence(np.zeros((17, 3)))
    out0 = mamba_block_forward(cfg, params, zeros)
    assert np.array_equal(out0.features, np.zeros((17, 3)))


def block_scalar_output(cfg, params, x_flat, shape, probe):
    tokens = TokenSequence(x_flat.reshape(shape))
    out = mamba_block_forward(cfg, params, tokens).features
    return np.sum(out * probe)


def test_block_gradient_central_diff_vs_complex_step():
    rng = np.random.default_rng(14)
    cfg = AdapterConfig()
    params = random_block_params(cfg, channels=2, state_dim=3, rng=rng)
    shape = (9, 2)
    x = rng.normal(size=shape)
    probe = rng.normal(size=shape)
    idx = 7
    flat = x.ravel().copy()

    h = 1e-6
    plus, minus = flat.copy(), flat.copy()
    plus[idx] += h
    minus[idx] -= h
    central = (
        block_scalar_output(cfg, params, plus, shape, probe)
        - block_scalar_output(cfg, params, minus, shape, probe)
    ) / (2 * h)

    hc = 1e-20
    zflat = flat.astype(np.complex128)
    zflat[idx] += 1j * hc
    cs = np.imag(block_scalar_output(cfg, params, zflat, shape, probe)) / hc

    assert abs(central - cs) / max(abs(cs), 1e-12) <= 1e-3


def test_layer_norm_statistics():
    rng = np.random.default_rng(15)
    x = rng.normal(3.0, 2.0, size=(50, 16))
    eps = 1e-5
    normed = layer_norm(x, eps)
    assert np.allclose(normed.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(normed.var(axis=1), 1.0, atol=1e-3)


def test_adapter_zero_params_is_identity():
    rng = np.random.default_rng(16)
    cfg = AdapterConfig()
    params = zero_block_params(cfg, channels=3, state_dim=4)
    tokens = TokenSequence(rng.normal(size=(2 * 3 * 4, 3)), origin_shape=(2, 3, 4))
    out = adapter_forward(cfg, params, tokens)
    assert np.array_equal(out.features, tokens.features)
    assert out.origin_shape == (2, 3, 4)


def test_adapter_requires_origin_shape():
    rng = np.random.default_rng(17)
    cfg = AdapterConfig()
    params = random_block_params(cfg, channels=3, state_dim=4, rng=rng)
    with pytest.raises(ValueError, match="origin"):
        adapter_forward(cfg, params, TokenSequence(rng.normal(size=(8, 3))))


def test_adapter_preserves_token_count():
    rng = np.random.default_rng(18)
    cfg = AdapterConfig(expand=2, conv_width=4)
    params = random_block_params(cfg, channels=4, state_dim=4, rng=rng)
    tokens = TokenSequence(rng.normal(size=(3 * 4 * 5, 4)), origin_shape=(3, 4, 5))
    out = adapter_forward(cfg, params, tokens)
    assert out.features.shape == tokens.features.shape


def test_ssm_params_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    params = random_ssm_params(3, 5, rng, discretization=Discretization.EULER)
    save_ssm_params(params, tmp_path / "bundle")
    back = load_ssm_params(tmp_path / "bundle")
    assert back.discretization is Discretization.EULER
    for name in ("a", "d", "dt_weight", "dt_bias", "b_weight", "c_weight"):
        assert np.array_equal(getattr(back, name), getattr(params, name))
