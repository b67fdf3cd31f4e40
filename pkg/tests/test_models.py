import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendcast import autodiff as ad
from trendcast import models as tm
from trendcast.data import Window
from gradcheck import assert_grads_match


def rand_window(rng, channels=3, t_in=6, t_out=2):
    return Window(inputs=rng.standard_normal((channels, t_in)),
                  targets=rng.standard_normal(t_out), origin_index=0)


def zero_lstm(hidden, input_dim):
    fan = hidden + input_dim
    zeros = lambda s: ad.Tensor(np.zeros(s), requires_grad=True)
    return tm.LstmParams(w_f=zeros((hidden, fan)), w_i=zeros((hidden, fan)),
                         w_o=zeros((hidden, fan)), w_s=zeros((hidden, fan)),
                         b_f=zeros(hidden), b_i=zeros(hidden),
                         b_o=zeros(hidden), b_s=zeros(hidden))


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

def test_lstm_all_zero_inputs_and_params_give_zero_state():
    h, s = tm.lstm_step(np.zeros(2), np.zeros(3), np.zeros(3), zero_lstm(3, 2))
    np.testing.assert_array_equal(h.values, np.zeros(3))
    np.testing.assert_array_equal(s.values, np.zeros(3))


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_lstm_hidden_state_bounded_by_one(seed):
    rng = np.random.default_rng(seed)
    params = tm.init_lstm_params(int(seed) % 1000, "t", 4, 3)
    h, _ = tm.lstm_step(rng.uniform(-50, 50, 3), rng.uniform(-1, 1, 4),
                        rng.uniform(-5, 5, 4), params)
    assert np.max(np.abs(h.values)) <= 1.0


def test_lstm_step_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = tm.init_lstm_params(7, "t", 3, 2)
    leaves = list(tm.named_parameters(params).values())
    x = rng.standard_normal(2)
    h0 = rng.standard_normal(3)
    s0 = rng.standard_normal(3)
    target = rng.standard_normal(3)

    def loss_fn():
        h, s = tm.lstm_step(x, h0, s0, params)
        return ad.mse_loss(ad.add(h, s), target)

    assert_grads_match(loss_fn, leaves, tol=1e-4)


def test_lstm_dimension_mismatch():
    with pytest.raises(ad.ShapeMismatchError):
        tm.lstm_step(np.zeros(5), np.zeros(3), np.zeros(3), zero_lstm(3, 2))


# ---------------------------------------------------------------------------
# input attention
# ---------------------------------------------------------------------------

def test_input_attention_identical_drivers_get_uniform_weights():
    rng = np.random.default_rng(1)
    params = tm.init_darnn_params(3, n_channels=5, t_in=6, t_out=1, m=4, p=4)
    series = rng.standard_normal(6)
    x = np.tile(series, (4, 1))
    alpha = tm.darnn_input_attention(params, x, rng.standard_normal(4),
                                     rng.standard_normal(4))
    np.testing.assert_allclose(alpha, 0.25, atol=1e-12)


def test_input_attention_single_driver_weight_is_one():
    rng = np.random.default_rng(2)
    params = tm.init_darnn_params(3, n_channels=2, t_in=5, t_out=1, m=3, p=3)
    alpha = tm.darnn_input_attention(params, rng.standard_normal((1, 5)),
                                     np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(alpha, [1.0])


def test_input_attention_matches_hand_evaluation():
    rng = np.random.default_rng(3)
    t_in, m, n = 4, 2, 2
    params = tm.init_darnn_params(9, n_channels=n + 1, t_in=t_in, t_out=1, m=m, p=m)
    x = rng.standard_normal((n, t_in))
    h = rng.standard_normal(m)
    s = rng.standard_normal(m)
    alpha = tm.darnn_input_attention(params, x, h, s)

    v_e = params.v_e.values[0]
    w_e = params.w_e.values
    u_e = params.u_e.values
    scores = np.array([v_e @ np.tanh(w_e @ np.concatenate([h, s]) + u_e @ x[k])
                       for k in range(n)])
    expect = np.exp(scores - scores.max())
    expect /= expect.sum()
    np.testing.assert_allclose(alpha, expect, atol=1e-10)


# ---------------------------------------------------------------------------
# temporal attention
# ---------------------------------------------------------------------------

def test_temporal_attention_identical_states_give_that_state_back():
    rng = np.random.default_rng(4)
    m = 3
    params = tm.init_darnn_params(5, n_channels=3, t_in=6, t_out=1, m=m, p=m)
    h = rng.standard_normal(m)
    states = np.tile(h, (6, 1))
    beta, context = tm.darnn_temporal_attention(params, states, rng.standard_normal(m),
                                                rng.standard_normal(m))
    assert beta.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(context, h, atol=1e-12)


def test_temporal_attention_single_state():
    rng = np.random.default_rng(5)
    params = tm.init_darnn_params(5, n_channels=3, t_in=1, t_out=1, m=3, p=3)
    h = rng.standard_normal((1, 3))
    beta, context = tm.darnn_temporal_attention(params, h, np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(beta, [1.0])
    np.testing.assert_allclose(context, h[0], atol=1e-15)


def test_temporal_attention_matches_hand_evaluation():
    rng = np.random.default_rng(6)
    m = p = 2
    params = tm.init_darnn_params(11, n_channels=3, t_in=2, t_out=1, m=m, p=p)
    states = rng.standard_normal((2, m))
    d = rng.standard_normal(p)
    s = rng.standard_normal(p)
    beta, context = tm.darnn_temporal_attention(params, states, d, s)

    v_d = params.v_d.values[0]
    w_d = params.w_d.values
    u_d = params.u_d.values
    scores = np.array([v_d @ np.tanh(w_d @ np.concatenate([d, s]) + u_d @ states[i])
                       for i in range(2)])
    expect = np.exp(scores - scores.max())
    expect /= expect.sum()
    np.testing.assert_allclose(beta, expect, atol=1e-10)
    np.testing.assert_allclose(context, expect @ states, atol=1e-10)


# ---------------------------------------------------------------------------
# DA-RNN forward
# ---------------------------------------------------------------------------

def test_darnn_output_length_is_t_out():
    rng = np.random.default_rng(7)
    params = tm.init_darnn_params(1, n_channels=3, t_in=6, t_out=4, m=3, p=3)
    out = tm.darnn_forward(rand_window(rng, 3, 6, 4), params)
    assert out.shape == (4,)
    assert np.all(np.isfinite(out))


def test_darnn_driver_permutation_symmetry():
    rng = np.random.default_rng(8)
    params = tm.init_darnn_params(13, n_channels=4, t_in=5, t_out=2, m=3, p=3)
    w = rand_window(rng, 4, 5, 2)
    out = tm.darnn_forward(w, params)

    perm = [2, 0, 1]  # permutation of the three driver channels
    permuted_inputs = w.inputs.copy()
    permuted_inputs[1:] = w.inputs[1:][perm]
    w_perm = Window(inputs=permuted_inputs, targets=w.targets, origin_index=0)
    params_perm = copy.deepcopy(params)
    m = params.m
    for gate in ("w_f", "w_i", "w_o", "w_s"):
        mat = getattr(params_perm.encoder, gate).values
        mat[:, m:] = mat[:, m:][:, perm]
    out_perm = tm.darnn_forward(w_perm, params_perm)
    np.testing.assert_allclose(out_perm, out, atol=1e-10)


def test_darnn_single_driver_attention_is_identity_weighting():
    rng = np.random.default_rng(9)
    params = tm.init_darnn_params(17, n_channels=2, t_in=5, t_out=2, m=3, p=3)
    collect = {}
    tm.darnn_forward(rand_window(rng, 2, 5, 2), params, collect=collect)
    for alpha in collect["input_attention"]:
        np.testing.assert_array_equal(alpha, np.ones_like(alpha))


def test_darnn_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    params = tm.init_darnn_params(19, n_channels=3, t_in=4, t_out=2, m=3, p=3)
    leaves = list(tm.named_parameters(params).values())
    w = rand_window(rng, 3, 4, 2)

    def loss_fn():
        return ad.mse_loss(tm.darnn_forward_batch(w.inputs[None], params),
                           w.targets.reshape(-1, 1))

    assert_grads_match(loss_fn, leaves, tol=1e-4)


def test_darnn_shape_mismatch():
    rng = np.random.default_rng(11)
    params = tm.init_darnn_params(1, n_channels=3, t_in=6, t_out=2, m=3, p=3)
    with pytest.raises(ad.ShapeMismatchError):
        tm.darnn_forward(rand_window(rng, 4, 6, 2), params)
    with pytest.raises(ad.ShapeMismatchError):
        tm.darnn_forward(rand_window(rng, 3, 7, 2), params)


# ---------------------------------------------------------------------------
# DSANet forward
# ---------------------------------------------------------------------------

def test_dsanet_attention_rows_sum_to_one():
    rng = np.random.default_rng(12)
    params = tm.init_dsanet_params(3, n_channels=4, t_in=8, t_out=2,
                                   n_filters=4, local_kernel=3, n_head=2)
    collect = {}
    tm.dsanet_forward(rand_window(rng, 4, 8, 2), params, collect=collect)
    assert collect["self_attention"]
    for weights in collect["self_attention"]:
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(weights >= 0)


def test_dsanet_zero_head_reduces_to_ar_branch():
    rng = np.random.default_rng(13)
    params = tm.init_dsanet_params(5, n_channels=3, t_in=8, t_out=3,
                                   n_filters=4, local_kernel=3, n_head=2)
    params.w_head.values[...] = 0.0
    params.b_head.values[...] = 0.0
    w = rand_window(rng, 3, 8, 3)
    out = tm.dsanet_forward(w, params)
    np.testing.assert_array_equal(out, tm.dsanet_ar_output(w.inputs, params))


def test_dsanet_gradients_match_finite_differences():
    rng = np.random.default_rng(14)
    params = tm.init_dsanet_params(7, n_channels=3, t_in=6, t_out=2,
                                   n_filters=4, local_kernel=3, n_head=2)
    leaves = list(tm.named_parameters(params).values())
    w = rand_window(rng, 3, 6, 2)

    def loss_fn():
        return ad.mse_loss(tm.dsanet_forward_window(w.inputs, params),
                           w.targets.reshape(-1, 1))

    assert_grads_match(loss_fn, leaves, tol=1e-4)


def test_dsanet_rejects_local_kernel_not_shorter_than_window():
    with pytest.raises(ValueError):
        tm.init_dsanet_params(1, n_channels=3, t_in=6, t_out=2,
                              n_filters=4, local_kernel=6, n_head=2)


# ---------------------------------------------------------------------------
# FCN forward
# ---------------------------------------------------------------------------

def test_fcn_conv_chain_lengths_for_paper_window():
    assert tm.fcn_output_lengths(64) == [58, 54, 52]


def test_fcn_zero_weights_output_equals_head_bias():
    rng = np.random.default_rng(15)
    params = tm.init_fcn_params(1, t_in=16, t_out=3, channels=(0,), filters=4)
    for layer in params.convs:
        layer.w.values[...] = 0.0
        layer.b.values[...] = 0.0
    params.w_head.values[...] = 0.0
    w = rand_window(rng, 1, 16, 3)
    np.testing.assert_array_equal(tm.fcn_forward(w, params), params.b_head.values)


def test_fcn_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    params = tm.init_fcn_params(3, t_in=16, t_out=2, channels=(0, 1), filters=3)
    leaves = list(tm.named_parameters(params).values())
    w = rand_window(rng, 2, 16, 2)

    def loss_fn():
        return ad.mse_loss(tm.fcn_forward_window(w.inputs, params),
                           w.targets.reshape(-1, 1))

    assert_grads_match(loss_fn, leaves, tol=1e-4)


def test_fcn_rejects_window_shorter_than_kernel_chain():
    with pytest.raises(ValueError, match="at least 13"):
        tm.init_fcn_params(1, t_in=12, t_out=2)
    tm.init_fcn_params(1, t_in=13, t_out=2)  # boundary is fine


# ---------------------------------------------------------------------------
# AR(p)/MA(q)
# ---------------------------------------------------------------------------

def ar_series(coefs, n, seed, intercept=0.0, noise=1.0):
    rng = np.random.default_rng(seed)
    p = len(coefs)
    y = np.zeros(n)
    e = rng.normal(0.0, noise, n)
    for t in range(p, n):
        y[t] = intercept + sum(c * y[t - i - 1] for i, c in enumerate(coefs)) + e[t]
    return y


def test_arima_recovers_ar1_coefficient():
    from oracles import ar_yule_walker
    y = ar_series([0.8], 10_000, seed=17)
    model = tm.arima_fit(y, p=1)
    assert 0.75 <= model.ar_coefs[0] <= 0.85
    # cross-check against an independent estimator
    yw = ar_yule_walker(y, 1)
    assert abs(model.ar_coefs[0] - yw[0]) < 0.02


def test_arima_recovers_ar2_coefficients():
    y = ar_series([0.5, -0.3], 10_000, seed=18)
    model = tm.arima_fit(y, p=2)
    assert abs(model.ar_coefs[0] - 0.5) <= 0.05
    assert abs(model.ar_coefs[1] + 0.3) <= 0.05


def test_arima_constant_series_forecasts_the_constant():
    y = np.full(200, 7.25)
    model = tm.arima_fit(y, p=1)
    assert model.ar_coefs[0] == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(tm.arima_forecast(model, y[-5:], 4), 7.25, atol=1e-8)


def test_arima_white_noise_coefficient_is_small():
    y = np.random.default_rng(19).standard_normal(10_000)
    model = tm.arima_fit(y, p=1)
    assert abs(model.ar_coefs[0]) <= 0.05


def test_arima_forecast_hand_cases():
    const = tm.ArimaModel(p=1, q=0, intercept=5.0, ar_coefs=(0.0,), ma_coefs=(),
                          resid_variance=1.0)
    np.testing.assert_allclose(tm.arima_forecast(const, np.array([3.0]), 4), 5.0)
    walk = tm.ArimaModel(p=1, q=0, intercept=0.0, ar_coefs=(1.0,), ma_coefs=(),
                         resid_variance=1.0)
    np.testing.assert_allclose(tm.arima_forecast(walk, np.array([2.0, 9.0]), 3), 9.0)
    half = tm.ArimaModel(p=1, q=0, intercept=0.0, ar_coefs=(0.5,), ma_coefs=(),
                         resid_variance=1.0)
    np.testing.assert_allclose(tm.arima_forecast(half, np.array([8.0]), 3), [4.0, 2.0, 1.0])


def test_arima_affine_shift_equivariance():
    y = ar_series([0.6], 5_000, seed=20)
    base = tm.arima_fit(y, p=1)
    shifted = tm.arima_fit(y + 11.0, p=1)
    f_base = tm.arima_forecast(base, y[-3:], 5)
    f_shift = tm.arima_forecast(shifted, y[-3:] + 11.0, 5)
    np.testing.assert_allclose(f_shift, f_base + 11.0, atol=1e-6)


def test_arima_ma_estimation_recovers_signs():
    # y_t = 0.6 y_{t-1} + e_t - 0.4 e_{t-1} in the fitted convention
    rng = np.random.default_rng(21)
    n = 20_000
    e = rng.standard_normal(n)
    y = np.zeros(n)
    for t in range(1, n):
        y[t] = 0.6 * y[t - 1] + e[t] - 0.4 * e[t - 1]
    model = tm.arima_fit(y, p=1, q=1)
    assert abs(model.ar_coefs[0] - 0.6) < 0.1
    assert abs(model.ma_coefs[0] - 0.4) < 0.1


def test_arima_errors():
    with pytest.raises(ValueError, match="too short"):
        tm.arima_fit(np.zeros(15), p=1)
    with pytest.raises(ValueError):
        tm.arima_forecast(tm.ArimaModel(2, 0, 0.0, (0.1, 0.1), (), 1.0),
                          np.array([1.0]), 2)


# ---------------------------------------------------------------------------
# lookahead
# ---------------------------------------------------------------------------

def test_lookahead_increasing_prices_always_long():
    prices = np.arange(20.0)
    pos = tm.lookahead_predict(prices, horizon=3)
    np.testing.assert_array_equal(pos[:-3], 1)
    np.testing.assert_array_equal(pos[-3:], 0)


def test_lookahead_constant_prices_never_trade():
    np.testing.assert_array_equal(tm.lookahead_predict(np.full(10, 5.0), 2), 0)


def test_lookahead_metrics_equal_persistence_at_lag():
    rng = np.random.default_rng(22)
    prices = np.cumsum(rng.standard_normal(300)) + 100.0
    actual, predicted = tm.lookahead_prediction_pairs(prices, horizon=5)
    lookahead_rmse = np.sqrt(np.mean((actual - predicted) ** 2))
    persistence_rmse = np.sqrt(np.mean((prices[5:] - prices[:-5]) ** 2))
    assert lookahead_rmse == persistence_rmse


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def synth_windows(rng, count, channels=2, t_in=16, t_out=2):
    windows = []
    for i in range(count):
        base = rng.uniform(-1, 1)
        slope = rng.uniform(-0.1, 0.1)
        t = np.arange(t_in + t_out, dtype=float)
        clean = base + slope * t
        inputs = np.vstack([clean[:t_in] + 0.01 * rng.standard_normal(t_in)
                            for _ in range(channels)])
        windows.append(Window(inputs=inputs, targets=clean[t_in:], origin_index=i))
    return windows


@pytest.mark.parametrize("family,hyper", [
    ("fcn", {"filters": 4, "channels": (0,)}),
    ("darnn", {"m": 4, "p": 4}),
    ("dsanet", {"n_filters": 4, "local_kernel": 3, "n_head": 2}),
])
def test_training_reduces_loss(family, hyper):
    rng = np.random.default_rng(23)
    windows = synth_windows(rng, 50)
    fc = tm.train(family, windows, tm.TrainConfig(epochs=8, batch_size=16, lr=5e-3, seed=1),
                  hyper=hyper)
    assert fc.loss_curve[-1] < fc.loss_curve[0]
    pred = fc.predict(windows[0])
    assert pred.shape == (2,)


def test_training_is_deterministic_given_seed():
    rng = np.random.default_rng(24)
    windows = synth_windows(rng, 30)
    cfg = tm.TrainConfig(epochs=4, batch_size=8, lr=1e-3, seed=9)
    a = tm.train("fcn", windows, cfg, hyper={"filters": 4})
    b = tm.train("fcn", windows, cfg, hyper={"filters": 4})
    assert a.loss_curve == b.loss_curve
    np.testing.assert_array_equal(a.predict(windows[0]), b.predict(windows[0]))


def test_training_on_clean_linear_target_reaches_low_rmse():
    rng = np.random.default_rng(25)
    t = np.arange(120, dtype=float)
    series = 0.02 * t - 1.0  # affine, scaled units
    windows = []
    for o in range(120 - 18):
        windows.append(Window(inputs=series[o:o + 16][None, :],
                              targets=series[o + 16:o + 18], origin_index=o))
    fc = tm.train("fcn", windows, tm.TrainConfig(epochs=200, batch_size=32, lr=3e-3, seed=2),
                  hyper={"filters": 4})
    preds = np.array([fc.predict(w) for w in windows])
    targets = np.array([w.targets for w in windows])
    rmse = np.sqrt(np.mean((preds - targets) ** 2))
    assert rmse <= 0.05


def test_training_divergence_raises_named_error():
    rng = np.random.default_rng(26)
    windows = synth_windows(rng, 20)
    with pytest.raises(tm.TrainingDivergedError):
        tm.train("fcn", windows, tm.TrainConfig(epochs=200, batch_size=20, lr=1e80, seed=3),
                 hyper={"filters": 4})


def test_shared_parameters_identical_across_channel_counts():
    base = tm.init_darnn_params(31, n_channels=3, t_in=6, t_out=2, m=4, p=4)
    wider = tm.init_darnn_params(31, n_channels=4, t_in=6, t_out=2, m=4, p=4)
    # attention and decoder tensors do not depend on the channel count
    np.testing.assert_array_equal(base.u_e.values, wider.u_e.values)
    np.testing.assert_array_equal(base.w_y.values, wider.w_y.values)
    np.testing.assert_array_equal(base.decoder.w_f.values, wider.decoder.w_f.values)
    # the encoder's input block does
    assert base.encoder.w_f.values.shape != wider.encoder.w_f.values.shape


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(27)
    windows = synth_windows(rng, 20)
    fc = tm.train("dsanet", windows, tm.TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=4),
                  hyper={"n_filters": 4, "local_kernel": 3, "n_head": 2})
    path = tm.save_checkpoint(fc, tmp_path / "model.json")
    loaded = tm.load_checkpoint(path)
    np.testing.assert_array_equal(loaded.predict(windows[3]), fc.predict(windows[3]))
    assert loaded.family == "dsanet"
    assert loaded.loss_curve == fc.loss_curve


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    with pytest.raises(ValueError):
        tm.load_checkpoint(p)
