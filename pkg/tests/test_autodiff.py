import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendcast import autodiff as ad
from gradcheck import assert_grads_match


def leaf(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_softmax_constant_row_is_uniform():
    out = ad.softmax(ad.Tensor([3.7, 3.7, 3.7]), axis=0)
    np.testing.assert_allclose(out.values, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_are_probability_vectors(vals):
    out = ad.softmax(ad.Tensor(vals), axis=0)
    assert np.all(out.values >= 0)
    assert abs(out.values.sum() - 1.0) <= 1e-12


def test_conv1d_unit_kernel_is_identity():
    x = ad.Tensor(np.arange(6.0).reshape(1, 6))
    w = ad.Tensor(np.ones((1, 1, 1)))
    out = ad.conv1d(x, w, stride=1)
    np.testing.assert_array_equal(out.values, x.values)


def test_conv1d_output_length():
    rng = np.random.default_rng(0)
    out = ad.conv1d(leaf(rng, 2, 11), leaf(rng, 3, 2, 4), stride=2)
    assert out.shape == (3, (11 - 4) // 2 + 1)


def test_mse_of_identical_inputs_is_zero():
    x = ad.Tensor(np.arange(5.0))
    assert float(ad.mse_loss(x, np.arange(5.0)).values) == 0.0


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    out = ad.layer_norm(ad.Tensor(rng.normal(3.0, 2.5, size=(4, 9))), axis=1)
    np.testing.assert_allclose(out.values.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.values.var(axis=1), 1.0, atol=1e-8)


def test_shape_mismatch_raises_named_error():
    a = ad.Tensor(np.zeros(3))
    b = ad.Tensor(np.zeros(4))
    with pytest.raises(ad.ShapeMismatchError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeMismatchError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeMismatchError):
        ad.conv1d(ad.Tensor(np.zeros((1, 3))), ad.Tensor(np.zeros((1, 1, 5))))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_grad_of_sum_of_squares_is_2x():
    x = ad.Tensor([1.0, -2.0, 0.5], requires_grad=True)
    ad.total_sum(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.values, rtol=1e-12)


def test_unrelated_leaf_gets_zero_grad():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    other = ad.Tensor([5.0], requires_grad=True)
    ad.total_sum(ad.mul(x, x)).backward()
    np.testing.assert_array_equal(other.grad, np.zeros(1))


def test_backward_rejects_nonscalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.mul(x, x).backward()


def test_backward_rejects_detached_graph():
    x = ad.Tensor([2.0])  # no requires_grad anywhere
    with pytest.raises(ad.GraphError):
        ad.total_sum(ad.mul(x, x)).backward()


def test_repeated_use_of_a_tensor_accumulates():
    x = ad.Tensor([3.0], requires_grad=True)
    # f = x*x + x  -> f' = 2x + 1
    ad.total_sum(ad.add(ad.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_three_layer_tanh_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    x = ad.Tensor(rng.standard_normal(5))
    params = [leaf(rng, 6, 5), leaf(rng, 6), leaf(rng, 4, 6), leaf(rng, 4),
              leaf(rng, 1, 4), leaf(rng, 1)]
    target = rng.standard_normal(1)

    def loss_fn():
        h1 = ad.tanh(ad.dense(x, params[0], params[1]))
        h2 = ad.tanh(ad.dense(h1, params[2], params[3]))
        return ad.mse_loss(ad.dense(h2, params[4], params[5]), target)

    assert_grads_match(loss_fn, params, tol=1e-4)


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "scale", "matmul_mat", "matmul_vec", "add_bias0",
    "add_bias1", "colscale", "concat0", "concat1", "narrow", "reshape",
    "transpose", "sigmoid", "tanh", "relu", "softmax0", "softmax1",
    "layer_norm", "conv1d", "conv1d_stride", "max_pool", "mse",
])
def test_every_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    if name in ("add", "sub", "mul"):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[name]
        assert_grads_match(lambda: ad.total_sum(ad.tanh(fn(a, b))), [a, b])
    elif name == "scale":
        a = leaf(rng, 5)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.scale(a, -2.5))), [a])
    elif name == "matmul_mat":
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.matmul(a, b))), [a, b])
    elif name == "matmul_vec":
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.matmul(a, b))), [a, b])
    elif name == "add_bias0":
        a, b = leaf(rng, 3, 4), leaf(rng, 3)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.add_bias(a, b, 0))), [a, b])
    elif name == "add_bias1":
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.add_bias(a, b, 1))), [a, b])
    elif name == "colscale":
        a, s = leaf(rng, 3, 4), leaf(rng, 1, 4)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.colscale(a, s))), [a, s])
    elif name in ("concat0", "concat1"):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        axis = 0 if name.endswith("0") else 1
        # b appears twice to exercise repeated-part accumulation
        assert_grads_match(
            lambda: ad.total_sum(ad.tanh(ad.concat([a, b, b], axis=axis))), [a, b])
    elif name == "narrow":
        a = leaf(rng, 4, 5)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.narrow(a, 1, 1, 3))), [a])
    elif name == "reshape":
        a = leaf(rng, 4, 3)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.reshape(a, (2, 6)))), [a])
    elif name == "transpose":
        a = leaf(rng, 4, 3)
        b = leaf(rng, 4, 3)
        assert_grads_match(
            lambda: ad.total_sum(ad.tanh(ad.matmul(ad.transpose(a), b))), [a, b])
    elif name in ("sigmoid", "tanh", "relu"):
        a = leaf(rng, 3, 4)
        fn = getattr(ad, name)
        assert_grads_match(lambda: ad.total_sum(fn(a)), [a])
    elif name in ("softmax0", "softmax1"):
        a = leaf(rng, 3, 4)
        w = leaf(rng, 3, 4)
        axis = 0 if name.endswith("0") else 1
        assert_grads_match(
            lambda: ad.total_sum(ad.mul(w, ad.softmax(a, axis=axis))), [a, w])
    elif name == "layer_norm":
        a = leaf(rng, 3, 6)
        w = leaf(rng, 3, 6)
        assert_grads_match(
            lambda: ad.total_sum(ad.mul(w, ad.layer_norm(a, axis=1))), [a, w])
    elif name == "conv1d":
        x, w, b = leaf(rng, 2, 9), leaf(rng, 3, 2, 4), leaf(rng, 3)
        assert_grads_match(
            lambda: ad.total_sum(ad.tanh(ad.conv1d(x, w, b, stride=1))), [x, w, b])
    elif name == "conv1d_stride":
        x, w = leaf(rng, 2, 11), leaf(rng, 2, 2, 3)
        assert_grads_match(
            lambda: ad.total_sum(ad.tanh(ad.conv1d(x, w, stride=2))), [x, w])
    elif name == "max_pool":
        x = leaf(rng, 3, 7)
        assert_grads_match(lambda: ad.total_sum(ad.tanh(ad.global_max_pool(x))), [x])
    elif name == "mse":
        x = leaf(rng, 4, 2)
        t = rng.standard_normal((4, 2))
        assert_grads_match(lambda: ad.mse_loss(x, t), [x])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    p = ad.Tensor([1.0, -2.0], requires_grad=True)
    state = ad.init_adam([p])
    ad.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.values, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_closed_form():
    p = ad.Tensor([0.0], requires_grad=True)
    state = ad.init_adam([p], lr=1e-3)
    ad.adam_step([p], [np.ones(1)], state)
    # mhat = vhat = 1 on the first unit-gradient step
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert abs(float(p.values[0]) - expected) < 1e-6


def test_adam_trajectories_are_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = ad.Tensor(rng.standard_normal(4), requires_grad=True)
        state = ad.init_adam([p], lr=1e-2)
        for _ in range(25):
            g = p.values * 2.0 + 1.0
            ad.adam_step([p], [g], state)
        return p.values.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_shape_mismatch():
    p = ad.Tensor([1.0], requires_grad=True)
    state = ad.init_adam([p])
    with pytest.raises(ad.ShapeMismatchError):
        ad.adam_step([p], [np.zeros(3)], state)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_deep_chain_backward_does_not_recurse(seed):
    # recurrent nets build graphs far deeper than Python's recursion limit
    x = ad.Tensor(np.random.default_rng(seed).standard_normal(3), requires_grad=True)
    h = x
    for _ in range(2000):
        h = ad.add(h, ad.scale(x, 1e-3))
    ad.total_sum(h).backward()
    np.testing.assert_allclose(x.grad, np.full(3, 1.0 + 2000 * 1e-3), rtol=1e-9)
