import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resadapt import autodiff as ad
from resadapt.autodiff import Tensor, grad_check, no_grad
from resadapt.errors import DimensionError, NumericError


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# forward values -------------------------------------------------------------------

def test_matmul_identity_and_projector():
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2], [3, 4]])).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0], [7]])).data, [[5], [0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_relu_values_and_zero_subgradient():
    x = leaf([-1.0, 0.0, 2.0])
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    ad.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_relu_all_negative_gives_zero_gradient():
    x = leaf(-np.arange(1.0, 5.0))
    ad.sum_(ad.relu(x)).backward()
    assert not ad.relu(x).data.any()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_scale_and_uniform_softmax():
    np.testing.assert_array_equal(ad.scale(Tensor([2.0, 4.0]), 0.5).data, [1, 2])
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    out = ad.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)


def test_sigmoid_extremes_do_not_overflow():
    with np.errstate(over="raise"):
        out = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_var_is_population_variance():
    x = np.array([[1.0, 3.0, 5.0, 7.0]])
    np.testing.assert_allclose(ad.var(Tensor(x)).data, x.var(axis=-1, keepdims=True))


def test_concat_slice_reshape_transpose_roundtrip():
    x = np.arange(24.0).reshape(2, 3, 4)
    y = ad.concat([Tensor(x[..., :2]), Tensor(x[..., 2:])], axis=-1)
    np.testing.assert_array_equal(y.data, x)
    np.testing.assert_array_equal(ad.reshape(Tensor(x), (6, 4)).data, x.reshape(6, 4))
    np.testing.assert_array_equal(ad.transpose(Tensor(x)).data, x.swapaxes(-1, -2))
    np.testing.assert_array_equal(Tensor(x)[..., 1:3].data, x[..., 1:3])


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4)
    assert float(loss.data) == pytest.approx(np.log(4.0), abs=1e-15)


def test_depthwise_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((6, 3))
    k = np.zeros((5, 3))
    k[2] = 1.0
    np.testing.assert_array_equal(ad.depthwise_conv1d(Tensor(x), Tensor(k)).data, x)


def test_depthwise_conv_matches_direct_sum():
    rng = np.random.default_rng(1)
    x, k = rng.standard_normal((7, 2)), rng.standard_normal((3, 2))
    padded = np.pad(x, ((1, 1), (0, 0)))
    want = sum(padded[j:j + 7] * k[j] for j in range(3))
    np.testing.assert_allclose(ad.depthwise_conv1d(Tensor(x), Tensor(k)).data, want, atol=1e-14)


def test_depthwise_conv_rejects_even_kernel():
    with pytest.raises(DimensionError):
        ad.depthwise_conv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 2))))


# tape mechanics -------------------------------------------------------------------

def test_shared_subexpression_accumulates_once_per_use():
    x = leaf([3.0])
    y = ad.mul(x, x)  # x used twice
    z = ad.add(y, y)  # y used twice
    z.backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = ad.scale(y, 1.0)
    ad.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [1.0])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_broadcast_gradient_is_reduced_to_operand_shape():
    x = leaf(np.ones((3, 4)))
    b = leaf(np.arange(4.0))
    ad.sum_(ad.add(x, b)).backward()
    np.testing.assert_array_equal(b.grad, [3, 3, 3, 3])


def test_zero_upstream_gradient_gives_zero_everywhere():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    out = ad.swish(ad.matmul(a, b))
    out.backward(np.zeros(out.shape))
    assert not a.grad.any() and not b.grad.any()


# grad_check oracle ----------------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = leaf([1.0, 2.0])
    rep = grad_check(lambda: ad.sum_(ad.mul(x, x)), {"x": x}, tol=1e-8)
    assert rep.passed, rep
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_constant_function_passes():
    x = leaf([1.0, -2.0, 3.0])
    rep = grad_check(lambda: ad.sum_(Tensor(np.ones(3))), {"x": x})
    assert rep.passed and rep.max_rel_error == 0.0


def test_grad_check_matmul_tight():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    assert grad_check(lambda: ad.sum_(ad.matmul(a, b)), {"a": a, "b": b}, tol=1e-6).passed


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(20)
    x = x + np.sign(x) * 1e-3
    t = leaf(x)
    w = rng.standard_normal(20)
    assert grad_check(lambda: ad.sum_(ad.mul(ad.relu(t), Tensor(w))), {"x": t}, tol=1e-6).passed


@pytest.mark.parametrize("step", [0.0, -1e-5, 2e-3])
def test_grad_check_rejects_bad_step(step):
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: ad.sum_(x), {"x": x}, step=step)


def test_grad_check_reports_non_finite_with_parameter_name():
    x = leaf([1.0, 0.0])
    with np.errstate(divide="ignore"), pytest.raises(NumericError, match="weights"):
        grad_check(lambda: ad.sum_(ad.power(x, -1.0)), {"weights": x})
    bad = leaf([1.0, np.nan])
    with pytest.raises(NumericError, match="bias"):
        grad_check(lambda: ad.sum_(bad), {"bias": bad})


def test_grad_check_detects_wrong_backward():
    x = leaf([0.3, -0.7])

    def bad_square(a):
        return ad._make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2

    rep = grad_check(lambda: ad.sum_(bad_square(x)), {"x": x})
    assert not rep.passed and rep.worst[0] == "x"


# properties -----------------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (3, 4), elements=finite), arrays(float, (3, 4), elements=finite))
def test_elementwise_grads_match_finite_differences(xa, ya):
    x, y = leaf(xa), leaf(ya)
    w = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
    for fn in (ad.mul, ad.sub, lambda a, b: ad.swish(ad.add(a, b)), lambda a, b: ad.softmax(ad.mul(a, b))):
        rep = grad_check(lambda: ad.sum_(ad.mul(fn(x, y), w)), {"x": x, "y": y}, tol=1e-5)
        assert rep.passed, rep


@settings(max_examples=25, deadline=None)
@given(arrays(float, (2, 5), elements=finite))
def test_forward_is_bit_deterministic(xa):
    def run():
        x = Tensor(xa)
        return ad.softmax(ad.swish(ad.matmul(x, Tensor(np.ones((5, 3)))))).data
    assert run().tobytes() == run().tobytes()


@settings(max_examples=25, deadline=None)
@given(arrays(float, (4, 6), elements=finite))
def test_softmax_rows_sum_to_one(xa):
    np.testing.assert_allclose(ad.softmax(Tensor(xa)).data.sum(-1), 1.0, atol=1e-12)
