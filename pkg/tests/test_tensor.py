import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pageforge.tensor import (
    Adam,
    Conv2d,
    Linear,
    Module,
    Parameter,
    Tensor,
    conv2d,
    grad_check,
    linear,
    log_softmax,
    precision,
    relu,
    residual_add,
    sgd_step,
    sigmoid,
    tsum,
    upsample_nearest2x,
)


def test_all_ones_convolution_center():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_stride_two_shape():
    out = conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), None, stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with precision(np.float64):
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for n in range(2):
        for k in range(4):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    ref[n, k, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[k]).sum() + b[k]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradient_64bit():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        conv = Conv2d(rng, 2, 3, 3)
        x = Parameter(rng.normal(size=(1, 2, 5, 5)))
        w = Tensor(rng.normal(size=(1, 3, 5, 5)))
        err = grad_check(lambda: tsum(relu(conv(x)) * w), [x, conv.weight, conv.bias])
    assert err < 1e-4


def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_log_softmax_uniform():
    out = log_softmax(Tensor(np.zeros((1, 4))), axis=1)
    np.testing.assert_allclose(out.data, np.log(0.25), rtol=1e-6)


def test_log_softmax_bad_axis():
    with pytest.raises(ValueError):
        log_softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_log_softmax_normalised(row):
    out = log_softmax(Tensor(np.array([row])), axis=-1)
    assert abs(np.exp(out.data.astype(np.float64)).sum() - 1) < 1e-6


def test_linear_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_residual_add_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        residual_add(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


def test_upsample_and_sigmoid_gradients():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        x = Parameter(rng.normal(size=(1, 2, 3, 3)))
        w = Tensor(rng.normal(size=(1, 2, 6, 6)))
        assert grad_check(lambda: tsum(sigmoid(upsample_nearest2x(x)) * w), [x]) < 1e-6


def test_sgd_step_substitution():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([2.0], dtype=p.data.dtype)
    sgd_step([p], 0.1)
    assert abs(p.data[0] - 0.8) < 1e-6
    assert p.grad is None


def test_sgd_zero_lr_keeps_params():
    p = Parameter(np.array([1.5, -2.0]))
    p.grad = np.ones(2, dtype=p.data.dtype)
    sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_missing_grad_rejected():
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step([Parameter(np.zeros(1), name="w")], 0.1)


def test_sgd_quadratic_bowl():
    with precision(np.float64):
        p = Parameter(np.array(1.0))
        for _ in range(100):
            (p * p).backward()
            sgd_step([p], 0.1)
    # closed form: p_k = (1 - 2 * 0.1) ** k
    assert abs(float(p.data)) < 1e-4
    assert abs(float(p.data) - 0.8 ** 100) < 1e-12


def test_adam_reduces_quadratic():
    p = Parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        tsum(p * p).backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_grad_check_linear_function_exact():
    with precision(np.float64):
        x = Parameter(np.array([1.0, 2.0, 3.0]))
        assert grad_check(lambda: tsum(x * Tensor(np.array([2.0, -1.0, 0.5]))), [x]) < 1e-8


def test_grad_check_requires_float64():
    x = Parameter(np.ones(2))
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: tsum(x), [x])


def test_grad_check_rejects_non_finite():
    with precision(np.float64):
        x = Parameter(np.array([np.inf]))
        with pytest.raises(ValueError, match="finite"):
            grad_check(lambda: tsum(x), [x])


def test_backward_visits_shared_nodes_once():
    x = Parameter(np.array(2.0))
    y = x * x
    z = y + y  # y feeds z twice
    z.backward()
    assert float(x.grad) == pytest.approx(8.0)


def test_parameter_names_deterministic():
    class Net(Module):
        def __init__(self, rng):
            self.a = Linear(rng, 2, 2)
            self.convs = [Conv2d(rng, 1, 1, 3) for _ in range(2)]

    names = [n for n, _ in Net(np.random.default_rng(0)).named_parameters()]
    assert names == ["a.weight", "a.bias", "convs.0.weight", "convs.0.bias", "convs.1.weight", "convs.1.bias"]
    assert names == [n for n, _ in Net(np.random.default_rng(1)).named_parameters()]
