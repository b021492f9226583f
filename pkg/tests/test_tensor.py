import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from pdaf.errors import ContractError, ShapeError
from pdaf.tensor import (Adam, AdamState, RngStream, Tensor, adam_step, channel_softmax, clamp,
                         concat_channels, conv2d, exp, log, mean_all, relu, silu, softplus,
                         square, sum_all, tensor_create, upsample2)
from pdaf import tensor as T


def test_create_zeros_and_constant():
    assert tensor_create([2, 2]).data.tolist() == [[0, 0], [0, 0]]
    assert tensor_create([1], "constant", value=3.5).data.tolist() == [3.5]


def test_create_length_mismatch():
    with pytest.raises(ShapeError):
        tensor_create([3], "data", data=[1, 2])


def test_create_gaussian_uses_stream():
    a = tensor_create([4, 3], "gaussian", rng=RngStream(5))
    b = tensor_create([4, 3], "gaussian", rng=RngStream(5))
    assert np.array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        tensor_create([2], "gaussian")


def test_rng_stream_counter_semantics():
    r = RngStream(9)
    first = r.normal(5)
    assert r.counter == 1
    assert np.array_equal(RngStream(9, 0).normal(5), first)
    assert np.array_equal(RngStream(9, 1).normal(5), r.normal(5))
    assert not np.array_equal(RngStream(10).normal(5), first)
    assert not np.array_equal(RngStream(9).child(1).normal(5), RngStream(9).child(2).normal(5))


def test_conv_scalar_and_identity():
    out = conv2d(Tensor([[[[1.0]]]]), Tensor([[[[2.0]]]]), Tensor([0.0]))
    assert out.data.tolist() == [[[[2.0]]]]
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    assert np.array_equal(conv2d(x, Tensor(k), Tensor([0.0]), pad=1).data, x.data)


def test_conv_against_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        Ho, Wo = (7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, Ho, Wo))
        for n in range(2):
            for o in range(4):
                for i in range(Ho):
                    for j in range(Wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv_kernel_gradient_finite_difference():
    r = RngStream(3)
    x = Tensor(r.normal((1, 2, 4, 4)))
    w = Tensor(r.normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(r.normal(2), requires_grad=True)
    errs = gradcheck.check(lambda: sum_all(conv2d(x, w, b, 1, 1)), {"w": w, "b": b})
    assert max(errs.values()) < 1e-4


def test_elementwise_examples():
    assert relu(Tensor([-1.0])).data.tolist() == [0.0]
    p = channel_softmax(Tensor(np.zeros((1, 5, 1, 1))))
    np.testing.assert_array_equal(p.data.reshape(-1), [0.2] * 5)
    assert mean_all(Tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0


def test_log_clamps_and_stays_finite():
    out = log(Tensor([0.0, -3.0, 1.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == np.log(1e-12)


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


def test_backward_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    mean_all(square(x)).backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0], rtol=1e-15)


def test_backward_contract():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        square(x).backward()
    loss = sum_all(square(x))
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_untracked_tensors_get_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    sum_all(x * c).backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_shared_subexpression_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    sum_all(y + y).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_adam_zero_grad_leaves_params():
    p = {"a": Tensor([1.0, -2.0], requires_grad=True)}
    state = AdamState()
    adam_step(p, {"a": np.zeros(2)}, state, lr=0.1)
    assert p["a"].data.tolist() == [1.0, -2.0]
    assert state.t == 1


def test_adam_first_step_scalar():
    p = {"a": Tensor([0.0], requires_grad=True)}
    adam_step(p, {"a": np.array([1.0])}, AdamState(), lr=0.1, eps=1e-8)
    np.testing.assert_allclose(p["a"].data, [-0.1], rtol=1e-7)


def test_adam_matches_scalar_oracle():
    lr, b1, b2, eps, g = 0.05, 0.9, 0.999, 1e-8, 0.7
    p = {"a": Tensor([0.3], requires_grad=True)}
    state = AdamState()
    theta, m, v = 0.3, 0.0, 0.0
    for t in (1, 2):
        adam_step(p, {"a": np.array([g])}, state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        assert abs(p["a"].data[0] - theta) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"a": Tensor(np.zeros(2))}, {"a": np.zeros(3)}, AdamState(), 0.1)


def test_adam_class_uses_param_grads():
    w = Tensor([2.0], requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    sum_all(square(w)).backward()
    opt.step()
    assert w.data[0] < 2.0


def test_determinism_same_seed_same_ops():
    def run():
        r = RngStream(77)
        x = Tensor(r.normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(r.normal((4, 3, 3, 3)), requires_grad=True)
        loss = mean_all(silu(conv2d(x, w, None, 2, 1)))
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(b, c, hw, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(b, c, hw, hw))
    p = channel_softmax(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_relu_nonneg_exp_positive(vals):
    x = Tensor(vals)
    assert np.all(relu(x).data >= 0)
    assert np.all(exp(x).data > 0)


def test_upsample_and_softplus_values():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    up = upsample2(x).data[0, 0]
    assert up.shape == (4, 4)
    assert up[1, 1] == 0 and up[2, 3] == 3
    np.testing.assert_allclose(softplus(Tensor([0.0, 800.0])).data, [np.log(2), 800.0])
    np.testing.assert_allclose(clamp(Tensor([-20.0, 3.0, 20.0]), -10, 10).data, [-10, 3, 10])
