import math

import numpy as np
import pytest
import torch

from src.tensor_core import (
    DTYPE,
    activation,
    backward,
    build_optimizer,
    conv2d,
    dense,
    finite_difference_check,
    l2_normalize,
    optimizer_step,
    recording,
    reduce,
    tensor,
)


def _rand(*shape, seed=0, grad=False):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE).requires_grad_(grad)


# conv2d


def test_conv2d_identity_kernel():
    x = _rand(5, 7, 2)
    k = torch.zeros(3, 3, 2, 2, dtype=DTYPE)
    k[1, 1, 0, 0] = 1.0
    k[1, 1, 1, 1] = 1.0
    out = conv2d(x, k, torch.zeros(2, dtype=DTYPE))
    assert torch.equal(out, x)


def test_conv2d_ones_kernel_zero_padding():
    x = torch.ones(3, 3, 1, dtype=DTYPE)
    k = torch.ones(3, 3, 1, 1, dtype=DTYPE)
    out = conv2d(x, k, torch.zeros(1, dtype=DTYPE))[:, :, 0]
    expected = torch.tensor([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=DTYPE)
    assert torch.equal(out, expected)


def test_conv2d_circular_wraps_columns_only():
    x = torch.ones(3, 3, 1, dtype=DTYPE)
    k = torch.ones(3, 3, 1, 1, dtype=DTYPE)
    out = conv2d(x, k, torch.zeros(1, dtype=DTYPE), padding="same-circular-horizontal")[:, :, 0]
    expected = torch.tensor([[6, 6, 6], [9, 9, 9], [6, 6, 6]], dtype=DTYPE)
    assert torch.equal(out, expected)


def test_conv2d_circular_commutes_with_roll():
    x = _rand(4, 8, 2)
    k = _rand(3, 3, 2, 3, seed=1)
    b = _rand(3, seed=2)
    rolled = torch.roll(x, 3, dims=1)
    a = conv2d(rolled, k, b, padding="same-circular-horizontal")
    c = torch.roll(conv2d(x, k, b, padding="same-circular-horizontal"), 3, dims=1)
    assert torch.allclose(a, c, atol=1e-12)


def test_conv2d_stride_and_batch():
    x = _rand(2, 8, 6, 3)
    k = _rand(3, 3, 3, 4, seed=1)
    out = conv2d(x, k, torch.zeros(4, dtype=DTYPE), stride=2)
    assert out.shape == (2, 4, 3, 4)
    single = conv2d(x[1], k, torch.zeros(4, dtype=DTYPE), stride=2)
    assert torch.allclose(out[1], single)


def test_conv2d_rejects_bad_shapes():
    x = _rand(4, 4, 2)
    with pytest.raises(ValueError):
        conv2d(x, _rand(2, 2, 2, 1), torch.zeros(1, dtype=DTYPE))
    with pytest.raises(ValueError):
        conv2d(x, _rand(3, 3, 3, 1), torch.zeros(1, dtype=DTYPE))
    with pytest.raises(ValueError):
        conv2d(x, _rand(3, 3, 2, 1), torch.zeros(2, dtype=DTYPE))
    with pytest.raises(ValueError):
        conv2d(x, _rand(3, 3, 2, 1), torch.zeros(1, dtype=DTYPE), padding="reflect")


# dense / activation


def test_dense_matches_formula():
    x = tensor([1.0, 2.0])
    w = tensor([[1.0, 0.0, 2.0], [0.5, -1.0, 1.0]])
    b = tensor([0.0, 1.0, -1.0])
    assert torch.equal(dense(x, w, b), tensor([2.0, -1.0, 3.0]))


def test_dense_rejects_mismatch():
    with pytest.raises(ValueError):
        dense(tensor([1.0, 2.0, 3.0]), tensor([[1.0], [2.0]]), tensor([0.0]))


def test_activation_values():
    x = tensor([-1.0, 0.0, 2.0])
    assert torch.equal(activation(x, "relu"), tensor([0.0, 0.0, 2.0]))
    assert activation(tensor([0.0]), "sigmoid").item() == 0.5
    with pytest.raises(ValueError):
        activation(x, "tanh")


# reduce


def test_reduce_max_routes_gradient_to_first_maximum():
    x = tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
    out = reduce(x, axes=(1,), kind="max")
    assert torch.equal(out, tensor([3.0, 2.0]))
    backward(out.sum())
    assert torch.equal(x.grad, tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))


def test_reduce_mean_over_several_axes():
    x = _rand(2, 3, 4)
    assert torch.allclose(reduce(x, axes=(0, 2), kind="mean"), x.mean(dim=(0, 2)))


def test_reduce_rejects_bad_axes():
    x = _rand(2, 3)
    with pytest.raises(ValueError):
        reduce(x, axes=(2,), kind="max")
    with pytest.raises(ValueError):
        reduce(x, axes=(0, 0), kind="mean")
    with pytest.raises(ValueError):
        reduce(x, axes=(), kind="mean")


# l2_normalize


def test_l2_normalize_unit_fibers_and_zero_fiber():
    x = tensor([[3.0, 4.0], [0.0, 0.0]])
    out = l2_normalize(x)
    assert torch.allclose(out[0], tensor([0.6, 0.8]))
    assert torch.equal(out[1], tensor([0.0, 0.0]))


def test_l2_normalize_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        l2_normalize(tensor([1.0]), epsilon=0.0)


# backward / optimizers


def test_backward_accumulates_and_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    assert torch.equal(x.grad, tensor([4.0, 8.0]))
    with pytest.raises(ValueError):
        backward(x * 2)


def test_gradient_is_linear_in_the_loss_scale():
    x = _rand(1, 6, 6, 2, seed=1)
    kernel = _rand(3, 3, 2, 3, seed=2, grad=True)
    bias = _rand(3, seed=3, grad=True)

    def grads(a):
        kernel.grad, bias.grad = None, None
        out = activation(conv2d(x, kernel, bias, padding="same-zero"), "sigmoid")
        backward(a * reduce(out, axes=(1, 2, 3), kind="mean").sum())
        return kernel.grad.clone(), bias.grad.clone()

    k1, b1 = grads(1.0)
    for a in (0.5, -3.0, 10.0):
        ka, ba = grads(a)
        assert torch.allclose(ka, a * k1, rtol=1e-12, atol=1e-15)
        assert torch.allclose(ba, a * b1, rtol=1e-12, atol=1e-15)


def test_sgd_step_and_zeroed_grads():
    p = torch.nn.Parameter(tensor([1.0, -1.0]))
    opt = build_optimizer([p], "sgd", lr=0.1)
    backward((p * p).sum())
    optimizer_step(opt)
    assert torch.allclose(p.detach(), tensor([0.8, -0.8]))
    assert torch.equal(p.grad, tensor([0.0, 0.0]))


def test_adam_first_step_moves_by_lr():
    p = torch.nn.Parameter(tensor([1.0]))
    opt = build_optimizer([p], "adam", lr=0.01)
    backward((p * 3.0).sum())
    optimizer_step(opt)
    assert math.isclose(p.item(), 0.99, rel_tol=1e-6)


def test_optimizer_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        build_optimizer([torch.nn.Parameter(tensor([1.0]))], "sgd", lr=0.0)


# Tape


def test_recording_names_ops_and_kink_margins():
    x = tensor([[-0.5, 2.0], [0.25, 1.0]])
    with recording() as tape:
        reduce(activation(x, "relu"), axes=(1,), kind="max")
    assert tape.nodes == ["relu", "reduce_max"]
    assert tape.min_margin == pytest.approx(0.25)


def test_recording_is_inactive_outside_block():
    with recording() as tape:
        pass
    activation(tensor([1.0]), "relu")
    assert tape.nodes == []
    assert tape.min_margin == float("inf")


# Finite differences


def test_finite_difference_check_agrees_on_smooth_function():
    x = _rand(3, 4, grad=True)
    w = _rand(4, 2, seed=1, grad=True)
    err = finite_difference_check(lambda: activation(x @ w, "sigmoid").sum(), [x, w])
    assert err < 1e-6


def test_finite_difference_check_catches_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 1.0

        @staticmethod
        def backward(ctx, grad):
            return grad * 2.0

    x = _rand(5, grad=True)
    assert finite_difference_check(lambda: Wrong.apply(x).sum(), [x]) > 0.1


def test_tensor_is_float64_without_grad():
    t = tensor(np.ones((2, 2)))
    assert t.dtype == DTYPE and not t.requires_grad
