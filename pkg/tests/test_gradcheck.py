import pytest
import torch

from rtsgg.gradcheck import REGISTRY, grad_check, max_relative_error


@pytest.mark.parametrize("op", sorted(REGISTRY))
def test_gradients_match_finite_differences(op):
    assert grad_check(op, seed=0) < 1e-4


def test_loss_gradient_tight():
    assert grad_check("focal_loss", seed=3) < 1e-6


def test_harness_catches_wrong_gradient():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            ctx.save_for_backward(t)
            return t ** 3

        @staticmethod
        def backward(ctx, g):
            (t,) = ctx.saved_tensors
            return g * 2 * t ** 2  # true derivative is 3 t^2

    err = max_relative_error([x], lambda: Wrong.apply(x), torch.Generator().manual_seed(0))
    assert err > 0.1


def test_unknown_op():
    with pytest.raises(KeyError):
        grad_check("nope")
