import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
    np.random.seed(0)


def finite_diff_check(loss_fn, params, step=1e-5):
    """Relative error between autograd and central finite differences.

    `loss_fn` re-evaluates the scalar loss from current parameter values;
    every entry of every parameter is perturbed. The error is the infinity
    norm of the gradient-vector difference over the gradient's own infinity
    norm, so components below the finite-difference noise floor do not
    dominate. Double precision expected.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    max_diff = 0.0
    max_mag = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        fd = torch.zeros_like(p)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        max_diff = max(max_diff, (g - fd).abs().max().item())
        max_mag = max(max_mag, fd.abs().max().item(), g.abs().max().item())
    return max_diff / max(max_mag, 1e-10)


def random_projection_loss(out_fn, seed=0):
    """Wrap a tensor-valued function into a generic scalar loss."""
    gen = torch.Generator().manual_seed(seed)
    weights = {}

    def loss():
        out = out_fn()
        key = tuple(out.shape)
        if key not in weights:
            weights[key] = torch.randn(out.shape, dtype=out.dtype, generator=gen)
        return (out * weights[key]).sum()

    return loss
