import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar fn at x, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def autograd_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_onehot(shape, gen, num_classes=4, dtype=torch.float64):
    b, _, h, w = shape
    labels = torch.randint(0, num_classes, (b, h, w), generator=gen)
    return torch.nn.functional.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)
