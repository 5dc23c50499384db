import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def crandn(*shape, seed=0, dtype=torch.complex128):
    g = torch.Generator().manual_seed(seed)
    re = torch.randn(shape, generator=g, dtype=torch.float64)
    im = torch.randn(shape, generator=g, dtype=torch.float64)
    return torch.complex(re, im).to(dtype)


def cinner(a, b):
    """<a, b> = sum(conj(a) * b)."""
    return complex(torch.sum(torch.conj(a) * b))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    from ssflrecon.phantom import generate_dataset

    return generate_dataset(4, seed=7)


def fd_vs_backward(loss_fn, params, seed=0, h=1e-4):
    """Directional derivative from autograd and from central differences along a random direction."""
    from ssflrecon.autodiff import directional_fd, gradients, real_inner

    leaves = {n: p.detach().clone().requires_grad_(True) for n, p in params.items()}
    g = gradients(loss_fn(leaves), leaves)
    gen = torch.Generator().manual_seed(seed)
    direction = {}
    for n, p in params.items():
        d = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        if p.is_complex():
            d = torch.complex(d, torch.randn(p.shape, generator=gen, dtype=torch.float64))
        direction[n] = d
    ad = float(sum(real_inner(g[n], direction[n]) for n in g))
    fd = directional_fd(loss_fn, params, direction, h)
    return ad, fd


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """``criterion(id, ok, detail)`` records one acceptance line and returns ``ok``."""

    def report(cid: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.append(f"criterion {cid:<4} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
