import numpy as np
import pytest
import torch

from conftest import cinner, crandn, fd_vs_backward
from ssflrecon.autodiff import (
    conv1d_temporal_complex,
    conv2d_complex,
    fft2_ortho,
    gradients,
    ifft2_ortho,
    modrelu,
    pool2x,
    upsample2x,
)


def conv2d_oracle(x, w):
    """Zero-padded cross-correlation by explicit loops, x [X, Y, fin], w [k, k, fin, fout]."""
    X, Y, fin = x.shape
    k, _, _, fout = w.shape
    h = k // 2
    out = np.zeros((X, Y, fout), dtype=complex)
    for i in range(X):
        for j in range(Y):
            for a in range(k):
                for b in range(k):
                    ii, jj = i + a - h, j + b - h
                    if 0 <= ii < X and 0 <= jj < Y:
                        out[i, j] += x[ii, jj] @ w[a, b]
    return out


def temporal_oracle(x, w):
    """Circular cross-correlation over axis 0; x [T, fin], w [k, fin, fout]."""
    T = x.shape[0]
    k = w.shape[0]
    out = np.zeros((T, w.shape[2]), dtype=complex)
    for t in range(T):
        for tap in range(k):
            out[t] += x[(t + tap - k // 2) % T] @ w[tap]
    return out


class TestConv2d:
    def test_zero_input(self):
        x = torch.zeros(1, 2, 8, 8, 3, dtype=torch.complex128)
        w = crandn(5, 5, 3, 4)
        assert torch.all(conv2d_complex(x, w, torch.zeros(4, dtype=torch.complex128)) == 0)

    def test_impulse_gives_flipped_kernel(self):
        x = torch.zeros(1, 1, 5, 5, 1, dtype=torch.complex128)
        x[0, 0, 2, 2, 0] = 1
        w = crandn(5, 5, 1, 1, seed=3)
        out = conv2d_complex(x, w)[0, 0, :, :, 0]
        torch.testing.assert_close(out, torch.flip(w[:, :, 0, 0], dims=(0, 1)), rtol=0, atol=1e-12)

    def test_matches_loop_oracle(self):
        x = crandn(1, 1, 7, 6, 2, seed=1)
        w = crandn(5, 5, 2, 3, seed=2)
        out = conv2d_complex(x, w)[0, 0].numpy()
        np.testing.assert_allclose(out, conv2d_oracle(x[0, 0].numpy(), w.numpy()), atol=1e-12)

    def test_identity_kernel(self):
        x = crandn(2, 3, 8, 8, 2)
        w = torch.zeros(5, 5, 2, 2, dtype=torch.complex128)
        w[2, 2] = torch.eye(2)
        torch.testing.assert_close(conv2d_complex(x, w), x, rtol=0, atol=1e-14)

    def test_shape_errors_name_axes(self):
        with pytest.raises(ValueError, match="f_in"):
            conv2d_complex(crandn(1, 1, 8, 8, 2), crandn(5, 5, 3, 1))
        with pytest.raises(ValueError, match="b,t,x,y"):
            conv2d_complex(crandn(8, 8, 2), crandn(5, 5, 2, 1))


class TestTemporal:
    def test_identity(self):
        x = crandn(1, 4, 3, 3, 2)
        w = torch.zeros(3, 2, 2, dtype=torch.complex128)
        w[1] = torch.eye(2)
        torch.testing.assert_close(conv1d_temporal_complex(x, w), x, rtol=0, atol=0)

    def test_average_preserves_constant(self):
        v = crandn(1, 1, 4, 4, 1)
        x = v.expand(1, 3, 4, 4, 1).clone()
        w = torch.full((3, 1, 1), 1 / 3, dtype=torch.complex128)
        torch.testing.assert_close(conv1d_temporal_complex(x, w), x, rtol=0, atol=1e-15)

    def test_ramp_circular(self):
        x = torch.arange(4, dtype=torch.float64).to(torch.complex128).reshape(1, 4, 1, 1, 1)
        w = torch.tensor([1.0, 2.0, 3.0], dtype=torch.complex128).reshape(3, 1, 1)
        out = conv1d_temporal_complex(x, w).reshape(4).real
        # out[t] = x[t-1] + 2 x[t] + 3 x[t+1], indices mod 4
        expected = temporal_oracle(x.reshape(4, 1).numpy(), w.numpy()).real.reshape(4)
        np.testing.assert_allclose(expected, [6, 8, 14, 8])
        np.testing.assert_allclose(out.numpy(), expected)

    def test_matches_oracle_random(self):
        x = crandn(1, 5, 2, 2, 3, seed=4)
        w = crandn(3, 3, 2, seed=5)
        out = conv1d_temporal_complex(x, w)[0, :, 1, 0].numpy()
        np.testing.assert_allclose(out, temporal_oracle(x[0, :, 1, 0].numpy(), w.numpy()), atol=1e-12)


class TestModReLU:
    def test_zero_bias_identity(self):
        out = modrelu(torch.tensor([3 + 4j]), torch.tensor([0.0]))
        assert out.item() == 3 + 4j

    def test_shrinks_magnitude(self):
        out = modrelu(torch.tensor([2 + 0j], dtype=torch.complex128), torch.tensor([-1.0], dtype=torch.float64))
        assert out.item() == pytest.approx(1 + 0j)

    def test_hinge_clamps(self):
        out = modrelu(torch.tensor([3 + 4j]), torch.tensor([-10.0]))
        assert out.item() == 0

    def test_zero_input_zero_output_and_gradient(self):
        z = torch.zeros(3, dtype=torch.complex128, requires_grad=True)
        b = torch.tensor([0.5, 0.0, -1.0], dtype=torch.float64, requires_grad=True)
        out = modrelu(z, b)
        assert torch.all(out == 0)
        gz, gb = torch.autograd.grad(out.abs().square().sum() + out.real.sum(), (z, b))
        assert torch.all(torch.isfinite(torch.view_as_real(gz)))
        assert torch.all(gz == 0) and torch.all(gb == 0)


class TestFFT:
    def test_impulse(self):
        x = torch.zeros(4, 4, dtype=torch.complex128)
        x[0, 0] = 1
        torch.testing.assert_close(fft2_ortho(x), torch.full((4, 4), 0.25, dtype=torch.complex128))

    def test_round_trip_and_parseval(self):
        x = crandn(3, 6, 8)
        assert (ifft2_ortho(fft2_ortho(x)) - x).abs().max() < 1e-10
        assert abs(torch.linalg.vector_norm(fft2_ortho(x)) - torch.linalg.vector_norm(x)) < 1e-10


class TestPool:
    def test_block_mean(self):
        x = torch.tensor([[1, 1 + 2j], [3, -1]], dtype=torch.complex128).reshape(1, 1, 2, 2, 1)
        assert pool2x(x).item() == pytest.approx(1 + 0.5j)

    def test_constants(self):
        c = torch.full((1, 2, 4, 6, 3), 2 - 1j, dtype=torch.complex128)
        torch.testing.assert_close(pool2x(c), torch.full((1, 2, 2, 3, 3), 2 - 1j, dtype=torch.complex128))
        torch.testing.assert_close(upsample2x(pool2x(c)), c)

    def test_odd_rejected(self):
        with pytest.raises(ValueError, match="even"):
            pool2x(torch.zeros(1, 1, 5, 4, 1, dtype=torch.complex64))


# Adjoint consistency: each linear primitive's backward rule is its adjoint.
LINEAR_OPS = {
    "conv2d": (lambda x: conv2d_complex(x, crandn(5, 5, 2, 3, seed=11)), (1, 2, 6, 8, 2)),
    "temporal": (lambda x: conv1d_temporal_complex(x, crandn(3, 2, 3, seed=12)), (1, 4, 3, 5, 2)),
    "fft2": (fft2_ortho, (2, 3, 8, 6)),
    "ifft2": (ifft2_ortho, (2, 3, 8, 6)),
    "pool2x": (pool2x, (1, 2, 6, 8, 2)),
    "upsample2x": (upsample2x, (1, 2, 3, 4, 2)),
}


@pytest.mark.parametrize("name", sorted(LINEAR_OPS))
def test_backward_rule_is_adjoint(name):
    op, shape = LINEAR_OPS[name]
    for seed in range(5):
        x = crandn(*shape, seed=seed).requires_grad_(True)
        out = op(x)
        y = crandn(*out.shape, seed=100 + seed)
        (adj,) = torch.autograd.grad(out, x, grad_outputs=y)
        lhs = cinner(out.detach(), y)
        rhs = cinner(x.detach(), adj)
        assert abs(lhs - rhs) < 1e-10


class TestGradients:
    def test_abs_square(self):
        z = crandn(5).requires_grad_(True)
        loss = z.abs().square().sum()
        g = gradients(loss, {"z": z})["z"]
        torch.testing.assert_close(g, 2 * z.detach())
        with torch.no_grad():
            stepped = z - 0.1 * g
        assert stepped.abs().square().sum() < loss

    def test_unreachable_is_zero_and_frozen_skipped(self):
        a = crandn(3).requires_grad_(True)
        p = crandn(4).requires_grad_(True)
        frozen = crandn(2)
        g = gradients(a.abs().sum(), {"a": a, "p": p, "frozen": frozen})
        assert set(g) == {"a", "p"}
        assert torch.all(g["p"] == 0)

    def test_rejects_nonscalar_and_complex(self):
        a = crandn(3).requires_grad_(True)
        with pytest.raises(ValueError, match="scalar"):
            gradients(a.abs(), {"a": a})
        with pytest.raises(ValueError, match="real"):
            gradients(a.sum(), {"a": a})


def _target(shape, seed):
    return crandn(*shape, seed=seed)


PRIMITIVE_LOSSES = {
    "conv2d": (lambda p: (conv2d_complex(p["x"], p["w"], p["b"]) - _target((1, 2, 6, 6, 3), 9)).abs().square().sum(),
               {"x": (1, 2, 6, 6, 2), "w": (5, 5, 2, 3), "b": (3,)}),
    "temporal": (lambda p: (conv1d_temporal_complex(p["x"], p["w"], p["b"]) - _target((1, 4, 2, 3, 2), 9)).abs().square().sum(),
                 {"x": (1, 4, 2, 3, 3), "w": (3, 3, 2), "b": (2,)}),
    "modrelu": (lambda p: (modrelu(p["z"], p["b"]) - _target((4, 6, 3), 9)).abs().square().sum(),
                {"z": (4, 6, 3), "b": "real3"}),
    "fft2": (lambda p: (fft2_ortho(p["x"]) - _target((2, 4, 6), 9)).abs().square().sum(), {"x": (2, 4, 6)}),
    "ifft2": (lambda p: (ifft2_ortho(p["x"]) - _target((2, 4, 6), 9)).abs().square().sum(), {"x": (2, 4, 6)}),
    "pool2x": (lambda p: (pool2x(p["x"]) - _target((1, 2, 2, 3, 2), 9)).abs().square().sum(), {"x": (1, 2, 4, 6, 2)}),
    "upsample2x": (lambda p: (upsample2x(p["x"]) - _target((1, 2, 4, 6, 2), 9)).abs().square().sum(), {"x": (1, 2, 2, 3, 2)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_LOSSES))
def test_finite_difference_primitives(name):
    fn, shapes = PRIMITIVE_LOSSES[name]
    params = {}
    for i, (n, s) in enumerate(shapes.items()):
        if s == "real3":
            params[n] = torch.tensor([-0.3, 0.2, -0.1], dtype=torch.float64)
        else:
            params[n] = crandn(*s, seed=20 + i)
    ad, fd = fd_vs_backward(fn, params)
    assert abs(ad - fd) <= 1e-4 * max(abs(ad), abs(fd))


def test_determinism():
    x = crandn(1, 2, 8, 8, 2, seed=3).requires_grad_(True)
    w = crandn(5, 5, 2, 2, seed=4).requires_grad_(True)

    def run():
        out = modrelu(conv1d_temporal_complex(conv2d_complex(x, w), crandn(3, 2, 2, seed=5)), torch.zeros(2, dtype=torch.float64))
        loss = out.abs().sum()
        return loss.detach(), gradients(loss, {"w": w})["w"]

    l1, g1 = run()
    l2, g2 = run()
    assert torch.equal(l1, l2) and torch.equal(g1, g2)
