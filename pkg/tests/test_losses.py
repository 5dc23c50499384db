import math

import numpy as np
import pytest
import torch

from conftest import crandn
from ssflrecon.losses import (
    ContrastiveConfig,
    VicregWeights,
    collapse_variance_value,
    cosine_similarity,
    cross_kspace,
    feature_total_loss,
    image_consistency,
    infonce,
    recon_total,
    vicreg,
    vicreg_covariance,
    vicreg_invariance,
    vicreg_variance,
)
from ssflrecon.mri import EncodingOperator, simulate_coil_maps
from ssflrecon.sampling import MaskSpec, generate_mask


def T(a):
    return torch.tensor(a, dtype=torch.float64)


# brute-force numpy oracles, written loop by loop

def np_cos(a, b):
    return sum(a[i] * b[i] for i in range(len(a))) / max(math.sqrt(sum(v * v for v in a)), 1e-12) \
        / max(math.sqrt(sum(v * v for v in b)), 1e-12)


def np_infonce(e1, e2, e3, tau):
    out = 0.0
    for j in range(e1.shape[0]):
        s12, s13, s23 = (np_cos(e1[j], e2[j]) / tau, np_cos(e1[j], e3[j]) / tau, np_cos(e2[j], e3[j]) / tau)
        out += -math.log(math.exp(s12) / (math.exp(s12) + math.exp(s13) + math.exp(s23)))
    return out / e1.shape[0]


def np_variance(e, gamma, eps):
    t, c = e.shape
    total = 0.0
    for k in range(c):
        mean = sum(e[j, k] for j in range(t)) / t
        var = sum((e[j, k] - mean) ** 2 for j in range(t)) / (t - 1)
        total += max(0.0, gamma - math.sqrt(var + eps))
    return total / c


def np_covariance(e):
    t, c = e.shape
    mean = [sum(e[j, k] for j in range(t)) / t for k in range(c)]
    total = 0.0
    for m in range(c):
        for n in range(c):
            if m != n:
                cmn = sum((e[j, m] - mean[m]) * (e[j, n] - mean[n]) for j in range(t)) / (t - 1)
                total += cmn * cmn
    return total / c


def np_invariance(e1, e2):
    return sum(sum((e1[j, k] - e2[j, k]) ** 2 for k in range(e1.shape[1])) for j in range(e1.shape[0])) / e1.shape[0]


def np_forward(x, maps, pattern):
    keep = np.fft.ifftshift(pattern, axes=-1)
    out = np.zeros((x.shape[0], maps.shape[0]) + x.shape[1:], complex)
    for j in range(x.shape[0]):
        for c in range(maps.shape[0]):
            k = np.fft.fft2(maps[c] * x[j], norm="ortho")
            out[j, c] = k * keep[j][None, :]
    return out


def np_cross_kspace(x1p, x2p, y1, y2, maps, p1, p2, zeta):
    def term(pred, target, pattern):
        keep = np.fft.ifftshift(pattern, axes=-1)
        acc, n = 0.0, 0
        for j, c, a, b in np.ndindex(*pred.shape):
            if keep[j, b]:
                acc += math.sqrt(abs(pred[j, c, a, b] - target[j, c, a, b]) ** 2 + zeta)
                n += 1
        return acc / n
    return term(np_forward(x1p, maps, p2), y2, p2) + term(np_forward(x2p, maps, p1), y1, p1)


@pytest.fixture
def emb():
    g = np.random.default_rng(3)
    return [g.normal(size=(6, 4)) for _ in range(3)]


class TestInfoNCE:
    def test_orthogonal_negative(self):
        e1 = T([[1.0, 0.0, 0.0]])
        e3 = T([[0.0, 1.0, 0.0]])
        assert infonce(e1, e1.clone(), e3, tau=1.0).item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
        assert infonce(e1, e1, e3, 1.0).item() == pytest.approx(0.5514, abs=1e-4)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 2.0])
    def test_all_equal(self, tau):
        e = T([[1.0, 2.0], [3.0, -1.0]])
        assert infonce(e, e, e, tau).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_scale_invariant(self, emb):
        e1, e2, e3 = map(T, emb)
        assert infonce(5 * e1, 5 * e2, 5 * e3).item() == pytest.approx(infonce(e1, e2, e3).item(), abs=1e-12)

    def test_brute_force(self, emb):
        e1, e2, e3 = emb
        assert abs(infonce(T(e1), T(e2), T(e3), 0.5).item() - np_infonce(e1, e2, e3, 0.5)) < 1e-10

    def test_zero_norm_is_finite(self):
        z = torch.zeros(2, 3, dtype=torch.float64)
        assert torch.isfinite(infonce(z, z, z))
        assert cosine_similarity(z, z).abs().max() == 0

    def test_argmin_is_aligned(self):
        e1 = T([[1.0, 0.5, -0.3]])
        # antipodal negative: s23 = -s12, so the loss is monotone in s12
        e3 = -e1
        e2 = T([[0.1, -1.0, 1.0]]).requires_grad_(True)
        opt = torch.optim.SGD([e2], lr=0.5)
        for _ in range(2000):
            opt.zero_grad()
            infonce(e1, e2, e3, tau=0.5).backward()
            opt.step()
            with torch.no_grad():
                e2 /= torch.linalg.vector_norm(e2)
        assert cosine_similarity(e1, e2.detach()).item() > 0.999

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            infonce(torch.ones(2, 3), torch.ones(2, 3), torch.ones(3, 3))

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            ContrastiveConfig(tau=0.0)


class TestVicreg:
    def test_invariance_examples(self, emb):
        e = T(emb[0])
        assert vicreg_invariance(e, e).item() == 0
        assert vicreg_invariance(T([[1.0, 0.0]]), T([[0.0, 1.0]])).item() == 2
        perm = torch.randperm(6)
        assert vicreg_invariance(e[perm], T(emb[1])[perm]).item() == pytest.approx(
            vicreg_invariance(e, T(emb[1])).item(), abs=1e-12)

    def test_variance_examples(self):
        assert vicreg_variance(torch.ones(5, 3, dtype=torch.float64)).item() == pytest.approx(0.99, abs=1e-12)
        assert vicreg_variance(T([[0.0], [2.0]])).item() == 0
        assert vicreg_variance(T(np.random.default_rng(0).normal(size=(4, 3))), gamma=0.0).item() == 0
        assert collapse_variance_value() == pytest.approx(0.99)

    def test_covariance_examples(self):
        assert vicreg_covariance(T([[1.0, 0.0], [-1.0, 0.0]])).item() == 0
        assert vicreg_covariance(T([[1.0, 1.0], [-1.0, -1.0]])).item() == pytest.approx(4.0, abs=1e-12)

    def test_covariance_decorrelated_is_small(self):
        g = np.random.default_rng(5)
        e = g.normal(size=(20_000, 4))
        assert vicreg_covariance(T(e)).item() < 1e-3

    def test_collapse_total(self):
        e = torch.full((8, 32), 0.3, dtype=torch.float64)
        assert vicreg(e, e.clone()).item() == pytest.approx(49.5, abs=1e-10)

    def test_zero_weights(self, emb):
        w = VicregWeights(0, 0, 0)
        assert vicreg(T(emb[0]), T(emb[1]), w).item() == 0

    def test_ideal_embeddings(self):
        e = T([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]) * math.sqrt(3) / 2
        # per-dim std sqrt(1) after (t-1) normalisation, uncorrelated columns
        assert vicreg(e, e, VicregWeights(epsilon=0.0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_brute_force(self, emb):
        e1, e2, _ = emb
        w = VicregWeights()
        assert abs(vicreg_variance(T(e1)).item() - np_variance(e1, 1.0, 1e-4)) < 1e-10
        assert abs(vicreg_covariance(T(e1)).item() - np_covariance(e1)) < 1e-10
        assert abs(vicreg_invariance(T(e1), T(e2)).item() - np_invariance(e1, e2)) < 1e-10
        ref = (25 * np_invariance(e1, e2) + 25 * (np_variance(e1, 1, 1e-4) + np_variance(e2, 1, 1e-4))
               + np_covariance(e1) + np_covariance(e2))
        assert abs(vicreg(T(e1), T(e2), w).item() - ref) < 1e-10

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            vicreg_variance(torch.ones(1, 4))
        with pytest.raises(ValueError):
            vicreg_covariance(torch.ones(1, 4))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            VicregWeights(lam=-1)

    def test_gradient_fd(self, emb):
        e1 = T(emb[0]).requires_grad_(True)
        e2 = T(emb[1])
        # small std so the hinge is active on every dimension
        f = lambda a: vicreg(0.3 * a, 0.3 * e2)
        (g,) = torch.autograd.grad(f(e1), e1)
        d = T(np.random.default_rng(9).normal(size=(6, 4)))
        h = 1e-6
        with torch.no_grad():
            fd = (f(e1 + h * d) - f(e1 - h * d)) / (2 * h)
        assert abs(fd.item() - (g * d).sum().item()) <= 1e-4 * abs(fd.item())


def test_feature_total_loss():
    assert feature_total_loss([T(2.5)]).item() == 2.5
    assert feature_total_loss([T(1.0), T(2.0), T(3.0)]).item() == 6
    with pytest.raises(ValueError):
        feature_total_loss([])


class TestImageConsistency:
    def test_examples(self):
        x = crandn(2, 4, 4)
        assert image_consistency(x, x).item() == 0
        assert image_consistency(x + 1, x).item() == pytest.approx(1.0, abs=1e-12)
        assert image_consistency(x + 2j, x).item() == pytest.approx(4.0, abs=1e-12)

    def test_brute_force(self):
        a, b = crandn(6, 4, seed=1), crandn(6, 4, seed=2)
        ref = np.mean([abs(complex(u) - complex(v)) ** 2 for u, v in zip(a.flatten(), b.flatten())])
        assert abs(image_consistency(a, b).item() - ref) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            image_consistency(crandn(2, 4), crandn(4, 2))


class TestCrossKspace:
    def setup_method(self):
        self.coils = simulate_coil_maps(2, 8, 16, 0)
        self.m1 = generate_mask(MaskSpec(16, 3, 2.0, 1))
        self.m2 = generate_mask(MaskSpec(16, 3, 3.0, 2))
        self.op1 = EncodingOperator(self.m1, self.coils)
        self.op2 = EncodingOperator(self.m2, self.coils)
        self.x = crandn(3, 8, 16, seed=4)

    def consistent(self):
        return self.op1.forward(self.x), self.op2.forward(self.x)

    def test_zeta_floor(self):
        y1, y2 = self.consistent()
        loss = cross_kspace(self.x, self.x, y1, y2, self.op1, self.op2, zeta=1e-9)
        assert loss.item() == pytest.approx(2 * math.sqrt(1e-9), rel=1e-6)
        assert loss.item() == pytest.approx(6.325e-5, rel=1e-3)
        doubled = cross_kspace(self.x, self.x, y1, y2, self.op1, self.op2, zeta=2e-9)
        assert doubled.item() / loss.item() == pytest.approx(math.sqrt(2), rel=1e-6)

    def test_unit_residual(self):
        y1, y2 = self.consistent()
        one1 = self.op1.apply_mask(torch.ones_like(y1))
        one2 = self.op2.apply_mask(torch.ones_like(y2))
        loss = cross_kspace(self.x, self.x, y1 + one1, y2 + one2, self.op1, self.op2, zeta=1e-12)
        assert loss.item() == pytest.approx(2.0, abs=1e-5)

    def test_global_norm(self):
        y1, y2 = self.consistent()
        loss = cross_kspace(self.x, self.x, y1, y2, self.op1, self.op2, zeta=1e-9, norm="global")
        assert loss.item() == pytest.approx(2 * math.sqrt(1e-9), rel=1e-6)

    def test_brute_force(self):
        x1p, x2p = crandn(3, 8, 16, seed=5), crandn(3, 8, 16, seed=6)
        y1 = self.op1.apply_mask(crandn(3, 2, 8, 16, seed=7))
        y2 = self.op2.apply_mask(crandn(3, 2, 8, 16, seed=8))
        ours = cross_kspace(x1p, x2p, y1, y2, self.op1, self.op2, zeta=1e-9).item()
        ref = np_cross_kspace(x1p.numpy(), x2p.numpy(), y1.numpy(), y2.numpy(), self.coils.maps.numpy(),
                              self.m1.pattern, self.m2.pattern, 1e-9)
        assert abs(ours - ref) < 1e-10

    def test_symmetry(self):
        x1p, x2p = crandn(3, 8, 16, seed=5), crandn(3, 8, 16, seed=6)
        y1, y2 = self.op1.apply_mask(crandn(3, 2, 8, 16, seed=7)), self.op2.apply_mask(crandn(3, 2, 8, 16, seed=8))
        a = recon_total(x1p, x2p, y1, y2, self.op1, self.op2)["total"]
        b = recon_total(x2p, x1p, y2, y1, self.op2, self.op1)["total"]
        assert abs(a.item() - b.item()) < 1e-12

    def test_recon_total_terms(self):
        y1, y2 = self.consistent()
        parts = recon_total(self.x, self.x, y1, y2, self.op1, self.op2)
        assert parts["img"].item() == 0
        assert parts["total"].item() == pytest.approx(2 * math.sqrt(1e-9), rel=1e-6)
        x2 = self.x + 0.1
        only_img = recon_total(self.x, x2, y1, y2, self.op1, self.op2, terms="img")
        assert only_img["total"] is only_img["img"]
        with pytest.raises(ValueError):
            recon_total(self.x, x2, y1, y2, self.op1, self.op2, terms="none")

    def test_no_gradient_off_support(self):
        # with a single unit coil, k-space and image are related by a unitary map,
        # so the gradient wrt k-space is exactly the k-space cotangent
        from ssflrecon.mri import CoilMaps

        unit = CoilMaps(torch.ones(1, 8, 16, dtype=torch.complex128))
        op1, op2 = EncodingOperator(self.m1, unit), EncodingOperator(self.m2, unit)
        k = crandn(3, 1, 8, 16, seed=11).requires_grad_(True)
        x1p = EncodingOperator(None, unit).adjoint(k)
        y1, y2 = op1.forward(self.x), op2.forward(self.x)
        loss = cross_kspace(x1p, self.x, y1, y2, op1, op2)
        (g,) = torch.autograd.grad(loss, k)
        off = ~np.fft.ifftshift(self.m2.pattern, axes=-1)
        for j in range(3):
            for b in range(16):
                if off[j, b]:
                    assert g[j, :, :, b].abs().max() < 1e-12
        assert g.abs().max() > 0

    def test_rejects_bad_inputs(self):
        y1, y2 = self.consistent()
        with pytest.raises(ValueError):
            cross_kspace(self.x, self.x, y1, y2, self.op1, self.op2, zeta=0.0)
        with pytest.raises(ValueError):
            cross_kspace(self.x, self.x, y1, y2, EncodingOperator(None, self.coils), self.op2)
        with pytest.raises(ValueError):
            cross_kspace(self.x, self.x, y1, y2, self.op1, self.op2, norm="l1")

    def test_nonnegative_finite(self):
        x1p, x2p = crandn(3, 8, 16, seed=15), crandn(3, 8, 16, seed=16)
        y1, y2 = self.consistent()
        parts = recon_total(x1p, x2p, y1, y2, self.op1, self.op2)
        assert all(torch.isfinite(v) and v >= 0 for v in parts.values())
