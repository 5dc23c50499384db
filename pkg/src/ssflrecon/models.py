"""Complex 2D+t UNet, projection head, and the two unrolled networks.

Every unrolled iteration is ``UNet -> DC``. The feature extractor adds an
MLP per iteration that maps the spatially pooled bottleneck features to an
embedding; the reconstruction network can concatenate the (frozen) feature
extractor's bottleneck features to its own before each bottleneck block.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .autodiff import conv1d_temporal_complex, conv2d_complex, modrelu, pool2x, upsample2x
from .mri import EncodingOperator, dc_step

__all__ = [
    "ModelConfig",
    "ComplexConvBlock",
    "ComplexUNet",
    "MLPHead",
    "FENet",
    "ReconNet",
    "FEOutput",
    "init_params",
    "unet_forward",
    "fenet_forward",
    "reconnet_forward",
]

_PRECISION = {"single": (torch.complex64, torch.float32), "double": (torch.complex128, torch.float64)}


@dataclass(frozen=True)
class ModelConfig:
    f_base: int = 8
    n_fe: int = 32
    n_fm: int = 32
    mlp_hidden: int = 64
    n_iter: int = 3
    kernel_xy: int = 5
    kernel_t: int = 3
    precision: str = "single"

    def __post_init__(self):
        if self.precision not in _PRECISION:
            raise ValueError(f"precision must be one of {sorted(_PRECISION)}, got {self.precision!r}")
        if min(self.f_base, self.n_fe, self.n_fm, self.mlp_hidden, self.n_iter) < 1:
            raise ValueError(f"all channel counts and n_iter must be positive: {self}")
        if self.kernel_xy % 2 == 0 or self.kernel_t % 2 == 0:
            raise ValueError("kernel sizes must be odd")

    @property
    def cdtype(self) -> torch.dtype:
        return _PRECISION[self.precision][0]

    @property
    def rdtype(self) -> torch.dtype:
        return _PRECISION[self.precision][1]

    def architecture(self) -> dict:
        d = asdict(self)
        d.pop("precision")
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.architecture(), sort_keys=True).encode()).hexdigest()[:16]

    def check_spatial(self, nx: int, ny: int) -> None:
        if nx % 4 or ny % 4:
            raise ValueError(f"spatial dims must be divisible by 4 for two 2x pools, got {nx}x{ny}")


def _complex_glorot(gen: torch.Generator, shape, fan_in: int, fan_out: int, dtype) -> torch.Tensor:
    std = (2.0 / (fan_in + fan_out) / 2.0) ** 0.5
    rdt = torch.float64
    re = torch.randn(shape, generator=gen, dtype=rdt) * std
    im = torch.randn(shape, generator=gen, dtype=rdt) * std
    return torch.complex(re, im).to(dtype)


class ComplexConvBlock(nn.Module):
    """5x5 spatial conv -> ModReLU -> 3-tap temporal conv -> ModReLU."""

    def __init__(self, f_in: int, f_out: int, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        k, kt, c, r = cfg.kernel_xy, cfg.kernel_t, cfg.cdtype, cfg.rdtype
        self.f_in, self.f_out = f_in, f_out
        self.w_xy = nn.Parameter(_complex_glorot(gen, (k, k, f_in, f_out), k * k * f_in, k * k * f_out, c))
        self.b_xy = nn.Parameter(torch.zeros(f_out, dtype=c))
        self.act_xy = nn.Parameter(torch.zeros(f_out, dtype=r))
        self.w_t = nn.Parameter(_complex_glorot(gen, (kt, f_out, f_out), kt * f_out, kt * f_out, c))
        self.b_t = nn.Parameter(torch.zeros(f_out, dtype=c))
        self.act_t = nn.Parameter(torch.zeros(f_out, dtype=r))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = modrelu(conv2d_complex(x, self.w_xy, self.b_xy), self.act_xy)
        return modrelu(conv1d_temporal_complex(x, self.w_t, self.b_t), self.act_t)


class ComplexUNet(nn.Module):
    """Two-stage encoder/decoder with skips, input residual and optional bottleneck injection."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, inject_channels: int = 0):
        super().__init__()
        f = cfg.f_base
        self.inject_channels = inject_channels
        self.n_fe = cfg.n_fe
        self.enc1 = ComplexConvBlock(1, f, cfg, gen)
        self.enc2 = ComplexConvBlock(f, 2 * f, cfg, gen)
        self.bottleneck = ComplexConvBlock(2 * f + inject_channels, cfg.n_fe, cfg, gen)
        self.dec2 = ComplexConvBlock(cfg.n_fe + 2 * f, 2 * f, cfg, gen)
        self.dec1 = ComplexConvBlock(2 * f + f, f, cfg, gen)
        # zero-initialised so the untrained net is the identity
        self.w_out = nn.Parameter(torch.zeros(f, 1, dtype=cfg.cdtype))
        self.b_out = nn.Parameter(torch.zeros(1, dtype=cfg.cdtype))

    def forward(self, x: torch.Tensor, injected: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """``x`` is ``[b, t, x, y]``; returns the image and the bottleneck feature ``[b, t, x/4, y/4, n_fe]``."""
        h = x.unsqueeze(-1)
        s1 = self.enc1(h)
        s2 = self.enc2(pool2x(s1))
        z = pool2x(s2)
        if self.inject_channels:
            if injected is None:
                raise ValueError("this UNet expects an injected bottleneck feature")
            if injected.shape != z.shape[:-1] + (self.inject_channels,):
                raise ValueError(f"injected feature shape {tuple(injected.shape)} does not match "
                                 f"bottleneck grid {tuple(z.shape[:-1])} with {self.inject_channels} channels")
            z = torch.cat([z, injected.to(z.dtype)], dim=-1)
        elif injected is not None:
            raise ValueError("this UNet was built without feature injection")
        r = self.bottleneck(z)
        d2 = self.dec2(torch.cat([upsample2x(r), s2], dim=-1))
        d1 = self.dec1(torch.cat([upsample2x(d2), s1], dim=-1))
        out = (d1 @ self.w_out + self.b_out).squeeze(-1)
        return x + out, r


class MLPHead(nn.Module):
    """Real MLP on the per-frame spatial mean of the bottleneck features."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        r = cfg.rdtype
        d_in = 2 * cfg.n_fe

        def glorot(n_in, n_out):
            std = (2.0 / (n_in + n_out)) ** 0.5
            return nn.Parameter((torch.randn(n_in, n_out, generator=gen, dtype=torch.float64) * std).to(r))

        self.w1 = glorot(d_in, cfg.mlp_hidden)
        self.b1 = nn.Parameter(torch.zeros(cfg.mlp_hidden, dtype=r))
        self.w2 = glorot(cfg.mlp_hidden, cfg.n_fm)
        self.b2 = nn.Parameter(torch.zeros(cfg.n_fm, dtype=r))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        pooled = feat.mean(dim=(-3, -2))  # [b, t, n_fe]
        h = torch.cat([pooled.real, pooled.imag], dim=-1)
        return torch.relu(h @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class FEOutput:
    embeddings: list[torch.Tensor] = field(default_factory=list)  # [b, t, n_fm] each
    features: list[torch.Tensor] = field(default_factory=list)  # [b, t, x/4, y/4, n_fe]
    images: list[torch.Tensor] = field(default_factory=list)  # [b, t, x, y]


def _as_batch(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), y.unsqueeze(0), True
    return x, y, False


class FENet(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.unets = nn.ModuleList(ComplexUNet(cfg, gen) for _ in range(cfg.n_iter))
        self.mlps = nn.ModuleList(MLPHead(cfg, gen) for _ in range(cfg.n_iter))
        self.lambdas = nn.ParameterList(nn.Parameter(torch.ones((), dtype=cfg.rdtype)) for _ in range(cfg.n_iter))

    def forward(self, x_u: torch.Tensor, y: torch.Tensor, op: EncodingOperator, embed: bool = True) -> FEOutput:
        x, y, squeeze = _as_batch(x_u.to(self.cfg.cdtype), y.to(self.cfg.cdtype))
        self.cfg.check_spatial(*x.shape[-2:])
        out = FEOutput()
        for unet, mlp, lam in zip(self.unets, self.mlps, self.lambdas):
            x, r = unet(x)
            if embed:
                e = mlp(r)
                out.embeddings.append(e[0] if squeeze else e)
            x = dc_step(x, y, op, lam)
            out.features.append(r)
            out.images.append(x[0] if squeeze else x)
        return out


class ReconNet(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, use_features: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_features = use_features
        inject = cfg.n_fe if use_features else 0
        self.unets = nn.ModuleList(ComplexUNet(cfg, gen, inject) for _ in range(cfg.n_iter))
        self.lambdas = nn.ParameterList(nn.Parameter(torch.ones((), dtype=cfg.rdtype)) for _ in range(cfg.n_iter))

    def forward(self, x_u: torch.Tensor, y: torch.Tensor, op: EncodingOperator,
                features: list[torch.Tensor] | None = None) -> torch.Tensor:
        x, y, squeeze = _as_batch(x_u.to(self.cfg.cdtype), y.to(self.cfg.cdtype))
        self.cfg.check_spatial(*x.shape[-2:])
        if self.use_features and (features is None or len(features) != self.cfg.n_iter):
            raise ValueError(f"feature-assisted network needs {self.cfg.n_iter} injected features")
        for i, (unet, lam) in enumerate(zip(self.unets, self.lambdas)):
            x, _ = unet(x, features[i] if self.use_features else None)
            x = dc_step(x, y, op, lam)
        return x[0] if squeeze else x


def init_params(cfg: ModelConfig, seed: int, kind: str = "fe", use_features: bool = True) -> nn.Module:
    """Build a seeded network: ``kind`` is ``"fe"`` or ``"recon"``."""
    gen = torch.Generator().manual_seed(seed)
    if kind == "fe":
        return FENet(cfg, gen)
    if kind == "recon":
        return ReconNet(cfg, gen, use_features)
    raise ValueError(f"kind must be 'fe' or 'recon', got {kind!r}")


def unet_forward(x: torch.Tensor, unet: ComplexUNet, injected: torch.Tensor | None = None):
    return unet(x, injected)


def fenet_forward(fe: FENet, x_u: torch.Tensor, y: torch.Tensor, op: EncodingOperator) -> FEOutput:
    return fe(x_u, y, op)


def check_congruent(fe: FENet, recon: ReconNet) -> None:
    if fe.cfg.architecture() != recon.cfg.architecture():
        raise ValueError(f"feature extractor config {fe.cfg.architecture()} does not match "
                         f"reconstruction config {recon.cfg.architecture()}")


def reconnet_forward(recon: ReconNet, x_u: torch.Tensor, y: torch.Tensor, op: EncodingOperator,
                     fe: FENet | None = None) -> torch.Tensor:
    """Run the reconstruction network, injecting frozen features from ``fe`` if it uses them."""
    if recon.use_features:
        if fe is None:
            raise ValueError("feature-assisted reconstruction needs a feature extractor")
        check_congruent(fe, recon)
        with torch.no_grad():
            feats = fe(x_u, y, op, embed=False).features
        return recon(x_u, y, op, feats)
    return recon(x_u, y, op)
