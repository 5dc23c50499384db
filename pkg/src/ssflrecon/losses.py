"""Training objectives for both steps.

Feature learning: InfoNCE over one positive and two negative pairs, or the
VICReg invariance / variance / covariance terms on ``[t, c]`` embeddings
(frames are the batch). Reconstruction: image consistency between the two
reconstructions plus a cross k-space term.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch

from .mri import EncodingOperator

__all__ = [
    "VicregWeights",
    "ContrastiveConfig",
    "cosine_similarity",
    "infonce",
    "vicreg_invariance",
    "vicreg_variance",
    "vicreg_covariance",
    "vicreg",
    "feature_total_loss",
    "image_consistency",
    "cross_kspace",
    "recon_total",
]

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class VicregWeights:
    lam: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        if min(self.lam, self.mu, self.nu, self.gamma, self.epsilon) < 0:
            raise ValueError(f"VICReg weights must be non-negative: {self}")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; norms are floored at ``NORM_FLOOR``."""
    na = torch.linalg.vector_norm(a, dim=-1).clamp_min(NORM_FLOOR)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp_min(NORM_FLOOR)
    return (a * b).sum(dim=-1) / (na * nb)


def infonce(e1: torch.Tensor, e2: torch.Tensor, e3: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Softmax of the positive pair (e1, e2) against all three pairs, averaged over frames."""
    _same_shape(e1, e2, e3)
    s12 = cosine_similarity(e1, e2) / tau
    s13 = cosine_similarity(e1, e3) / tau
    s23 = cosine_similarity(e2, e3) / tau
    logits = torch.stack([s12, s13, s23], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - s12).mean()


def vicreg_invariance(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    _same_shape(e1, e2)
    return (e1 - e2).square().sum(dim=-1).mean()


def _need_two(e: torch.Tensor) -> None:
    if e.dim() != 2 or e.shape[0] < 2:
        raise ValueError(f"need embeddings [t >= 2, c], got shape {tuple(e.shape)}")


def vicreg_variance(e: torch.Tensor, gamma: float = 1.0, epsilon: float = 1e-4) -> torch.Tensor:
    _need_two(e)
    std = torch.sqrt(e.var(dim=0, unbiased=True) + epsilon)
    return torch.relu(gamma - std).mean()


def vicreg_covariance(e: torch.Tensor) -> torch.Tensor:
    _need_two(e)
    t, c = e.shape
    centred = e - e.mean(dim=0, keepdim=True)
    cov = centred.T @ centred / (t - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    return off.square().sum() / c


def vicreg(e1: torch.Tensor, e2: torch.Tensor, w: VicregWeights = VicregWeights()) -> torch.Tensor:
    return (w.lam * vicreg_invariance(e1, e2)
            + w.mu * (vicreg_variance(e1, w.gamma, w.epsilon) + vicreg_variance(e2, w.gamma, w.epsilon))
            + w.nu * (vicreg_covariance(e1) + vicreg_covariance(e2)))


def feature_total_loss(per_iteration: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(per_iteration) < 1:
        raise ValueError("need at least one per-iteration loss")
    total = per_iteration[0]
    for term in per_iteration[1:]:
        total = total + term
    return total


def image_consistency(x1p: torch.Tensor, x2p: torch.Tensor) -> torch.Tensor:
    """Mean squared modulus of the difference."""
    _same_shape(x1p, x2p)
    d = x1p - x2p
    return (d.real.square() + d.imag.square()).mean() if d.is_complex() else d.square().mean()


def _kspace_term(pred: torch.Tensor, target: torch.Tensor, support: torch.Tensor, zeta: float, norm: str):
    diff = (pred - target) * support
    sq = diff.real.square() + diff.imag.square()
    if norm == "charbonnier":
        return (torch.sqrt(sq + zeta) * support).sum() / support.expand_as(sq).sum()
    if norm == "global":
        return torch.sqrt(sq.sum() + zeta)
    raise ValueError(f"unknown k-space norm {norm!r}")


def _support(op: EncodingOperator, like: torch.Tensor) -> torch.Tensor:
    return op.apply_mask(torch.ones(like.shape, dtype=like.real.dtype))


def cross_kspace(x1p: torch.Tensor, x2p: torch.Tensor, y1: torch.Tensor, y2: torch.Tensor,
                 op1: EncodingOperator, op2: EncodingOperator, zeta: float = 1e-9,
                 norm: str = "charbonnier") -> torch.Tensor:
    """Compare each reconstruction with the other view's samples.

    ``op1``/``op2`` carry the effective masks of ``y1``/``y2`` (and the coil
    maps). ``x1p`` is projected onto ``op2``'s support and compared with
    ``y2``; ``x2p`` onto ``op1``'s support against ``y1``. The default
    ``charbonnier`` form averages ``sqrt(|r|^2 + zeta)`` over the sampled
    entries; ``global`` uses ``sqrt(||r||^2 + zeta)``.
    """
    _same_shape(x1p, x2p)
    _same_shape(y1, y2)
    if zeta <= 0:
        raise ValueError(f"zeta must be positive, got {zeta}")
    if op1.mask is None or op2.mask is None or op1.frames != op2.frames:
        raise ValueError("cross_kspace needs two masked operators with matching frame counts")
    y1pp = op2.forward(x1p)
    y2pp = op1.forward(x2p)
    return (_kspace_term(y1pp, y2, _support(op2, y2), zeta, norm)
            + _kspace_term(y2pp, y1, _support(op1, y1), zeta, norm))


def recon_total(x1p: torch.Tensor, x2p: torch.Tensor, y1: torch.Tensor, y2: torch.Tensor,
                op1: EncodingOperator, op2: EncodingOperator, zeta: float = 1e-9,
                norm: str = "charbonnier", terms: str = "both") -> dict[str, torch.Tensor]:
    """Returns ``{"img", "ksp", "total"}``; ``terms`` selects what enters ``total``."""
    img = image_consistency(x1p, x2p)
    ksp = cross_kspace(x1p, x2p, y1, y2, op1, op2, zeta, norm)
    if terms == "both":
        total = img + ksp
    elif terms == "img":
        total = img
    elif terms == "ksp":
        total = ksp
    else:
        raise ValueError(f"terms must be 'both', 'img' or 'ksp', got {terms!r}")
    return {"img": img, "ksp": ksp, "total": total}


def collapse_variance_value(gamma: float = 1.0, epsilon: float = 1e-4) -> float:
    """Variance term of fully collapsed embeddings: ``gamma - sqrt(epsilon)``."""
    return max(0.0, gamma - math.sqrt(epsilon))
