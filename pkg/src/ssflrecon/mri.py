"""Multi-coil Cartesian encoding ``A = M F S`` and the gradient-descent DC step.

Images are ``[..., t, x, y]`` and k-spaces ``[..., t, c, x, y]``; ``y`` is
the phase-encode axis. K-space is stored unshifted (DC at index 0); masks
are specified with the k-space centre in the middle of the line axis and
are ifftshifted when the operator is built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import fft2_ortho, ifft2_ortho
from .sampling import SamplingMask

__all__ = ["CoilMaps", "EncodingOperator", "simulate_coil_maps", "dc_step"]


@dataclass(frozen=True)
class CoilMaps:
    maps: torch.Tensor  # [c, x, y] complex, sum_c |S_c|^2 == 1

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    def to(self, dtype: torch.dtype) -> "CoilMaps":
        return CoilMaps(self.maps.to(dtype))


def simulate_coil_maps(n_coils: int, nx: int, ny: int, seed: int, dtype=torch.complex128) -> CoilMaps:
    """Smooth synthetic sensitivities, normalised to unit root-sum-of-squares.

    Each coil is a Gaussian bump centred on the border of the field of view
    (evenly spaced in angle, jittered by ``seed``) times a smooth linear phase.
    """
    if n_coils < 1:
        raise ValueError(f"n_coils must be >= 1, got {n_coils}")
    rng = np.random.default_rng([seed, 17])
    gx, gy = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), indexing="ij")
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((n_coils, nx, ny), dtype=np.complex128)
    for c in range(n_coils):
        angle = offset + 2 * np.pi * c / n_coils + rng.uniform(-0.2, 0.2)
        cx, cy = 1.2 * np.cos(angle), 1.2 * np.sin(angle)
        width = rng.uniform(0.8, 1.2)
        mag = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * width**2))
        phase = rng.uniform(-1, 1) * gx + rng.uniform(-1, 1) * gy + rng.uniform(-np.pi, np.pi)
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilMaps(torch.from_numpy(maps).to(dtype))


class EncodingOperator:
    """``A = M F S`` for a fixed y-t mask and coil set; immutable."""

    def __init__(self, mask: SamplingMask | np.ndarray | None, coils: CoilMaps):
        self.coils = coils
        _, self.nx, self.ny = coils.maps.shape
        if mask is None:
            self.mask = None
            self._kmask = None
            return
        pattern = mask.pattern if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)
        if pattern.ndim != 2 or pattern.shape[1] != self.ny:
            raise ValueError(f"mask shape {pattern.shape} does not match [t, y={self.ny}]")
        self.mask = mask
        kmask = np.fft.ifftshift(pattern, axes=-1)
        # [t, 1, 1, y] broadcasts against [..., t, c, x, y]
        self._kmask = torch.from_numpy(kmask[:, None, None, :].astype(np.float64)).to(coils.maps.real.dtype)

    @property
    def frames(self) -> int | None:
        return None if self._kmask is None else self._kmask.shape[0]

    def _check_image(self, x: torch.Tensor) -> None:
        if x.shape[-2:] != (self.nx, self.ny):
            raise ValueError(f"image spatial shape {tuple(x.shape[-2:])} does not match operator ({self.nx}, {self.ny})")
        if self._kmask is not None and x.shape[-3] != self.frames:
            raise ValueError(f"image has t={x.shape[-3]} frames, mask has t={self.frames}")

    def _check_kspace(self, y: torch.Tensor) -> None:
        if y.shape[-3:] != (self.coils.n_coils, self.nx, self.ny):
            raise ValueError(
                f"k-space shape {tuple(y.shape)} does not match [.., t, c={self.coils.n_coils}, x={self.nx}, y={self.ny}]"
            )
        if self._kmask is not None and y.shape[-4] != self.frames:
            raise ValueError(f"k-space has t={y.shape[-4]} frames, mask has t={self.frames}")

    def apply_mask(self, k: torch.Tensor) -> torch.Tensor:
        return k if self._kmask is None else k * self._kmask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.apply_mask(fft2_ortho(x.unsqueeze(-3) * self.coils.maps))

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        self._check_kspace(y)
        return torch.sum(ifft2_ortho(self.apply_mask(y)) * self.coils.maps.conj(), dim=-3)

    def normal(self, x: torch.Tensor) -> torch.Tensor:
        return self.adjoint(self.forward(x))

    __call__ = forward


def dc_step(x: torch.Tensor, y: torch.Tensor, op: EncodingOperator, lam: torch.Tensor | float) -> torch.Tensor:
    """One gradient step on ``0.5 ||A x - y||^2`` with step size ``lam``."""
    return x - lam * op.adjoint(op.forward(x) - y)
