"""Complex tensor primitives and gradient plumbing.

Tensors are plain ``torch`` complex tensors. Network feature maps use the
channels-last layout ``[b, t, x, y, f]``; images are ``[b, t, x, y]``.

Gradient convention for complex parameters: for a real scalar loss ``L``
the stored gradient of ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``, i.e. twice
the conjugate Wirtinger derivative ``dL/dz*``. A step ``z - eta * grad``
is steepest descent, and the first-order change of ``L`` along ``delta``
is ``Re(sum(conj(grad) * delta))``.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping

import torch
import torch.nn.functional as F

__all__ = [
    "conv2d_complex",
    "conv1d_temporal_complex",
    "modrelu",
    "fft2_ortho",
    "ifft2_ortho",
    "pool2x",
    "upsample2x",
    "gradients",
    "real_inner",
    "directional_fd",
]


def _check_rank(x: torch.Tensor, rank: int, axes: str, name: str) -> None:
    if x.dim() != rank:
        raise ValueError(f"{name}: expected axes [{axes}] (rank {rank}), got shape {tuple(x.shape)}")


def conv2d_complex(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Spatial complex convolution over (x, y) with zero 'same' padding.

    Cross-correlation convention (no kernel flip), frames are independent.

    Parameters
    ----------
    x : complex tensor ``[b, t, x, y, f_in]``
    weight : complex tensor ``[kx, ky, f_in, f_out]`` with odd kernel sizes
    bias : complex tensor ``[f_out]`` or None
    """
    _check_rank(x, 5, "b,t,x,y,f_in", "conv2d_complex input")
    _check_rank(weight, 4, "kx,ky,f_in,f_out", "conv2d_complex weight")
    b, t, nx, ny, f_in = x.shape
    kx, ky, w_in, f_out = weight.shape
    if w_in != f_in:
        raise ValueError(f"conv2d_complex: channel axis f_in={f_in} does not match weight f_in={w_in}")
    if kx % 2 == 0 or ky % 2 == 0:
        raise ValueError(f"conv2d_complex: kernel sizes must be odd, got kx={kx}, ky={ky}")
    if bias is not None and bias.shape != (f_out,):
        raise ValueError(f"conv2d_complex: bias must have shape (f_out={f_out},), got {tuple(bias.shape)}")

    # Pack as a real conv: [re; im] channels against [[Wr, -Wi], [Wi, Wr]].
    xin = x.reshape(b * t, nx, ny, f_in).permute(0, 3, 1, 2)
    xin = torch.cat([xin.real, xin.imag], dim=1)
    w = weight.permute(3, 2, 0, 1)  # [f_out, f_in, kx, ky]
    wr, wi = w.real, w.imag
    wpack = torch.cat([torch.cat([wr, -wi], dim=1), torch.cat([wi, wr], dim=1)], dim=0)
    out = F.conv2d(xin, wpack, padding=(kx // 2, ky // 2))
    out = torch.complex(out[:, :f_out], out[:, f_out:])
    out = out.permute(0, 2, 3, 1).reshape(b, t, nx, ny, f_out)
    if bias is not None:
        out = out + bias
    return out


def conv1d_temporal_complex(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Complex convolution along the frame axis with circular padding.

    ``out[t] = sum_k x[(t + k - k//2) mod T] @ weight[k]`` (cross-correlation).

    x : ``[b, t, x, y, f_in]``; weight : ``[k, f_in, f_out]``, k odd.
    """
    _check_rank(x, 5, "b,t,x,y,f_in", "conv1d_temporal_complex input")
    _check_rank(weight, 3, "k,f_in,f_out", "conv1d_temporal_complex weight")
    k, w_in, f_out = weight.shape
    if w_in != x.shape[-1]:
        raise ValueError(f"conv1d_temporal_complex: channel axis f_in={x.shape[-1]} does not match weight f_in={w_in}")
    if k % 2 == 0:
        raise ValueError(f"conv1d_temporal_complex: kernel size must be odd, got {k}")
    half = k // 2
    out = None
    for tap in range(k):
        shifted = torch.roll(x, shifts=half - tap, dims=1)
        term = shifted @ weight[tap]
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


def modrelu(z: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """ReLU on the magnitude, phase kept: ``relu(|z| + b) * z / |z|``.

    ``bias`` is real and broadcast over the trailing (channel) axis. The
    output and its gradient are 0 where ``z == 0``.
    """
    sq = z.real.square() + z.imag.square()
    nonzero = sq > 0
    mag = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    scale = torch.where(nonzero, F.relu(mag + bias) / mag, torch.zeros_like(sq))
    return z * scale


def fft2_ortho(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2D DFT over the last two axes (no fftshift)."""
    return torch.fft.fft2(x, norm="ortho")


def ifft2_ortho(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2_ortho`, which is also its adjoint."""
    return torch.fft.ifft2(x, norm="ortho")


def pool2x(x: torch.Tensor) -> torch.Tensor:
    """2x2 average pool over (x, y) of a ``[b, t, x, y, f]`` tensor."""
    _check_rank(x, 5, "b,t,x,y,f", "pool2x input")
    b, t, nx, ny, f = x.shape
    if nx % 2 or ny % 2:
        raise ValueError(f"pool2x: spatial dims must be even, got x={nx}, y={ny}")
    return x.reshape(b, t, nx // 2, 2, ny // 2, 2, f).mean(dim=(3, 5))


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour 2x upsampling over (x, y)."""
    _check_rank(x, 5, "b,t,x,y,f", "upsample2x input")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def gradients(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a real scalar ``loss``.

    Returns ``{name: grad}`` for every parameter that requires grad; those
    not reachable from ``loss`` get zeros. Frozen parameters are skipped.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.is_complex():
        raise ValueError("loss must be real-valued, got a complex tensor")
    names = [n for n, p in params.items() if p.requires_grad]
    tensors = [params[n] for n in names]
    if not tensors:
        return {}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, tensors, grads)}


def real_inner(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Real inner product ``Re(sum(conj(a) * b))`` for real or complex tensors."""
    if a.is_complex() or b.is_complex():
        return torch.sum(torch.conj(a) * b).real
    return torch.sum(a * b)


def directional_fd(
    fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    direction: Mapping[str, torch.Tensor],
    h: float = 1e-4,
) -> float:
    """Central difference ``(L(p + h d) - L(p - h d)) / 2h``; no autograd involved."""
    with torch.no_grad():
        plus = {n: p + h * direction[n] if n in direction else p for n, p in params.items()}
        minus = {n: p - h * direction[n] if n in direction else p for n, p in params.items()}
        return float((fn(plus) - fn(minus)) / (2 * h))
