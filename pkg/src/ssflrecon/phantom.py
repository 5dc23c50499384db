"""Synthetic cine phantoms, training-batch pipelines and dataset files.

Ground truth is reachable only through :attr:`CineSample.image`, which is
instrumented: every read is counted by :data:`GROUND_TRUTH`, and inside
:func:`ground_truth_guard` a read raises. Training code never needs it:
the acquired (initially 2x undersampled) data is derived from
``kspace_full``.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np
import torch

from .container import ContainerError, ContainerReader, write_container
from .mri import CoilMaps, EncodingOperator, simulate_coil_maps
from .sampling import (
    MaskSpec,
    SamplingMask,
    effective_mask,
    generate_mask,
    sample_contrastive_masks,
    sample_training_masks,
)

__all__ = [
    "GROUND_TRUTH",
    "GroundTruthAccessError",
    "ground_truth_guard",
    "PhantomSpec",
    "CineSample",
    "FeaturePairBatch",
    "ReconPairBatch",
    "generate_phantom",
    "generate_dataset",
    "acquisition_mask",
    "acquired_kspace",
    "make_feature_batch",
    "make_recon_batch",
    "write_dataset",
    "read_dataset",
    "DatasetReader",
]


class GroundTruthAccessError(RuntimeError):
    pass


class _GroundTruthCounter:
    def __init__(self):
        self.reads = 0
        self.forbidden = 0


GROUND_TRUTH = _GroundTruthCounter()


@dataclass
class GuardReport:
    reads: int = 0


@contextlib.contextmanager
def ground_truth_guard(strict: bool = True):
    """Count (and, if ``strict``, forbid) ground-truth reads inside the block."""
    report = GuardReport()
    start = GROUND_TRUTH.reads
    if strict:
        GROUND_TRUTH.forbidden += 1
    try:
        yield report
    finally:
        if strict:
            GROUND_TRUTH.forbidden -= 1
        report.reads = GROUND_TRUTH.reads - start


@dataclass(frozen=True)
class PhantomSpec:
    nx: int = 32
    ny: int = 32
    frames: int = 8
    n_coils: int = 4
    seed: int = 0
    contraction: float = 0.3

    def validate(self) -> None:
        if self.nx % 2 or self.ny % 2:
            raise ValueError(f"phantom dims must be even, got {self.nx}x{self.ny}")
        if min(self.nx, self.ny) < 8:
            raise ValueError(f"phantom dims must be at least 8, got {self.nx}x{self.ny}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if not 0 <= self.contraction < 0.8:
            raise ValueError(f"contraction amplitude must lie in [0, 0.8), got {self.contraction}")


class CineSample:
    """One subject: ground-truth image ``[t, x, y]``, coils, full k-space ``[t, c, x, y]``."""

    __slots__ = ("_image", "coils", "kspace_full", "subject_id")

    def __init__(self, image: torch.Tensor, coils: CoilMaps, kspace_full: torch.Tensor, subject_id: int):
        self._image = image
        self.coils = coils
        self.kspace_full = kspace_full
        self.subject_id = int(subject_id)

    @property
    def image(self) -> torch.Tensor:
        GROUND_TRUTH.reads += 1
        if GROUND_TRUTH.forbidden:
            raise GroundTruthAccessError(f"ground-truth image of subject {self.subject_id} read on a guarded path")
        return self._image

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.kspace_full.shape[i] for i in (0, 2, 3))

    @property
    def n_coils(self) -> int:
        return self.kspace_full.shape[1]


def _ellipse(gx, gy, cx, cy, ax, ay, rot):
    c, s = np.cos(rot), np.sin(rot)
    u = (gx - cx) * c + (gy - cy) * s
    v = -(gx - cx) * s + (gy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def inner_radii(spec: PhantomSpec, frame: int, base: tuple[float, float]) -> tuple[float, float]:
    """Blood-pool semi-axes at ``frame``: largest at frame 0, smallest at t/2."""
    squeeze = 1.0 - spec.contraction * 0.5 * (1.0 - np.cos(2 * np.pi * frame / spec.frames))
    return base[0] * squeeze, base[1] * squeeze


def generate_phantom(spec: PhantomSpec, subject_id: int | None = None) -> CineSample:
    """Cardiac-like dynamic scene with smooth random phase; magnitude in [0, 1]."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 3])
    t, nx, ny = spec.frames, spec.nx, spec.ny
    gx, gy = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), indexing="ij")

    torso = (rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.75))
    torso_rot = rng.uniform(-0.3, 0.3)
    heart_c = (rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15))
    outer = (rng.uniform(0.38, 0.46), rng.uniform(0.32, 0.4))
    inner_base = (outer[0] * rng.uniform(0.6, 0.7), outer[1] * rng.uniform(0.6, 0.7))
    heart_rot = rng.uniform(0, np.pi)
    lvl_torso, lvl_myo, lvl_blood, lvl_dot = (rng.uniform(0.2, 0.35), rng.uniform(0.4, 0.55),
                                              rng.uniform(0.85, 1.0), rng.uniform(0.1, 0.2))
    dot_angle = rng.uniform(0, 2 * np.pi)
    dot_r = 0.09
    outer_amp = 0.35  # myocardium wall thickens: outer boundary moves less than the inner

    coeffs = rng.normal(0, 0.6, size=5)
    phase = coeffs[0] + coeffs[1] * gx + coeffs[2] * gy + coeffs[3] * gx * gy + coeffs[4] * (gx**2 - gy**2)

    mag = np.zeros((t, nx, ny))
    for j in range(t):
        frame = np.zeros((nx, ny))
        frame[_ellipse(gx, gy, 0, 0, *torso, torso_rot)] = lvl_torso
        sq = 1.0 - outer_amp * spec.contraction * 0.5 * (1.0 - np.cos(2 * np.pi * j / t))
        frame[_ellipse(gx, gy, *heart_c, outer[0] * sq, outer[1] * sq, heart_rot)] = lvl_myo
        ia, ib = inner_radii(spec, j, inner_base)
        frame[_ellipse(gx, gy, *heart_c, ia, ib, heart_rot)] = lvl_blood
        for k in range(2):
            ang = dot_angle + k * 2.2
            c, s = np.cos(heart_rot), np.sin(heart_rot)
            du, dv = 0.55 * ia * np.cos(ang), 0.55 * ib * np.sin(ang)
            px = heart_c[0] + du * c - dv * s
            py = heart_c[1] + du * s + dv * c
            frame[(gx - px) ** 2 + (gy - py) ** 2 <= dot_r**2] = lvl_dot
        mag[j] = frame

    image = torch.from_numpy(mag * np.exp(1j * phase)[None])
    coils = simulate_coil_maps(spec.n_coils, nx, ny, seed=spec.seed)
    kspace = EncodingOperator(None, coils).forward(image)
    return CineSample(image, coils, kspace, spec.seed if subject_id is None else subject_id)


def generate_dataset(n_subjects: int, seed: int, nx=32, ny=32, frames=8, n_coils=4,
                     contraction=0.3) -> list[CineSample]:
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects)
    return [generate_phantom(PhantomSpec(nx, ny, frames, n_coils, int(s), contraction), subject_id=i)
            for i, s in enumerate(seeds)]


# --- acquisition and re-undersampling ---------------------------------------------------------

def acquisition_mask(sample: CineSample, R: float = 2.0, seed: int | None = None) -> SamplingMask:
    """The fixed per-subject mask standing in for the prospective acquisition."""
    t, _, ny = sample.shape
    if seed is None:
        seed = int(np.random.SeedSequence([sample.subject_id, 2]).generate_state(1)[0] >> 1)
    return generate_mask(MaskSpec(ny, t, R, seed))


def acquired_kspace(sample: CineSample, mask: SamplingMask, dtype=torch.complex64) -> tuple[torch.Tensor, EncodingOperator]:
    op = EncodingOperator(mask, sample.coils.to(dtype))
    return op.apply_mask(sample.kspace_full.to(dtype)), op


@dataclass
class FeaturePairBatch:
    x1u: torch.Tensor
    x2u: torch.Tensor
    y1: torch.Tensor
    y2: torch.Tensor
    op1: EncodingOperator
    op2: EncodingOperator
    m1: SamplingMask
    m2: SamplingMask
    x3u: torch.Tensor | None = None
    y3: torch.Tensor | None = None
    op3: EncodingOperator | None = None
    m3: SamplingMask | None = None


@dataclass
class ReconPairBatch:
    y: torch.Tensor
    y1: torch.Tensor
    y2: torch.Tensor
    m_y: SamplingMask
    m1: SamplingMask
    m2: SamplingMask
    m_y1: SamplingMask
    m_y2: SamplingMask
    op1: EncodingOperator
    op2: EncodingOperator
    x1: torch.Tensor
    x2: torch.Tensor


def _pi_image(sample: CineSample, dtype) -> torch.Tensor:
    """The 2x parallel-imaging image: adjoint of the acquired k-space."""
    y, op = acquired_kspace(sample, acquisition_mask(sample), dtype)
    return op.adjoint(y)


def make_feature_batch(sample_a: CineSample, sample_b: CineSample | None, mode: str, rng: np.random.Generator,
                       dtype=torch.complex64, masks=None, **mask_kw) -> FeaturePairBatch:
    """Positive pair (and, in contrastive mode, a negative view) for one step.

    ``masks`` overrides the random draw with ``(m1, m2, m3)``.
    """
    t, _, ny = sample_a.shape
    if masks is None:
        masks = sample_contrastive_masks(rng, (t, ny), mode, **mask_kw)
    m1, m2, m3 = masks
    if mode == "contrastive":
        if sample_b is None or sample_b.subject_id == sample_a.subject_id:
            raise ValueError("contrastive mode needs a negative sample from a different subject")
        if m3 is None:
            raise ValueError("contrastive mode needs a third mask")
    elif mode != "vicreg":
        raise ValueError(f"mode must be 'contrastive' or 'vicreg', got {mode!r}")

    coils = sample_a.coils.to(dtype)
    x1 = _pi_image(sample_a, dtype)
    op1, op2 = EncodingOperator(m1, coils), EncodingOperator(m2, coils)
    y1, y2 = op1.forward(x1), op2.forward(x1)
    batch = FeaturePairBatch(op1.adjoint(y1), op2.adjoint(y2), y1, y2, op1, op2, m1, m2)
    if mode == "contrastive":
        x3 = _pi_image(sample_b, dtype)
        op3 = EncodingOperator(m3, sample_b.coils.to(dtype))
        batch.y3 = op3.forward(x3)
        batch.x3u = op3.adjoint(batch.y3)
        batch.op3, batch.m3 = op3, m3
    return batch


def make_recon_batch(sample: CineSample, rng: np.random.Generator, initial_R: float = 2.0,
                     dtype=torch.complex64, masks=None, r_min: float = 2.0, r_max: float = 16.0) -> ReconPairBatch:
    """Re-undersample the acquired k-space into two disjointly-seeded views."""
    t, _, ny = sample.shape
    m_y = acquisition_mask(sample, initial_R)
    y, _ = acquired_kspace(sample, m_y, dtype)
    m1, m2 = masks if masks is not None else sample_training_masks(rng, (t, ny), r_min, r_max)
    m_y1, m_y2 = effective_mask(m1, m_y), effective_mask(m2, m_y)
    coils = sample.coils.to(dtype)
    op1, op2 = EncodingOperator(m_y1, coils), EncodingOperator(m_y2, coils)
    y1, y2 = op1.apply_mask(y), op2.apply_mask(y)
    return ReconPairBatch(y, y1, y2, m_y, m1, m2, m_y1, m_y2, op1, op2, op1.adjoint(y1), op2.adjoint(y2))


# --- dataset files ------------------------------------------------------------------------------

def write_dataset(path: str | os.PathLike, samples: list[CineSample], seed: int = 0,
                  test_ids: list[int] | None = None, masks: dict[str, SamplingMask] | None = None) -> None:
    """Write samples (and optional named masks) as a ``DATASET`` container at float32."""
    if not samples:
        raise ValueError("no samples to write")
    t, nx, ny = samples[0].shape
    ids = [s.subject_id for s in samples]
    test_ids = sorted(test_ids or [])
    arrays = {}
    for s in samples:
        if s.shape != (t, nx, ny) or s.n_coils != samples[0].n_coils:
            raise ValueError(f"subject {s.subject_id} has inconsistent geometry")
        arrays[f"s{s.subject_id}/image"] = s._image.numpy()
        arrays[f"s{s.subject_id}/coils"] = s.coils.maps.numpy()
        arrays[f"s{s.subject_id}/kspace"] = s.kspace_full.numpy()
    mask_meta = {}
    for name, m in (masks or {}).items():
        arrays[f"mask/{name}"] = m.pattern.astype(np.float32)
        mask_meta[name] = {"nominal_R": m.nominal_R, "seed": m.seed, "center_lines": m.center_lines}
    meta = {
        "frames": t, "nx": nx, "ny": ny, "coils": samples[0].n_coils, "samples": len(samples), "seed": seed,
        "subject_ids": ids, "split": {"test": test_ids, "train": [i for i in ids if i not in test_ids]},
        "masks": mask_meta,
    }
    write_container(path, "DATASET", meta, arrays, single=True)


class DatasetReader:
    """Random access to the samples of a dataset file; reads one subject at a time."""

    def __init__(self, path: str | os.PathLike):
        self._reader = ContainerReader(path)
        if self._reader.kind != "DATASET":
            raise ContainerError(f"{path}: expected a DATASET container, found {self._reader.kind}")
        self.meta = self._reader.meta
        self.subject_ids: list[int] = list(self.meta["subject_ids"])
        self.train_ids: list[int] = list(self.meta["split"]["train"])
        self.test_ids: list[int] = list(self.meta["split"]["test"])

    def __len__(self) -> int:
        return len(self.subject_ids)

    def sample(self, subject_id: int) -> CineSample:
        if subject_id not in self.subject_ids:
            raise KeyError(f"subject {subject_id} not in dataset")
        r = self._reader
        image = torch.from_numpy(r.read(f"s{subject_id}/image"))
        coils = CoilMaps(torch.from_numpy(r.read(f"s{subject_id}/coils")))
        kspace = torch.from_numpy(r.read(f"s{subject_id}/kspace"))
        return CineSample(image, coils, kspace, subject_id)

    def samples(self, ids=None) -> list[CineSample]:
        return [self.sample(i) for i in (self.subject_ids if ids is None else ids)]

    def mask(self, name: str) -> SamplingMask:
        info = self.meta["masks"][name]
        pattern = self._reader.read(f"mask/{name}") > 0.5
        return SamplingMask(pattern, info["nominal_R"], info["seed"], info["center_lines"])


def read_dataset(path: str | os.PathLike) -> list[CineSample]:
    return DatasetReader(path).samples()
