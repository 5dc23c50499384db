"""Variable-density incoherent y-t Cartesian undersampling masks.

Masks are binary ``[t, y]`` arrays: entry ``(j, k)`` says whether phase
encode line ``k`` is acquired in frame ``j``. Lines are drawn per frame
from a centred Gaussian density without replacement, with a block of
central lines always sampled, so the aliasing is incoherent across frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MaskSpec",
    "SamplingMask",
    "generate_mask",
    "effective_mask",
    "sample_training_masks",
    "sample_contrastive_masks",
    "center_indices",
]

DEFAULT_SIGMA = 0.3
DEFAULT_CENTER = 2


@dataclass(frozen=True)
class MaskSpec:
    y_lines: int
    frames: int
    nominal_R: float
    seed: int
    density_sigma: float = DEFAULT_SIGMA
    center_lines: int = DEFAULT_CENTER

    def __post_init__(self):
        if self.nominal_R < 1:
            raise ValueError(f"nominal_R must be >= 1, got {self.nominal_R}")
        if self.center_lines < 1:
            raise ValueError(f"center_lines must be >= 1, got {self.center_lines}")
        if self.y_lines < self.center_lines or self.frames < 1:
            raise ValueError(f"invalid mask geometry y_lines={self.y_lines}, frames={self.frames}")
        if self.density_sigma <= 0:
            raise ValueError(f"density_sigma must be positive, got {self.density_sigma}")


@dataclass(frozen=True, eq=False)
class SamplingMask:
    pattern: np.ndarray  # [t, y] bool
    nominal_R: float
    seed: int
    center_lines: int = DEFAULT_CENTER
    spec: MaskSpec | None = field(default=None, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.shape

    @property
    def ones(self) -> int:
        return int(self.pattern.sum())

    @property
    def actual_R(self) -> float:
        return self.pattern.size / self.ones

    def __eq__(self, other):
        return isinstance(other, SamplingMask) and np.array_equal(self.pattern, other.pattern)

    def __hash__(self):
        return hash(self.pattern.tobytes())


def center_indices(y_lines: int, center_lines: int) -> np.ndarray:
    start = y_lines // 2 - center_lines // 2
    return np.arange(start, start + center_lines)


def _line_budget(spec: MaskSpec) -> np.ndarray:
    """Lines per frame: total ``round(t*y/R)`` spread as evenly as possible."""
    total = int(round(spec.frames * spec.y_lines / spec.nominal_R))
    minimum = spec.frames * spec.center_lines
    if total < minimum:
        max_r = spec.y_lines / spec.center_lines
        raise ValueError(
            f"infeasible line budget: R={spec.nominal_R:g} leaves {total} lines for {spec.frames} frames, "
            f"but {spec.center_lines} centre lines per frame need {minimum}; "
            f"use R <= {max_r:g} or fewer centre lines"
        )
    total = min(total, spec.frames * spec.y_lines)
    base, extra = divmod(total, spec.frames)
    counts = np.full(spec.frames, base, dtype=int)
    if extra:
        # Which frames carry the remainder is part of the seeded draw.
        picks = np.random.default_rng([spec.seed, 1]).choice(spec.frames, size=extra, replace=False)
        counts[picks] += 1
    return counts


def generate_mask(spec: MaskSpec) -> SamplingMask:
    """Draw a mask; a pure function of ``spec``."""
    t, ny = spec.frames, spec.y_lines
    if spec.nominal_R == 1:
        return SamplingMask(np.ones((t, ny), dtype=bool), 1.0, spec.seed, spec.center_lines, spec)

    counts = _line_budget(spec)
    center = center_indices(ny, spec.center_lines)
    others = np.setdiff1d(np.arange(ny), center)
    sigma = spec.density_sigma * ny
    weights = np.exp(-0.5 * ((others - (ny - 1) / 2) / sigma) ** 2)
    weights /= weights.sum()

    rng = np.random.default_rng([spec.seed, 0])
    pattern = np.zeros((t, ny), dtype=bool)
    for frame in range(t):
        pattern[frame, center] = True
        n_rand = counts[frame] - spec.center_lines
        if n_rand > 0:
            pattern[frame, rng.choice(others, size=n_rand, replace=False, p=weights)] = True
    return SamplingMask(pattern, float(spec.nominal_R), spec.seed, spec.center_lines, spec)


def effective_mask(m_re: SamplingMask, m_init: SamplingMask) -> SamplingMask:
    """Composition of a re-undersampling mask with the acquisition mask."""
    if m_re.shape != m_init.shape:
        raise ValueError(f"mask shapes differ: {m_re.shape} vs {m_init.shape}")
    pattern = m_re.pattern & m_init.pattern
    ones = int(pattern.sum())
    r = pattern.size / ones if ones else float("inf")
    return SamplingMask(pattern, r, m_re.seed, min(m_re.center_lines, m_init.center_lines))


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def sample_training_masks(rng: np.random.Generator, shape: tuple[int, int], r_min: float = 2.0,
                          r_max: float = 16.0, **mask_kw) -> tuple[SamplingMask, SamplingMask]:
    """Two independent masks, each with R ~ U[r_min, r_max] and its own seed."""
    t, ny = shape
    masks = []
    for _ in range(2):
        r = float(rng.uniform(r_min, r_max))
        masks.append(generate_mask(MaskSpec(ny, t, r, _seed(rng), **mask_kw)))
    return masks[0], masks[1]


def _draw_negative_R(rng: np.random.Generator, r: float, r_min: float, r_max: float, gap: float) -> float:
    lo_len = max(0.0, (r - gap) - r_min)
    hi_len = max(0.0, r_max - (r + gap))
    if lo_len + hi_len <= 0:
        raise ValueError(f"no acceleration in [{r_min}, {r_max}] differs from {r} by more than {gap}")
    while True:
        u = rng.uniform(0.0, lo_len + hi_len)
        r3 = r_min + u if u < lo_len else r + gap + (u - lo_len)
        if abs(r3 - r) > gap:
            return float(r3)


def sample_contrastive_masks(rng: np.random.Generator, shape: tuple[int, int], mode: str,
                             r_min: float = 2.0, r_max: float = 16.0, gap: float = 5.0,
                             **mask_kw) -> tuple[SamplingMask, SamplingMask, SamplingMask | None]:
    """Masks for one feature-learning step.

    ``contrastive``: M1, M2 share R with different seeds, M3 has an R more
    than ``gap`` away from it. ``vicreg``: M1, M2 with independent R, no M3.
    """
    t, ny = shape
    if mode == "vicreg":
        m1, m2 = sample_training_masks(rng, shape, r_min, r_max, **mask_kw)
        return m1, m2, None
    if mode != "contrastive":
        raise ValueError(f"mode must be 'contrastive' or 'vicreg', got {mode!r}")
    r = float(rng.uniform(r_min, r_max))
    s1 = _seed(rng)
    s2 = _seed(rng)
    while s2 == s1:
        s2 = _seed(rng)
    r3 = _draw_negative_R(rng, r, r_min, r_max, gap)
    m1 = generate_mask(MaskSpec(ny, t, r, s1, **mask_kw))
    m2 = generate_mask(MaskSpec(ny, t, r, s2, **mask_kw))
    m3 = generate_mask(MaskSpec(ny, t, r3, _seed(rng), **mask_kw))
    return m1, m2, m3
