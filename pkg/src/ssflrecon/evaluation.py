"""Test-set evaluation, CSV export and PNG panels."""

from __future__ import annotations

import csv
import os
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .metrics import METRIC_CONVENTIONS, nrmse, psnr, ssim
from .models import FENet, ReconNet
from .phantom import DatasetReader
from .training import inference_mask, reconstruct, undersample

__all__ = ["MetricsRecord", "evaluate_samples", "evaluate_dataset", "write_metrics_csv", "read_metrics_csv",
           "export_images", "summarize"]


@dataclass
class MetricsRecord:
    subject_id: int
    frame: str  # "all" = metrics over the whole cine
    R: float
    method: str
    nrmse: float
    psnr: float
    ssim: float


def _record(sid, R, method, x, ref) -> MetricsRecord:
    return MetricsRecord(sid, "all", float(R), method, nrmse(x, ref), psnr(x, ref), ssim(x, ref))


def evaluate_samples(samples, R_list: Sequence[float], models: dict[str, tuple[ReconNet, FENet | None]],
                     seed: int = 0, zero_filled: bool = True) -> list[MetricsRecord]:
    """Metrics for every subject x R x method, plus the zero-filled baseline ``A^H y``."""
    rows = []
    for s in samples:
        ref = s.image
        for R in R_list:
            mask = inference_mask(s, R, seed)
            if zero_filled:
                y, op = undersample(s, mask, torch.complex128)
                rows.append(_record(s.subject_id, R, "zero-filled", op.adjoint(y), ref))
            for name, (recon, fe) in models.items():
                y, op = undersample(s, mask, recon.cfg.cdtype)
                rows.append(_record(s.subject_id, R, name, reconstruct(recon, fe, y, op), ref))
    return rows


def evaluate_dataset(reader: DatasetReader, R_list: Sequence[float], models: dict[str, tuple[ReconNet, FENet | None]],
                     subject_ids: Iterable[int] | None = None, seed: int = 0) -> list[MetricsRecord]:
    """Evaluate held-out subjects only; training-split ids are rejected."""
    ids = list(reader.test_ids if subject_ids is None else subject_ids)
    leaked = [i for i in ids if i not in reader.test_ids]
    if leaked:
        raise ValueError(f"subjects {leaked} are not in the test split")
    return evaluate_samples(reader.samples(ids), R_list, models, seed)


def write_metrics_csv(path: str | os.PathLike, rows: Sequence[MetricsRecord], seed: int | None = None) -> None:
    names = [f.name for f in fields(MetricsRecord)]
    with open(path, "w", newline="") as fh:
        for key, text in METRIC_CONVENTIONS.items():
            fh.write(f"# {key}: {text}\n")
        if seed is not None:
            fh.write(f"# seed: {seed}\n")
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for d in csv.DictReader(lines):
        rows.append(MetricsRecord(int(d["subject_id"]), d["frame"], float(d["R"]), d["method"],
                                  float(d["nrmse"]), float(d["psnr"]), float(d["ssim"])))
    return rows


def summarize(rows: Sequence[MetricsRecord]) -> dict[tuple[str, float], dict[str, float]]:
    """Mean metrics per (method, R)."""
    out: dict[tuple[str, float], dict[str, list]] = {}
    for r in rows:
        acc = out.setdefault((r.method, r.R), {"nrmse": [], "psnr": [], "ssim": []})
        acc["nrmse"].append(r.nrmse)
        acc["psnr"].append(r.psnr)
        acc["ssim"].append(r.ssim)
    return {k: {m: float(np.mean(v)) for m, v in d.items()} for k, d in out.items()}


def _to_u8(mag: np.ndarray, peak: float) -> np.ndarray:
    if peak <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.clip(np.round(mag / peak * 255), 0, 255).astype(np.uint8)


def export_images(image, path: str | os.PathLike, reference=None, column: int | None = None,
                  prefix: str = "img") -> list[Path]:
    """Write x-y frames, the y-t profile at ``column`` and (with ``reference``) 5x error maps.

    ``image`` is ``[t, x, y]``. Magnitudes are scaled so the volume maximum
    maps to 255; a constant image maps to uniform gray (128).
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    mag = np.abs(image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image))
    if mag.ndim == 2:
        mag = mag[None]
    t, nx, ny = mag.shape
    written = []

    def save(arr, name):
        p = out / name
        Image.fromarray(arr, mode="L").save(p)
        written.append(p)

    if mag.max() == mag.min():
        scaled = np.full(mag.shape, 128 if mag.max() > 0 else 0, dtype=np.uint8)
    else:
        scaled = _to_u8(mag, mag.max())
    for j in range(t):
        save(scaled[j], f"{prefix}_xy_t{j:02d}.png")
    col = nx // 2 if column is None else column
    save(scaled[:, col, :], f"{prefix}_yt_x{col:02d}.png")  # t rows x y cols
    if reference is not None:
        ref = np.abs(reference.detach().cpu().numpy() if isinstance(reference, torch.Tensor) else np.asarray(reference))
        err = np.abs(mag - ref) * 5 / ref.max()
        err_u8 = np.clip(np.round(err * 255), 0, 255).astype(np.uint8)
        for j in range(t):
            save(err_u8[j], f"{prefix}_err5x_t{j:02d}.png")
    return written

