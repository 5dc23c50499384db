"""Adam, the two self-supervised training loops, checkpoints and inference."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
from torch import nn

from .autodiff import gradients
from .container import read_container, write_container
from .losses import VicregWeights, feature_total_loss, infonce, recon_total, vicreg
from .models import FENet, ModelConfig, ReconNet, check_congruent, init_params, reconnet_forward
from .mri import EncodingOperator
from .phantom import CineSample, ground_truth_guard, make_feature_batch, make_recon_batch
from .sampling import MaskSpec, SamplingMask, generate_mask

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "train_feature_extractor",
    "train_reconstruction",
    "save_checkpoint",
    "load_checkpoint",
    "reconstruct",
    "inference_mask",
    "undersample",
]

FEATURE_MODES = ("contrastive", "vicreg")
RECON_MODES = ("recon", "recon-ablation")


# --- optimiser -----------------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def _sq(g: torch.Tensor) -> torch.Tensor:
    # real and imaginary parts get separate second moments
    return torch.complex(g.real.square(), g.imag.square()) if g.is_complex() else g.square()


def _div(m: torch.Tensor, v: torch.Tensor, eps: float) -> torch.Tensor:
    if m.is_complex():
        return torch.complex(m.real / (v.real.sqrt() + eps), m.imag / (v.imag.sqrt() + eps))
    return m / (v.sqrt() + eps)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState) -> AdamState:
    """Bias-corrected Adam, in place. Complex tensors are treated as (re, im) pairs."""
    trainable = [n for n, p in params.items() if p.requires_grad]
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable parameters: {missing}")
    state.step += 1
    c1 = 1 - state.beta1**state.step
    c2 = 1 - state.beta2**state.step
    for n in trainable:
        p, g = params[n], grads[n]
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * _sq(g)
        state.m[n], state.v[n] = m, v
        p.sub_(state.lr * _div(m / c1, v / c2, state.eps))
    return state


# --- configuration ---------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "vicreg"
    epochs: int | None = None
    batch_size: int = 1
    seed: int = 0
    lr: float = 4e-4
    tau: float = 0.5
    vicreg_lambda: float = 25.0
    vicreg_mu: float = 25.0
    vicreg_nu: float = 1.0
    vicreg_gamma: float = 1.0
    vicreg_epsilon: float = 1e-4
    zeta: float = 1e-9
    ksp_norm: str = "charbonnier"
    loss_terms: str = "both"
    r_min: float = 2.0
    r_max: float = 16.0
    initial_R: float = 2.0
    val_R: float = 8.0
    data: str | None = None
    fe_checkpoint: str | None = None
    out: str | None = None
    log_csv: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in FEATURE_MODES + RECON_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.epochs is None:
            self.epochs = 30 if self.mode in FEATURE_MODES else 200
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def vicreg_weights(self) -> VicregWeights:
        return VicregWeights(self.vicreg_lambda, self.vicreg_mu, self.vicreg_nu, self.vicreg_gamma,
                             self.vicreg_epsilon)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    model: nn.Module
    state: AdamState
    history: list[dict] = field(default_factory=list)
    ground_truth_reads: int = 0


def _trainable(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def _write_log(path: str | None, history: list[dict]) -> None:
    if not path or not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def _step(model: nn.Module, losses: list[torch.Tensor], state: AdamState) -> None:
    loss = losses[0] if len(losses) == 1 else torch.stack(losses).mean()
    params = _trainable(model)
    adam_step(params, gradients(loss, params), state)


# --- step 1: feature learning ---------------------------------------------------------------------

def feature_loss(fe: FENet, sample_a: CineSample, sample_b: CineSample | None, cfg: TrainConfig,
                 rng: np.random.Generator) -> torch.Tensor:
    batch = make_feature_batch(sample_a, sample_b, cfg.mode, rng, dtype=cfg.model.cdtype,
                               r_min=cfg.r_min, r_max=cfg.r_max)
    out1 = fe(batch.x1u, batch.y1, batch.op1)
    out2 = fe(batch.x2u, batch.y2, batch.op2)
    if cfg.mode == "contrastive":
        out3 = fe(batch.x3u, batch.y3, batch.op3)
        per_iter = [infonce(e1, e2, e3, cfg.tau)
                    for e1, e2, e3 in zip(out1.embeddings, out2.embeddings, out3.embeddings)]
    else:
        w = cfg.vicreg_weights
        per_iter = [vicreg(e1, e2, w) for e1, e2 in zip(out1.embeddings, out2.embeddings)]
    return feature_total_loss(per_iter)


def train_feature_extractor(cfg: TrainConfig, samples: Sequence[CineSample],
                            fe: FENet | None = None, state: AdamState | None = None) -> TrainResult:
    """Step 1. ``samples`` are the training subjects."""
    if cfg.mode not in FEATURE_MODES:
        raise ValueError(f"feature learning needs mode in {FEATURE_MODES}, got {cfg.mode!r}")
    if cfg.mode == "contrastive" and len({s.subject_id for s in samples}) < 2:
        raise ValueError("contrastive learning needs at least two subjects for negative pairs")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 101])
    fe = fe if fe is not None else init_params(cfg.model, cfg.seed, "fe")
    state = state if state is not None else AdamState(lr=cfg.lr)
    result = TrainResult(fe, state)
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        with ground_truth_guard() as guard:
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                losses = []
                for idx in order[start:start + cfg.batch_size]:
                    neg = None
                    if cfg.mode == "contrastive":
                        neg = samples[int(rng.choice([j for j in range(n) if j != idx]))]
                    losses.append(feature_loss(fe, samples[idx], neg, cfg, rng))
                _step(fe, losses, state)
                total += float(sum(l.detach() for l in losses))
                count += len(losses)
        result.ground_truth_reads += guard.reads
        row = {"epoch": epoch, "loss": total / count, "wall_time": time.perf_counter() - t0}
        result.history.append(row)
        log.info("fe %s epoch %d loss %.6f", cfg.mode, epoch, row["loss"])
    _write_log(cfg.log_csv, result.history)
    if cfg.out:
        save_checkpoint(cfg.out, fe, state, {"train": cfg.to_dict()})
    return result


# --- step 2: reconstruction -----------------------------------------------------------------------

def inference_mask(sample: CineSample, R: float, seed: int = 0) -> SamplingMask:
    t, _, ny = sample.shape
    mseed = int(np.random.SeedSequence([seed, sample.subject_id, int(round(R * 1000)), 5]).generate_state(1)[0] >> 1)
    return generate_mask(MaskSpec(ny, t, R, mseed))


def undersample(sample: CineSample, mask: SamplingMask, dtype=torch.complex64) -> tuple[torch.Tensor, EncodingOperator]:
    """Singly undersampled data for inference (no re-undersampling)."""
    op = EncodingOperator(mask, sample.coils.to(dtype))
    return op.apply_mask(sample.kspace_full.to(dtype)), op


@torch.no_grad()
def reconstruct(recon: ReconNet, fe: FENet | None, y: torch.Tensor, op: EncodingOperator) -> torch.Tensor:
    """Reconstruct from acquired k-space ``y`` with operator ``op``."""
    y = y.to(recon.cfg.cdtype)
    return reconnet_forward(recon, op.adjoint(y), y, op, fe)


def recon_losses(recon: ReconNet, fe: FENet | None, sample: CineSample, cfg: TrainConfig,
                 rng: np.random.Generator) -> dict[str, torch.Tensor]:
    b = make_recon_batch(sample, rng, cfg.initial_R, dtype=cfg.model.cdtype, r_min=cfg.r_min, r_max=cfg.r_max)
    x1p = reconnet_forward(recon, b.x1, b.y1, b.op1, fe)
    x2p = reconnet_forward(recon, b.x2, b.y2, b.op2, fe)
    return recon_total(x1p, x2p, b.y1, b.y2, b.op1, b.op2, cfg.zeta, cfg.ksp_norm, cfg.loss_terms)


def validation_nrmse(recon: ReconNet, fe: FENet | None, samples: Sequence[CineSample], R: float,
                     seed: int = 0) -> float:
    from .metrics import nrmse

    values = []
    for s in samples:
        y, op = undersample(s, inference_mask(s, R, seed), recon.cfg.cdtype)
        values.append(nrmse(reconstruct(recon, fe, y, op), s.image))
    return float(np.mean(values))


def train_reconstruction(cfg: TrainConfig, samples: Sequence[CineSample], fe: FENet | None = None,
                         val_samples: Sequence[CineSample] | None = None,
                         recon: ReconNet | None = None, state: AdamState | None = None) -> TrainResult:
    """Step 2. ``fe`` (frozen) is required unless ``cfg.mode == 'recon-ablation'``.

    Ground truth is read only for the optional per-epoch validation on
    ``val_samples``, outside the guarded loss path.
    """
    if cfg.mode not in RECON_MODES:
        raise ValueError(f"reconstruction needs mode in {RECON_MODES}, got {cfg.mode!r}")
    assisted = cfg.mode == "recon"
    if assisted and fe is None:
        raise ValueError("mode 'recon' needs a trained feature extractor")
    if not assisted:
        fe = None
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 202])
    recon = recon if recon is not None else init_params(cfg.model, cfg.seed, "recon", use_features=assisted)
    if fe is not None:
        check_congruent(fe, recon)
        fe.requires_grad_(False)
    state = state if state is not None else AdamState(lr=cfg.lr)
    result = TrainResult(recon, state)
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"img": 0.0, "ksp": 0.0, "total": 0.0}
        count = 0
        with ground_truth_guard() as guard:
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                terms = [recon_losses(recon, fe, samples[i], cfg, rng) for i in order[start:start + cfg.batch_size]]
                _step(recon, [t["total"] for t in terms], state)
                for t in terms:
                    for k in sums:
                        sums[k] += float(t[k].detach())
                count += len(terms)
        result.ground_truth_reads += guard.reads
        row = {"epoch": epoch, "loss": sums["total"] / count, "loss_img": sums["img"] / count,
               "loss_ksp": sums["ksp"] / count}
        if val_samples:
            row["val_nrmse"] = validation_nrmse(recon, fe, val_samples, cfg.val_R, cfg.seed)
        row["wall_time"] = time.perf_counter() - t0
        result.history.append(row)
        log.info("recon %s epoch %d loss %.6f", cfg.mode, epoch, row["loss"])
    _write_log(cfg.log_csv, result.history)
    if cfg.out:
        save_checkpoint(cfg.out, recon, state, {"train": cfg.to_dict()})
    return result


# --- checkpoints ---------------------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, model: nn.Module, state: AdamState | None = None,
                    extra: dict | None = None) -> None:
    """Parameters, Adam moments and architecture in a ``CKPT`` container."""
    cfg: ModelConfig = model.cfg
    arrays = {}
    for n, p in model.named_parameters():
        arrays[f"param/{n}"] = p.detach().numpy()
    if state is not None:
        for n, m in state.m.items():
            arrays[f"adam_m/{n}"] = m.numpy()
            arrays[f"adam_v/{n}"] = state.v[n].numpy()
    meta = {
        "model_kind": "fe" if isinstance(model, FENet) else "recon",
        "use_features": bool(getattr(model, "use_features", False)),
        "model": asdict(cfg),
        "fingerprint": cfg.fingerprint(),
        "step": state.step if state else 0,
        "adam": {k: getattr(state, k) for k in ("lr", "beta1", "beta2", "eps")} if state else None,
        **(extra or {}),
    }
    write_container(path, "CKPT", meta, arrays, single=False)


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, AdamState, dict]:
    c = read_container(path, "CKPT")
    cfg = ModelConfig(**c.meta["model"])
    if cfg.fingerprint() != c.meta["fingerprint"]:
        raise ValueError(f"{path}: config fingerprint mismatch")
    model = init_params(cfg, 0, c.meta["model_kind"], c.meta["use_features"])
    params = dict(model.named_parameters())
    names = {k[len("param/"):] for k in c.arrays if k.startswith("param/")}
    if names != set(params):
        raise ValueError(f"{path}: parameter names do not match the architecture")
    with torch.no_grad():
        for n, p in params.items():
            arr = torch.from_numpy(c.arrays[f"param/{n}"])
            if arr.shape != p.shape:
                raise ValueError(f"{path}: parameter {n} has shape {tuple(arr.shape)}, expected {tuple(p.shape)}")
            p.copy_(arr.to(p.dtype))
    adam = c.meta.get("adam") or {}
    state = AdamState(step=c.meta["step"], **adam)
    for k, arr in c.arrays.items():
        if k.startswith("adam_m/"):
            n = k[len("adam_m/"):]
            state.m[n] = torch.from_numpy(arr).to(params[n].dtype)
            state.v[n] = torch.from_numpy(c.arrays[f"adam_v/{n}"]).to(params[n].dtype)
    return model, state, c.meta


def with_epochs(cfg: TrainConfig, epochs: int, **kw) -> TrainConfig:
    return replace(cfg, epochs=epochs, **kw)
