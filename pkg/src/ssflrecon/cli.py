"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, inconsistent shapes, split violations).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .container import ContainerError, read_container, write_container
from .evaluation import evaluate_dataset, export_images, summarize, write_metrics_csv
from .phantom import DatasetReader, generate_dataset, write_dataset
from .training import (
    TrainConfig,
    inference_mask,
    load_checkpoint,
    reconstruct,
    train_feature_extractor,
    train_reconstruction,
    undersample,
)

log = logging.getLogger("ssflrecon")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _r_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("acceleration rates must be >= 1")
    return values


def _train_config(args, mode: str) -> TrainConfig:
    # raw JSON, so mode-dependent defaults (epochs) resolve after the mode override
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base["mode"] = mode
    for key in ("epochs", "seed", "lr"):
        if getattr(args, key, None) is not None:
            base[key] = getattr(args, key)
    if args.precision:
        model = dict(base.get("model") or {})
        model["precision"] = args.precision
        base["model"] = model
    base.update(data=str(args.data), out=str(args.out), log_csv=args.log)
    return TrainConfig.from_dict(base)


def _load_fe(path):
    model, _, meta = load_checkpoint(path)
    if meta["model_kind"] != "fe":
        raise UsageError(f"{path} is not a feature-extractor checkpoint")
    return model


def _load_models(args):
    recon, _, meta = load_checkpoint(args.ckpt)
    if meta["model_kind"] != "recon":
        raise UsageError(f"{args.ckpt} is not a reconstruction checkpoint")
    fe = None
    if recon.use_features:
        if not args.fe:
            raise UsageError(f"{args.ckpt} uses injected features; pass --fe")
        fe = _load_fe(args.fe)
    return recon, fe


def cmd_gen_phantom(args) -> None:
    if args.test >= args.subjects:
        raise UsageError("--test must be smaller than --subjects")
    samples = generate_dataset(args.subjects, args.seed, args.size, args.size, args.frames, args.coils,
                               args.contraction)
    test_ids = [s.subject_id for s in samples[args.subjects - args.test:]]
    write_dataset(args.out, samples, seed=args.seed, test_ids=test_ids)
    print(f"wrote {args.subjects} subjects ({len(test_ids)} test) to {args.out}")


def cmd_train_fe(args) -> None:
    cfg = _train_config(args, args.mode)
    reader = DatasetReader(args.data)
    res = train_feature_extractor(cfg, reader.samples(reader.train_ids))
    print(f"final loss {res.history[-1]['loss']:.6g}; ground-truth reads on loss path: {res.ground_truth_reads}")


def cmd_train_recon(args) -> None:
    if bool(args.fe) == args.no_features:
        raise UsageError("pass exactly one of --fe or --no-features")
    cfg = _train_config(args, "recon-ablation" if args.no_features else "recon")
    fe = None if args.no_features else _load_fe(args.fe)
    if fe is not None and fe.cfg.architecture() != cfg.model.architecture():
        # the frozen extractor fixes the architecture
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "model": {**fe.cfg.architecture(),
                                                                 "precision": cfg.model.precision}})
    reader = DatasetReader(args.data)
    res = train_reconstruction(cfg, reader.samples(reader.train_ids), fe)
    print(f"final loss {res.history[-1]['loss']:.6g}; ground-truth reads on loss path: {res.ground_truth_reads}")


def cmd_reconstruct(args) -> None:
    recon, fe = _load_models(args)
    reader = DatasetReader(args.data)
    sample = reader.sample(args.subject)
    mask = inference_mask(sample, args.R, args.seed)
    y, op = undersample(sample, mask, recon.cfg.cdtype)
    x = reconstruct(recon, fe, y, op)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = out / f"subject{args.subject}_R{args.R:g}.cine"
    write_container(tensors, "TENSORS", {"subject": args.subject, "R": args.R, "seed": args.seed},
                    {"recon": x.numpy(), "zero_filled": op.adjoint(y).numpy(), "mask": mask.pattern.astype(np.float32)})
    export_images(x, out, prefix=f"subject{args.subject}_R{args.R:g}")
    print(f"wrote {tensors}")


def cmd_evaluate(args) -> None:
    recon, fe = _load_models(args)
    reader = DatasetReader(args.data)
    rows = evaluate_dataset(reader, args.R, {args.name: (recon, fe)}, seed=args.seed)
    write_metrics_csv(args.csv, rows, seed=args.seed)
    for (method, R), m in sorted(summarize(rows).items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"R={R:g} {method:12s} nrmse={m['nrmse']:.4f} psnr={m['psnr']:.2f} ssim={m['ssim']:.4f}")


def cmd_export_png(args) -> None:
    c = read_container(args.inp, "TENSORS")
    image_keys = [k for k, v in c.arrays.items() if v.ndim in (2, 3) and k != "mask"]
    if not image_keys:
        raise ContainerError(f"{args.inp}: no image tensors to export")
    ref = c.arrays.get(args.reference) if args.reference else None
    if args.reference and ref is None:
        raise UsageError(f"no tensor named {args.reference!r} in {args.inp}")
    for key in image_keys:
        export_images(torch.from_numpy(c.arrays[key]), args.out, reference=ref, column=args.column, prefix=key)
    print(f"exported {', '.join(image_keys)} to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssflrecon", description="Self-supervised feature learning for cine MRI reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-phantom", help="simulate a multi-coil cine phantom dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--subjects", type=int, default=20)
    g.add_argument("--test", type=int, default=4, help="last N subjects form the test split")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--contraction", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_phantom)

    def train_common(q):
        q.add_argument("--data", required=True, type=Path)
        q.add_argument("--config", type=Path, help="JSON training config")
        q.add_argument("--out", required=True, type=Path)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--seed", type=int)
        q.add_argument("--precision", choices=["single", "double"])
        q.add_argument("--log", help="per-epoch CSV log")

    f = sub.add_parser("train-fe", help="step 1: self-supervised feature learning")
    train_common(f)
    f.add_argument("--mode", choices=["contrastive", "vicreg"], default="vicreg")
    f.set_defaults(func=cmd_train_fe)

    r = sub.add_parser("train-recon", help="step 2: self-supervised reconstruction")
    train_common(r)
    r.add_argument("--fe", type=Path, help="frozen feature-extractor checkpoint")
    r.add_argument("--no-features", action="store_true", help="ablation without feature injection")
    r.set_defaults(func=cmd_train_recon)

    def model_args(q):
        q.add_argument("--ckpt", required=True, type=Path)
        q.add_argument("--fe", type=Path)
        q.add_argument("--data", required=True, type=Path)
        q.add_argument("--seed", type=int, default=0, help="inference-mask seed")

    c = sub.add_parser("reconstruct", help="reconstruct one subject at acceleration R")
    model_args(c)
    c.add_argument("--subject", required=True, type=int)
    c.add_argument("--R", required=True, type=float)
    c.add_argument("--out", required=True, type=Path)
    c.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="metrics on the test split")
    model_args(e)
    e.add_argument("--R", type=_r_list, default=[4.0, 8.0, 16.0])
    e.add_argument("--csv", required=True, type=Path)
    e.add_argument("--name", default="model", help="method tag in the CSV")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-png", help="write PNG panels from a TENSORS file")
    x.add_argument("--in", dest="inp", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--reference", help="tensor to use as reference for error maps")
    x.add_argument("--column", type=int, help="x index of the y-t profile")
    x.set_defaults(func=cmd_export_png)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
