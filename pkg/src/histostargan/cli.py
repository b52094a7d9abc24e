"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import ConfigError, RngStream, resolve_config
from .data import (
    DatasetError,
    DatasetManifest,
    PatchRecord,
    StainSimulatorParams,
    build_imbalanced_manifest,
    generate_toy_dataset,
    load_dataset,
    read_image,
    write_image,
    write_mask,
)
from .evaluation import evaluate, translations_for_latents
from .nets import predict_masks
from .train import TrainingDiverged, finetune_seg, train

log = logging.getLogger("histostargan")

DIAGNOSTIC_NOTICE = ("Synthetic images produced by a generative model. They must not be used "
                     "for diagnostic purposes.")


class ValidationError(Exception):
    pass


def _prepare_out(path, force: bool, inputs=()) -> Path:
    out = Path(path)
    for p in inputs:
        if Path(p).resolve() == out.resolve():
            raise ValidationError(f"output {out} would overwrite input {p}")
    if out.exists() and (out.is_file() or any(out.iterdir())) and not force:
        raise ValidationError(f"output {out} already exists; pass --force to overwrite")
    return out


def _load(ckpt):
    bundle, _ = load_checkpoint(ckpt)
    for m in list(bundle.ema.values()) + [bundle.nets["D"]]:
        m.eval()
    return bundle


def _domains(bundle, names) -> list[int]:
    if not names or names == ["all"]:
        return list(range(len(bundle.domain_names)))
    out = []
    for n in names:
        if n not in bundle.domain_names:
            raise ValidationError(f"unknown domain '{n}'; valid domains: {', '.join(bundle.domain_names)}")
        out.append(bundle.domain_names.index(n))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.preset)
    if not Path(args.data).is_dir():
        raise ValidationError(f"data root {args.data} does not exist")
    manifest = load_dataset(args.data)
    out = Path(args.out)
    if args.resume is None:
        _prepare_out(out, args.force, [args.data])
    train(manifest, cfg, out_dir=out, resume_from=args.resume, iterations=args.iterations,
          callback=_progress(cfg))
    return 0


def _progress(cfg):
    def cb(bundle, t, report):
        if bundle.iteration % max(1, cfg.total_iterations // 20) == 0:
            log.info("iteration %d: %s", bundle.iteration,
                     " ".join(f"{k}={v:.4f}" for k, v in report.to_dict().items()))
    return cb


def cmd_finetune(args) -> int:
    bundle = _load(args.checkpoint)
    cfg = resolve_config(args.config, args.seed) if args.config else bundle.cfg
    manifest = load_dataset(args.data)
    if args.imbalanced_ratio:
        manifest = build_imbalanced_manifest(manifest, args.imbalanced_ratio, np.random.default_rng(args.seed or 0))
    out = _prepare_out(args.out, args.force, [args.checkpoint, args.data])
    tuned = finetune_seg(bundle, manifest, epochs=args.epochs, cfg=cfg, seed=args.seed or 0)
    save_checkpoint(out, tuned, extra={"finetuned_from": str(args.checkpoint), "finetune_epochs": args.epochs})
    return 0


def cmd_translate(args) -> int:
    bundle = _load(args.checkpoint)
    if args.n_styles < 1:
        raise ValidationError("--n-styles must be >= 1")
    domains = _domains(bundle, args.domain)
    out = _prepare_out(args.out, args.force, args.inputs)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    inf = bundle.inference()
    rng = RngStream(args.seed or 0)
    size = bundle.cfg.net.img_size
    failures = 0
    for path in args.inputs:
        try:
            x = read_image(path, size=size)
        except Exception as e:  # unreadable inputs are reported and skipped
            log.error("cannot read %s: %s", path, e)
            failures += 1
            continue
        stem = Path(path).stem
        for y in domains:
            z = rng.latent.standard_normal((args.n_styles, bundle.cfg.latent_dim)).astype(np.float32)
            outs = translations_for_latents(inf["G"], inf["F"], x, y, z).numpy()
            masks = predict_masks(inf["G"], inf["Seg"], outs)
            for k, (img, m) in enumerate(zip(outs, masks)):
                name = f"{stem}__{bundle.domain_names[y]}__z{k:02d}.png"
                write_image(out / "images" / name, img)
                write_mask(out / "masks" / name, m)
    return 2 if failures else 0


def cmd_segment(args) -> int:
    bundle = _load(args.checkpoint)
    out = _prepare_out(args.out, args.force, args.inputs)
    out.mkdir(parents=True, exist_ok=True)
    inf = bundle.inference()
    failures = 0
    for path in args.inputs:
        try:
            x = read_image(path, size=bundle.cfg.net.img_size)
        except Exception as e:
            log.error("cannot read %s: %s", path, e)
            failures += 1
            continue
        write_mask(out / f"{Path(path).stem}.png", predict_masks(inf["G"], inf["Seg"], x[None])[0])
    if failures:
        log.error("%d of %d input(s) failed", failures, len(args.inputs))
    return 2 if failures else 0


def cmd_gen_dataset(args) -> int:
    if args.n_styles < 1:
        raise ValidationError("--n-styles must be >= 1")
    bundle = _load(args.checkpoint)
    source = load_dataset(args.source)
    domains = _domains(bundle, args.domain)
    out = _prepare_out(args.out, args.force, [args.source, args.checkpoint])
    inf = bundle.inference()
    rng = RngStream(args.seed or 0)
    imgs, masks, _ = source.arrays()
    records = []
    for y_new, y in enumerate(domains):
        name = bundle.domain_names[y]
        (out / name / "images").mkdir(parents=True, exist_ok=True)
        (out / name / "masks").mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(source.records):
        for y_new, y in enumerate(domains):
            name = bundle.domain_names[y]
            z = rng.latent.standard_normal((args.n_styles, bundle.cfg.latent_dim)).astype(np.float32)
            outs = translations_for_latents(inf["G"], inf["F"], imgs[i], y, z).numpy()
            for k, img in enumerate(outs):
                pid = f"{source.domains[rec.domain]}-{rec.id}-z{k:02d}"
                rel_img, rel_mask = f"{name}/images/{pid}.png", f"{name}/masks/{pid}.png"
                write_image(out / rel_img, img)
                write_mask(out / rel_mask, masks[i])
                records.append(PatchRecord(pid, rel_img, rel_mask, y_new, rec.is_positive))
    manifest = DatasetManifest(out, [bundle.domain_names[y] for y in domains], records)
    manifest.save()
    (out / "metadata.json").write_text(json.dumps({
        "notice": DIAGNOSTIC_NOTICE,
        "checkpoint": str(args.checkpoint),
        "source": str(args.source),
        "n_styles": args.n_styles,
        "seed": args.seed or 0,
        "images": len(records),
    }, indent=1))
    print(DIAGNOSTIC_NOTICE)
    return 0


def latent_grid(G, F_net, x, y: int, z: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Montage [3, rows*H, cols*W] of translations, one latent per cell."""
    outs = translations_for_latents(G, F_net, x, y, z[: rows * cols]).numpy()
    _, h, w = outs.shape[1:]
    grid = outs.reshape(rows, cols, 3, h, w).transpose(2, 0, 3, 1, 4)
    return grid.reshape(3, rows * h, cols * w)


def interpolation_frames(G, F_net, x, y: int, z0, z1, n_frames: int) -> np.ndarray:
    """Translations along the straight latent segment z0 -> z1 (inclusive)."""
    ts = np.linspace(0.0, 1.0, n_frames, dtype=np.float64)[:, None]
    z = ((1 - ts) * np.asarray(z0, np.float64) + ts * np.asarray(z1, np.float64)).astype(np.float32)
    return translations_for_latents(G, F_net, x, y, z).numpy()


def cmd_explore(args) -> int:
    bundle = _load(args.checkpoint)
    (y,) = _domains(bundle, [args.domain])
    out = _prepare_out(args.out, args.force, [args.image])
    out.mkdir(parents=True, exist_ok=True)
    inf = bundle.inference()
    x = read_image(args.image, size=bundle.cfg.net.img_size)
    rng = RngStream(args.seed or 0)
    z = rng.latent.standard_normal((args.grid * args.grid, bundle.cfg.latent_dim)).astype(np.float32)
    write_image(out / "grid.png", latent_grid(inf["G"], inf["F"], x, y, z, args.grid, args.grid))
    if args.frames:
        z0, z1 = rng.latent.standard_normal((2, bundle.cfg.latent_dim))
        frames = interpolation_frames(inf["G"], inf["F"], x, y, z0, z1, args.frames)
        (out / "frames").mkdir(exist_ok=True)
        for i, f in enumerate(frames):
            write_image(out / "frames" / f"frame_{i:04d}.png", f)
    return 0


def cmd_eval(args) -> int:
    bundles = [_load(c) for c in args.checkpoints]
    manifest = load_dataset(args.data)
    report_path = _prepare_out(args.report, args.force, [args.data])
    report = evaluate(bundles, manifest)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    table = report.format_table()
    report_path.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_toy_data(args) -> int:
    out = _prepare_out(args.out, args.force)
    sim = StainSimulatorParams.default(args.domains + (1 if args.include_unseen else 0), img_size=args.size)
    m = generate_toy_dataset(sim, args.n_pos, args.n_neg, out, np.random.default_rng(args.seed or 0))
    print(f"wrote {len(m)} patches over {len(m.domains)} domains to {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--force", action="store_true", help="allow writing into existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="histostargan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train all five networks")
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=("reference", "toy"), default=None,
                   help="defaults to use when --config is not given")
    s.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    s.add_argument("--iterations", type=int, default=None, help="stop after this many steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune the segmentation branch only")
    s.add_argument("checkpoint")
    s.add_argument("data", help="single-domain annotated dataset root")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--imbalanced-ratio", type=int, default=None,
                   help="subsample negatives to this many per positive first")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("translate", parents=[common], help="diverse stain transfer")
    s.add_argument("checkpoint")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--domain", action="append", default=None, help="target domain name (repeatable; default all)")
    s.add_argument("--n-styles", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("segment", parents=[common], help="stain-invariant segmentation")
    s.add_argument("checkpoint")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("gen-dataset", parents=[common], help="generate an annotated synthetic dataset")
    s.add_argument("checkpoint")
    s.add_argument("source", help="annotated source dataset root")
    s.add_argument("--n-styles", type=int, default=10)
    s.add_argument("--domain", action="append", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("explore", parents=[common], help="latent grid and interpolation frames")
    s.add_argument("checkpoint")
    s.add_argument("image")
    s.add_argument("--domain", required=True)
    s.add_argument("--grid", type=int, default=3)
    s.add_argument("--frames", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("eval", parents=[common], help="F1 / precision / recall report")
    s.add_argument("checkpoints", nargs="+", help="one checkpoint per repetition")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="JSON report path (a .txt table is written beside it)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("toy-data", parents=[common], help="render a simulated multi-stain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-pos", type=int, default=500)
    s.add_argument("--n-neg", type=int, default=500)
    s.add_argument("--domains", type=int, default=5)
    s.add_argument("--include-unseen", action="store_true")
    s.add_argument("--size", type=int, default=48)
    s.set_defaults(func=cmd_toy_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with torch.no_grad() if args.command not in ("train", "finetune") else contextlib.nullcontext():
            return args.func(args)
    except (ValidationError, ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, RuntimeError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
