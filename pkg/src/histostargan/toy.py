"""Desk-scale end-to-end run on simulated stains.

Trains on five simulated stains and evaluates on held-out patches of those
five plus one stain never seen in training.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .core import RngStream, TrainConfig
from .data import (
    DatasetManifest,
    StainSimulatorParams,
    build_imbalanced_manifest,
    generate_toy_dataset,
    load_dataset,
)
from .evaluation import ColorStatsClassifier, diversity_metric, evaluate, translations_for_latents
from .nets import ModelBundle
from .train import train

log = logging.getLogger(__name__)

TRAIN_DOMAINS = 5


def ensure_dataset(root, params, n_pos, n_neg, seed, domains=None) -> DatasetManifest:
    root = Path(root)
    if (root / "manifest.json").is_file():
        return load_dataset(root)
    return generate_toy_dataset(params, n_pos, n_neg, root, np.random.default_rng(seed), domains=domains)


@torch.no_grad()
def cycle_l1(nets: dict, probe: dict) -> float:
    """Mean |x - G(G(x, F(z, y~)), E(x, y))| on a fixed probe batch."""
    G, F, E = nets["G"], nets["F"], nets["E"]
    fake = G(probe["x"], F(probe["z"], probe["y_trg"]))
    rec = G(fake, E(probe["x"], probe["y"]))
    return float((probe["x"] - rec).abs().mean())


@torch.no_grad()
def bottleneck_gap(G, pairs: torch.Tensor) -> float:
    """Relative L1 gap between bottlenecks of the same geometry under different stains.

    ``pairs`` is [P, K, 3, H, W]; the reference is stain 0.
    """
    p, k = pairs.shape[:2]
    f = G.encode(pairs.reshape(p * k, *pairs.shape[2:])).reshape(p, k, -1)
    ref = f[:, :1]
    return float((f[:, 1:] - ref).abs().mean() / ref.abs().mean())


def _probe(heldout: DatasetManifest, num_domains: int, latent_dim: int, n: int = 16, seed: int = 123):
    imgs, _, doms = heldout.arrays()
    rng = np.random.default_rng(seed)
    keep = np.flatnonzero(doms < num_domains)
    idx = rng.choice(keep, size=n, replace=False)
    return {
        "x": torch.from_numpy(imgs[idx]),
        "y": torch.from_numpy(doms[idx]),
        "y_trg": torch.from_numpy(rng.integers(0, num_domains, size=n)),
        "z": torch.from_numpy(rng.standard_normal((n, latent_dim)).astype(np.float32)),
    }


def _paired_stains(heldout: DatasetManifest, num_domains: int, n: int = 8) -> torch.Tensor:
    imgs, _, doms = heldout.arrays()
    ids = sorted({r.id for r in heldout.records})[:n]
    index = {(r.id, r.domain): i for i, r in enumerate(heldout.records)}
    return torch.from_numpy(np.stack([[imgs[index[(pid, d)]] for d in range(num_domains)] for pid in ids]))


def translation_checks(bundle: ModelBundle, heldout: DatasetManifest, n_sources: int = 8,
                       n_latents: int = 10, seed: int = 7) -> dict:
    """Diversity per target domain and colour-classifier agreement of translations."""
    k = bundle.cfg.num_domains
    inf = bundle.inference()
    G, F = inf["G"], inf["F"]
    imgs, _, doms = heldout.arrays()
    train_mask = doms < k
    clf = ColorStatsClassifier().fit(imgs[train_mask], doms[train_mask])
    rng = np.random.default_rng(seed)
    sources = rng.choice(np.flatnonzero(train_mask), size=n_sources, replace=False)
    diversity, hits, total = {}, 0, 0
    for y in range(k):
        div = [diversity_metric(G, F, imgs[i], y, n_latents, rng) for i in sources]
        diversity[bundle.domain_names[y]] = float(np.mean(div))
        for i in sources:
            z = rng.standard_normal((n_latents, F.latent_dim)).astype(np.float32)
            out = translations_for_latents(G, F, imgs[i], y, z).numpy()
            hits += int((clf.predict(out) == y).sum())
            total += len(out)
    return {"diversity": diversity, "color_accuracy": hits / total}


def run_toy_experiment(workdir, cfg: TrainConfig | None = None, n_train: int = 500, n_heldout: int = 40,
                       finetune_seeds=(0, 1, 2), quiet: bool = False) -> dict:
    """Full desk-scale pipeline; returns every measured quantity as plain numbers."""
    from .checkpoint import file_hashes, load_checkpoint, save_checkpoint
    from .cli import main as cli_main

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or TrainConfig.toy()
    k = cfg.num_domains
    sim = StainSimulatorParams.default(k + 1, img_size=cfg.net.img_size)
    train_set = ensure_dataset(workdir / "data" / "train", sim, n_train, n_train, seed=1, domains=range(k))
    heldout = ensure_dataset(workdir / "data" / "heldout", sim, n_heldout, n_heldout, seed=2)
    source = ensure_dataset(workdir / "data" / "source", sim, 60, 480, seed=3, domains=[0])
    imbalanced = build_imbalanced_manifest(source, 7, np.random.default_rng(4))

    probe = _probe(heldout, k, cfg.latent_dim)
    stains = _paired_stains(heldout, k)
    tracked = {}

    def on_step(bundle, t, report):
        if bundle.iteration == 100:
            tracked["cycle_l1_100"] = cycle_l1(bundle.nets, probe)
            tracked["bottleneck_gap_100"] = bottleneck_gap(bundle.nets["G"], stains)
        if not quiet and bundle.iteration % 100 == 0:
            log.info("iter %d %s", bundle.iteration,
                     " ".join(f"{k}={v:.3f}" for k, v in report.to_dict().items()))

    run_dir = workdir / "run"
    ckpt_final = run_dir / "checkpoints" / f"iter_{cfg.total_iterations:06d}"
    tracked_file = workdir / "tracked.json"
    t0 = time.time()
    if (ckpt_final / "checkpoint.json").is_file() and tracked_file.is_file():
        # a finished run in this workdir is evaluated again rather than retrained
        bundle, _ = load_checkpoint(ckpt_final)
        tracked = json.loads(tracked_file.read_text())
    else:
        bundle = train(train_set, cfg, out_dir=run_dir, callback=on_step)
        tracked_file.write_text(json.dumps(tracked))
    results = {"train_seconds": time.time() - t0, "iterations": bundle.iteration}
    results["cycle_l1_100"] = tracked.get("cycle_l1_100")
    results["cycle_l1_end"] = cycle_l1(bundle.nets, probe)
    results["cycle_l1_end_ema"] = cycle_l1(bundle.inference(), probe)
    results["bottleneck_gap_100"] = tracked.get("bottleneck_gap_100")
    results["bottleneck_gap_end"] = bottleneck_gap(bundle.nets["G"], stains)

    report = evaluate([bundle], heldout)
    results["seg_f1"] = {d: v["f1"][0] for d, v in report.per_domain().items()}
    results["seg_table"] = report.format_table()
    results["unseen_domain"] = heldout.domains[-1]
    results.update(translation_checks(bundle, heldout))

    # fine-tuning through the CLI so the on-disk freeze contract is what gets checked
    before = report.overall()["f1"][0]
    ft = []
    for seed in finetune_seeds:
        out = workdir / f"finetune_seed{seed}"
        code = cli_main(["finetune", str(ckpt_final), str(source.root), "--out", str(out), "--seed", str(seed),
                         "--force", "--imbalanced-ratio", "7"])
        a, b = file_hashes(ckpt_final), file_hashes(out)
        changed = sorted(f for f in a if a[f] != b[f])
        tuned, _ = load_checkpoint(out)
        after_report = evaluate([tuned], heldout)
        ft.append({"seed": seed, "exit": code, "changed_files": changed,
                   "f1_before": before, "f1_after": after_report.overall()["f1"][0],
                   "per_domain_after": {d: v["f1"][0] for d, v in after_report.per_domain().items()}})
    results["finetune"] = ft
    results["imbalanced_counts"] = {"pos": sum(r.is_positive for r in imbalanced.records),
                                    "neg": sum(not r.is_positive for r in imbalanced.records)}
    (workdir / "results.json").write_text(json.dumps(results, indent=1))
    return results
