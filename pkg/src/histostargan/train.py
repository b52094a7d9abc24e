"""Optimisation loop: schedules, EMA, checkpoints and segmentation fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .core import ConfigError, RngStream, TrainConfig, sample_latent
from .data import Batch, DatasetError, DatasetManifest, augment, sample_training_batch
from .losses import (
    LossReport,
    cycle_loss,
    d_fake_loss,
    d_real_loss,
    diversity_loss,
    full_objective,
    g_adv_loss,
    r1_penalty,
    segmentation_loss,
    style_reconstruction_loss,
)
from .nets import EMA_NETWORKS, ModelBundle, segment
from .schedule import lambda_ds_at, lambda_seg_at

__all__ = [
    "lambda_ds_at",
    "lambda_seg_at",
    "ema_update",
    "make_optimizers",
    "train_step",
    "train",
    "finetune_seg",
    "TrainingDiverged",
]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


@torch.no_grad()
def ema_update(shadow, current, decay: float):
    """shadow <- decay * shadow + (1 - decay) * current, parameter by parameter."""
    s_params = list(shadow.parameters()) if hasattr(shadow, "parameters") else list(shadow)
    c_params = list(current.parameters()) if hasattr(current, "parameters") else list(current)
    if len(s_params) != len(c_params):
        raise ValueError("EMA shadow and source have different parameter counts")
    for s, c in zip(s_params, c_params):
        if s.shape != c.shape:
            raise ValueError(f"EMA shape mismatch {tuple(s.shape)} vs {tuple(c.shape)}")
        s.mul_(decay).add_(c, alpha=1.0 - decay)
    return shadow


def make_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> dict:
    lrs = {"G": cfg.lr_g, "D": cfg.lr_d, "F": cfg.lr_f, "E": cfg.lr_e, "Seg": cfg.lr_seg}
    bundle.optimizers = {
        k: torch.optim.Adam(bundle.nets[k].parameters(), lr=lr, betas=tuple(cfg.adam_betas))
        for k, lr in lrs.items()
    }
    return bundle.optimizers


def _tensors(batch: Batch):
    t = torch.from_numpy
    return (t(np.ascontiguousarray(batch.x, dtype=np.float32)), t(batch.m.astype(np.int64)), t(batch.y),
            t(batch.y_trg), t(np.ascontiguousarray(batch.x_ref, dtype=np.float32)),
            t(np.ascontiguousarray(batch.x_ref2, dtype=np.float32)),
            t(batch.z_trg), t(batch.z_trg2))


def discriminator_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig) -> tuple[float, float]:
    G, D, F, E = (bundle.nets[k] for k in ("G", "D", "F", "E"))
    x, _, y, y_trg, x_ref, _, z1, _ = _tensors(batch)
    opt = bundle.optimizers["D"]
    D.requires_grad_(True)
    use_r1 = cfg.lambda_r1 > 0
    x_in = x.clone().requires_grad_(use_r1)
    out_real = D(x_in, y)
    loss_real = d_real_loss(out_real)
    r1 = r1_penalty(out_real, x_in) if use_r1 else torch.zeros(())
    with torch.no_grad():
        fake_lat = G(x, F(z1, y_trg))
        fake_ref = G(x, E(x_ref, y_trg))
    adv_d = 2 * loss_real + d_fake_loss(D(fake_lat, y_trg)) + d_fake_loss(D(fake_ref, y_trg))
    loss = adv_d + cfg.lambda_r1 * r1
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite discriminator loss at iteration {bundle.iteration}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(adv_d.detach()), float(r1.detach())


def _generator_terms(bundle: ModelBundle, x, y, y_trg, s1, s2):
    G, D, E = (bundle.nets[k] for k in ("G", "D", "E"))
    fake = G(x, s1)
    adv_g = g_adv_loss(D(fake, y_trg))
    sty = style_reconstruction_loss(s1, E(fake, y_trg))
    fake2 = G(x, s2).detach()
    ds = diversity_loss(fake, fake2)
    rec = G(fake, E(x, y))
    cyc = cycle_loss(x, rec)
    return LossReport(adv_g=adv_g, sty=sty, ds=ds, cyc=cyc), fake


def _segmentation_terms(bundle, x, m, fake, grad: bool):
    G, Seg = bundle.nets["G"], bundle.nets["Seg"]
    with torch.set_grad_enabled(grad):
        seg_real = segmentation_loss(segment(G, Seg, x), m)
        seg_fake = segmentation_loss(segment(G, Seg, fake if grad else fake.detach()), m)
    return seg_real, seg_fake


def generator_objective(bundle: ModelBundle, batch: Batch, cfg: TrainConfig, t: int | None = None,
                        backward: bool = False) -> LossReport:
    """Latent- plus reference-guided generator-side losses for one batch.

    With ``backward`` the latent pass back-propagates into G, F, E (and Seg
    once its weight is non-zero) and the reference pass into G only.
    """
    t = bundle.iteration if t is None else t
    x, m, y, y_trg, x_ref, x_ref2, z1, z2 = _tensors(batch)
    F, E = bundle.nets["F"], bundle.nets["E"]
    lam_seg = lambda_seg_at(t, cfg)
    seg_on = cfg.net.use_seg

    with torch.set_grad_enabled(backward):
        lat, fake = _generator_terms(bundle, x, y, y_trg, F(z1, y_trg), F(z2, y_trg))
        if seg_on:
            lat.seg_real, lat.seg_fake = _segmentation_terms(bundle, x, m, fake, grad=backward and lam_seg > 0)
        loss_lat = full_objective(lat, cfg, t)
        if backward:
            loss_lat.backward()
        ref, _ = _generator_terms(bundle, x, y, y_trg, E(x_ref, y_trg), E(x_ref2, y_trg))
        loss_ref = full_objective(ref, cfg, t)
        if backward:
            torch.autograd.backward(loss_ref, inputs=list(bundle.nets["G"].parameters()))

    lat, ref = lat.as_floats(), ref.as_floats()
    report = LossReport(
        adv_g=lat.adv_g + ref.adv_g,
        sty=lat.sty + ref.sty,
        ds=lat.ds + ref.ds,
        cyc=lat.cyc + ref.cyc,
        seg_real=lat.seg_real,
        seg_fake=lat.seg_fake,
    )
    report.total_g = float(full_objective(report, cfg, t))
    return report


def generator_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig) -> LossReport:
    t = bundle.iteration
    opts = bundle.optimizers
    names = ["G", "F", "E"] + (["Seg"] if cfg.net.use_seg and lambda_seg_at(t, cfg) > 0 else [])
    for k in ("G", "F", "E", "Seg"):
        opts[k].zero_grad(set_to_none=True)
    bundle.nets["D"].requires_grad_(False)
    try:
        report = generator_objective(bundle, batch, cfg, t, backward=True)
    finally:
        bundle.nets["D"].requires_grad_(True)
    if not np.isfinite(report.total_g):
        raise TrainingDiverged(f"non-finite generator loss at iteration {t}", report)
    for k in names:
        opts[k].step()
    return report


def update_ema(bundle: ModelBundle, decay: float) -> None:
    for k in EMA_NETWORKS:
        ema_update(bundle.ema[k], bundle.nets[k], decay)


def train_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig, t: int | None = None) -> LossReport:
    """One discriminator update, one generator-side update, EMA, iteration += 1."""
    if t is not None and t != bundle.iteration:
        raise ValueError(f"train_step called with t={t} but bundle is at iteration {bundle.iteration}")
    if batch.z_trg is None or batch.z_trg2 is None:
        raise ValueError("batch needs latent codes z_trg and z_trg2")
    if bundle.optimizers is None:
        make_optimizers(bundle, cfg)
    adv_d, r1 = discriminator_step(bundle, batch, cfg)
    report = generator_step(bundle, batch, cfg)
    report.adv_d, report.r1 = adv_d, r1
    if not report.is_finite():
        raise TrainingDiverged(f"non-finite loss report at iteration {bundle.iteration}", report)
    update_ema(bundle, cfg.ema_decay)
    bundle.iteration += 1
    if cfg.finite_check_every and bundle.iteration % cfg.finite_check_every == 0:
        assert_finite_params(bundle)
    return report


def assert_finite_params(bundle: ModelBundle) -> None:
    for name, net in list(bundle.nets.items()) + [(k + "_ema", m) for k, m in bundle.ema.items()]:
        for pname, p in net.named_parameters():
            if not torch.isfinite(p).all():
                raise TrainingDiverged(f"non-finite parameter {name}.{pname} at iteration {bundle.iteration}")


def next_batch(manifest: DatasetManifest, cfg: TrainConfig, rng: RngStream, t: int) -> Batch:
    """Batch for iteration ``t``: data/augmentation keyed by (seed, t), latents from the latent substream."""
    batch = sample_training_batch(manifest, cfg.batch_size, rng.derive("data", t), cfg.augment,
                                  cfg.num_domains, aug_rng=rng.derive("augment", t))
    z = sample_latent(rng, 2 * cfg.batch_size, cfg.latent_dim)
    batch.z_trg, batch.z_trg2 = z[: cfg.batch_size], z[cfg.batch_size:]
    return batch


def _schedule_record(t, cfg):
    return {"lambda_ds": lambda_ds_at(t, cfg), "lambda_seg": lambda_seg_at(t, cfg)}


def train(manifest: DatasetManifest, cfg: TrainConfig, out_dir=None, resume_from=None,
          callback=None, iterations: int | None = None) -> ModelBundle:
    """Train from scratch (or resume) until ``cfg.total_iterations``.

    ``iterations`` stops early after that many steps in this call, which is
    how a run is interrupted in tests. Checkpoints go to
    ``out_dir/checkpoints/iter_XXXXXX`` and a JSON-lines log to
    ``out_dir/train_log.jsonl``. Inference networks of the returned bundle
    are the EMA shadows (``bundle.inference()``).
    """
    if len(manifest.domains) != cfg.num_domains:
        raise ConfigError(f"dataset has {len(manifest.domains)} domains but num_domains={cfg.num_domains}")
    if any(r.mask is None for r in manifest.records) and cfg.net.use_seg:
        raise DatasetError("segmentation training needs a fully annotated manifest")
    rng = RngStream(cfg.seed)
    if resume_from is not None:
        bundle, rng_state = load_checkpoint(resume_from, with_optimizers=True)
        if rng_state is not None:
            rng.load_state_dict(rng_state)
        bundle.cfg = cfg
    else:
        bundle = ModelBundle.build(cfg, rng, domain_names=manifest.domains)
    if bundle.optimizers is None:
        make_optimizers(bundle, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        kept = []
        if log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines()
                    if ln and json.loads(ln)["iteration"] < bundle.iteration]
        log_path.write_text("".join(ln + "\n" for ln in kept))
        log_file = log_path.open("a")

    stop = cfg.total_iterations if iterations is None else min(cfg.total_iterations, bundle.iteration + iterations)
    try:
        while bundle.iteration < stop:
            t = bundle.iteration
            batch = next_batch(manifest, cfg, rng, t)
            report = train_step(bundle, batch, cfg)
            if log_file is not None and (t % cfg.log_every == 0 or bundle.iteration == stop):
                log_file.write(json.dumps({"iteration": t, **report.to_dict(), **_schedule_record(t, cfg)}) + "\n")
            if callback is not None:
                callback(bundle, t, report)
            if out_dir is not None and (bundle.iteration % cfg.checkpoint_every == 0 or bundle.iteration == stop):
                save_checkpoint(out_dir / "checkpoints" / f"iter_{bundle.iteration:06d}", bundle, rng)
    except BaseException:
        if out_dir is not None and bundle.iteration > 0:
            save_checkpoint(out_dir / "checkpoints" / f"iter_{bundle.iteration:06d}", bundle, rng)
        raise
    finally:
        if log_file is not None:
            log_file.close()
    return bundle


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def finetune_seg(bundle: ModelBundle, manifest: DatasetManifest, epochs: int = 1, cfg: TrainConfig | None = None,
                 seed: int = 0) -> ModelBundle:
    """Fine-tune the inference segmentation branch on single-domain data with everything else frozen.

    Returns a new bundle; only ``ema['Seg']`` (the network used for
    inference) differs from the input.
    """
    cfg = cfg or bundle.cfg
    if len(manifest.used_domains()) > 1:
        raise DatasetError("fine-tuning uses real source-domain data only; manifest has "
                           f"{len(manifest.used_domains())} domains")
    out = copy.copy(bundle)
    out.ema = dict(bundle.ema)
    out.optimizers = None
    if epochs <= 0:
        return out
    seg = copy.deepcopy(bundle.ema["Seg"])
    seg.requires_grad_(True)
    encoder = bundle.ema["G"]
    opt = torch.optim.Adam(seg.parameters(), lr=cfg.lr_finetune)
    imgs, masks, _ = manifest.arrays()
    rng = RngStream(seed)
    bs = cfg.finetune_batch_size
    for epoch in range(epochs):
        order = rng.derive("data", epoch).permutation(len(imgs))
        aug_rng = rng.derive("augment", epoch)
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            xb, mb = imgs[idx].copy(), masks[idx].copy()
            for j in range(len(idx)):
                xb[j], mb[j] = augment(xb[j], mb[j], cfg.augment, aug_rng)
            x = torch.from_numpy(np.ascontiguousarray(xb, dtype=np.float32))
            with torch.no_grad():
                if seg.skip:
                    f, skips = encoder.encode(x, return_skips=True)
                else:
                    f, skips = encoder.encode(x), None
            loss = segmentation_loss(seg(f, skips), torch.from_numpy(mb.astype(np.int64)))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    seg.requires_grad_(False)
    out.ema["Seg"] = seg
    return out
