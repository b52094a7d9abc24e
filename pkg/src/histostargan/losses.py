"""Training objectives as pure tensor functions.

All image/style L1 terms are mean-reduced so the loss weights do not depend
on resolution or code length.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .core import ShapeError, TrainConfig
from .schedule import lambda_ds_at, lambda_seg_at

PROB_FLOOR = 1e-7


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    sty: float = 0.0
    ds: float = 0.0
    cyc: float = 0.0
    seg_real: float = 0.0
    seg_fake: float = 0.0
    r1: float = 0.0
    total_g: float = 0.0

    def as_floats(self) -> "LossReport":
        return LossReport(**self.to_dict())

    def to_dict(self) -> dict:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.as_tensor(float(getattr(self, f.name)))) for f in fields(self))


def _check_finite(*ts):
    for t in ts:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite input to loss")


def adversarial_loss(logit_real, logit_fake, mode: str = "nonsaturating"):
    """Return (discriminator term, generator term), batch-averaged.

    d = -[log sigmoid(real) + log(1 - sigmoid(fake))]. The generator term is
    -log sigmoid(fake) in ``nonsaturating`` mode and log(1 - sigmoid(fake))
    (the literal minimax form the generator minimises) in ``minimax`` mode.
    """
    logit_real = torch.as_tensor(logit_real)
    logit_fake = torch.as_tensor(logit_fake)
    _check_finite(logit_real, logit_fake)
    d_term = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
    if mode == "nonsaturating":
        g_term = F.softplus(-logit_fake).mean()
    elif mode == "minimax":
        g_term = -F.softplus(logit_fake).mean()
    else:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    return d_term, g_term


def d_real_loss(logit_real):
    return F.softplus(-logit_real).mean()


def d_fake_loss(logit_fake):
    return F.softplus(logit_fake).mean()


def g_adv_loss(logit_fake):
    return F.softplus(-logit_fake).mean()


def r1_penalty(logit_real, x_real):
    """0.5 * E ||grad_x D(x)||^2 on real samples."""
    grad, = torch.autograd.grad(logit_real.sum(), x_real, create_graph=True)
    return 0.5 * grad.pow(2).reshape(grad.shape[0], -1).sum(1).mean()


def _mean_abs(a, b, what):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def style_reconstruction_loss(s_target, s_recovered):
    return _mean_abs(s_target, s_recovered, "style_reconstruction_loss")


def diversity_loss(out1, out2):
    return _mean_abs(out1, out2, "diversity_loss")


def cycle_loss(x, x_rec):
    return _mean_abs(x, x_rec, "cycle_loss")


def segmentation_loss(scores, mask):
    """Mean per-pixel 2-class cross-entropy; scores [(B,) 2, H, W] unnormalised."""
    scores = torch.as_tensor(scores)
    mask = torch.as_tensor(mask).long()
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
        mask = mask.unsqueeze(0) if mask.dim() == 2 else mask
    if scores.shape[1] != 2 or scores.shape[0] != mask.shape[0] or scores.shape[2:] != mask.shape[1:]:
        raise ShapeError(f"scores {tuple(scores.shape)} do not match mask {tuple(mask.shape)}")
    if not torch.isfinite(scores).all():
        raise FloatingPointError("segmentation scores contain non-finite values")
    prob = torch.softmax(scores, dim=1).gather(1, mask.unsqueeze(1))
    return -torch.log(prob.clamp(min=PROB_FLOOR)).mean()


def full_objective(report: LossReport, cfg: TrainConfig, iteration: int):
    """Generator-side objective; the diversity term is subtracted (maximised)."""
    return (
        report.adv_g
        + cfg.lambda_sty * report.sty
        - lambda_ds_at(iteration, cfg) * report.ds
        + cfg.lambda_cyc * report.cyc
        + lambda_seg_at(iteration, cfg) * (report.seg_real + report.seg_fake)
    )
