"""Pixel-level segmentation metrics, diversity metric and table-style reports."""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import RngStream, ShapeError
from .data import DatasetManifest
from .nets import map_style, predict_masks

METRICS = ("f1", "precision", "recall")
LEVEL_NOTE = "pixel-level metrics (class 1 = glomerulus)"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f1). Nothing predicted and nothing present scores (1, 1, 1)."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class MetricReport:
    domains: list[str]
    # values[rep, domain, metric] with metrics ordered as METRICS
    values: np.ndarray
    note: str = LEVEL_NOTE
    extra: dict = field(default_factory=dict)

    @property
    def repetitions(self) -> int:
        return self.values.shape[0]

    def per_domain(self) -> dict:
        mean, std = self.values.mean(0), self.values.std(0)
        return {d: {m: (float(mean[i, j]), float(std[i, j])) for j, m in enumerate(METRICS)}
                for i, d in enumerate(self.domains)}

    def overall(self) -> dict:
        per_rep = self.values.mean(1)  # mean over domains, one value per repetition
        return {m: (float(per_rep[:, j].mean()), float(per_rep[:, j].std())) for j, m in enumerate(METRICS)}

    def to_dict(self) -> dict:
        return {
            "note": self.note,
            "repetitions": self.repetitions,
            "domains": self.domains,
            "per_domain": {d: {m: {"mean": v[0], "std": v[1]} for m, v in ms.items()}
                           for d, ms in self.per_domain().items()},
            "overall": {m: {"mean": v[0], "std": v[1]} for m, v in self.overall().items()},
            "values": self.values.tolist(),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(list(d["domains"]), np.asarray(d["values"], dtype=np.float64), d.get("note", LEVEL_NOTE))

    def format_table(self) -> str:
        per, overall = self.per_domain(), self.overall()
        names = {"f1": "F1", "precision": "Precision", "recall": "Recall"}
        head = ["Score"] + self.domains + ["Overall"]
        rows = []
        for m in METRICS:
            cells = [f"{per[d][m][0]:.3f} ({per[d][m][1]:.3f})" for d in self.domains]
            cells.append(f"{overall[m][0]:.3f} ({overall[m][1]:.3f})")
            rows.append([names[m]] + cells)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
        lines = [fmt(head), "-" * len(fmt(head))] + [fmt(r) for r in rows]
        lines.append(f"mean (std) over {self.repetitions} repetition(s); {self.note}")
        return "\n".join(lines)


def domain_confusion(G, Seg, manifest: DatasetManifest, domain: int) -> ConfusionCounts | None:
    recs = sorted((i for i, r in enumerate(manifest.records) if r.domain == domain),
                  key=lambda i: manifest.records[i].id)
    if not recs:
        return None
    imgs, masks, _ = manifest.arrays()
    pred = predict_masks(G, Seg, imgs[recs])
    total = ConfusionCounts()
    for p, t in zip(pred, masks[recs]):
        total = total + confusion(p, t)
    return total


def evaluate(models, manifest: DatasetManifest) -> MetricReport:
    """Evaluate one (G, Seg) pair per repetition on every domain of ``manifest``.

    ``models`` is a list of bundles or (G, Seg) tuples; bundles contribute
    their EMA networks.
    """
    pairs = []
    for m in models:
        if hasattr(m, "inference"):
            inf = m.inference()
            pairs.append((inf["G"], inf["Seg"]))
        else:
            pairs.append(tuple(m))
    kept, values = [], []
    for d, name in enumerate(manifest.domains):
        if not any(r.domain == d for r in manifest.records):
            warnings.warn(f"domain {name} has no records; skipped")
            continue
        kept.append(d)
    for G, Seg in pairs:
        rep = []
        for d in kept:
            p, r, f1 = prf(domain_confusion(G, Seg, manifest, d))
            rep.append((f1, p, r))
        values.append(rep)
    return MetricReport([manifest.domains[d] for d in kept], np.asarray(values, dtype=np.float64))


@torch.no_grad()
def translations_for_latents(G, F_net, x, y_target: int, z: np.ndarray) -> torch.Tensor:
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    s = map_style(F_net, z, torch.full((len(z),), int(y_target), dtype=torch.long))
    xb = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if xb.dim() == 3:
        xb = xb.unsqueeze(0)
    return G(xb.expand(len(z), *xb.shape[1:]), s)


def diversity_metric(G, F_net, x, y_target: int, n_latents: int, rng: RngStream | np.random.Generator) -> float:
    """Mean pairwise mean-|diff| between translations of ``x`` under ``n_latents`` latent codes."""
    if n_latents < 2:
        raise ValueError("diversity_metric needs n_latents >= 2")
    gen = rng.latent if isinstance(rng, RngStream) else rng
    z = gen.standard_normal((n_latents, F_net.latent_dim)).astype(np.float32)
    outs = translations_for_latents(G, F_net, x, y_target, z)
    pairs = list(itertools.combinations(range(n_latents), 2))
    return float(np.mean([(outs[i] - outs[j]).abs().mean().item() for i, j in pairs]))


class ColorStatsClassifier:
    """k-nearest-neighbour stain classifier on per-channel colour mean and std."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, images: np.ndarray, domains: np.ndarray) -> "ColorStatsClassifier":
        feats = self.features(images)
        self.scale_ = feats.std(0) + 1e-6
        self.train_ = feats / self.scale_
        self.labels_ = np.asarray(domains)
        self.classes_ = np.unique(self.labels_)
        return self

    @staticmethod
    def features(images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), 3, -1)
        return np.concatenate([x.mean(-1), x.std(-1)], axis=1)

    def predict(self, images) -> np.ndarray:
        f = self.features(images) / self.scale_
        d = ((f[:, None, :] - self.train_[None]) ** 2).sum(-1)
        nearest = self.labels_[np.argsort(d, axis=1, kind="stable")[:, : self.k]]
        votes = (nearest[..., None] == self.classes_).sum(1)
        return self.classes_[votes.argmax(1)]
