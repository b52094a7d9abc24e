"""Datasets: synthetic multi-stain patches, manifests, sampling and augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import AUGMENT_OPS, AugmentationConfig, EmptyRequestError

MANIFEST_NAME = "manifest.json"
IMAGE_EXT = ".png"


class DatasetError(ValueError):
    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


# --------------------------------------------------------------------------
# image <-> file conversion


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[3,H,W] in [-1,1] -> [H,W,3] uint8."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1, 1)
    return np.round((x + 1) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(a: np.ndarray) -> np.ndarray:
    """[H,W,3] uint8 -> [3,H,W] float32 in [-1,1]."""
    return (np.asarray(a, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def write_image(path, x) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x), mode="RGB").save(path, format="PNG")


def read_image(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return from_uint8(np.asarray(im))


def write_mask(path, m) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class PatchRecord:
    id: str
    image: str  # relative to the manifest root
    mask: str | None
    domain: int
    is_positive: bool


@dataclass
class DatasetManifest:
    root: Path
    domains: list[str]
    records: list[PatchRecord]
    _arrays: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self):
        return len(self.records)

    def counts(self) -> dict[tuple[int, bool], int]:
        out: dict[tuple[int, bool], int] = {}
        for r in self.records:
            out[(r.domain, r.is_positive)] = out.get((r.domain, r.is_positive), 0) + 1
        return out

    def domain_counts(self) -> list[int]:
        return [sum(1 for r in self.records if r.domain == d) for d in range(len(self.domains))]

    def is_balanced(self) -> bool:
        c = self.counts()
        return all(c.get((d, True), 0) == c.get((d, False), 0) for d in range(len(self.domains)))

    def used_domains(self) -> list[int]:
        return sorted({r.domain for r in self.records})

    def subset(self, domains) -> "DatasetManifest":
        """Keep the given domain indices (or names), re-indexed in the given order."""
        idx = [self.domains.index(d) if isinstance(d, str) else int(d) for d in domains]
        remap = {old: new for new, old in enumerate(idx)}
        recs = [PatchRecord(r.id, r.image, r.mask, remap[r.domain], r.is_positive)
                for r in self.records if r.domain in remap]
        return DatasetManifest(self.root, [self.domains[i] for i in idx], recs)

    def validate(self) -> None:
        problems = []
        for r in self.records:
            if not (self.root / r.image).is_file():
                problems.append(f"missing image {self.root / r.image}")
            if r.mask is None:
                problems.append(f"record {r.image} has no mask")
            elif not (self.root / r.mask).is_file():
                problems.append(f"missing mask {self.root / r.mask}")
        if problems:
            raise DatasetError(f"{len(problems)} invalid record(s): " + "; ".join(problems[:5]), problems)

    def to_dict(self) -> dict:
        return {
            "domains": list(self.domains),
            "records": [
                {"id": r.id, "image": r.image, "mask": r.mask, "domain": r.domain, "is_positive": r.is_positive}
                for r in self.records
            ],
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def from_dict(cls, root, data) -> "DatasetManifest":
        recs = [PatchRecord(d["id"], d["image"], d.get("mask"), int(d["domain"]), bool(d["is_positive"]))
                for d in data["records"]]
        return cls(Path(root), list(data["domains"]), recs)

    def arrays(self):
        """(images [N,3,H,W] float32, masks [N,H,W] uint8, domains [N]) loaded once."""
        if self._arrays is None:
            imgs = np.stack([read_image(self.root / r.image) for r in self.records])
            masks = np.stack([read_mask(self.root / r.mask) if r.mask else
                              np.zeros(imgs.shape[-2:], np.uint8) for r in self.records])
            doms = np.array([r.domain for r in self.records], dtype=np.int64)
            self._arrays = (imgs, masks, doms)
        return self._arrays


def load_dataset(root) -> DatasetManifest:
    """Load ``root/manifest.json`` or, failing that, import the directory layout."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if (root / MANIFEST_NAME).is_file():
        m = DatasetManifest.from_dict(root, json.loads((root / MANIFEST_NAME).read_text()))
        m.validate()
        return m
    return import_pretranslated(root)


def import_pretranslated(root) -> DatasetManifest:
    """Index an externally translated dataset laid out as root/<domain>/{images,masks}/<id>.png."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    domains = sorted(p.name for p in root.iterdir() if (p / "images").is_dir())
    if not domains:
        raise DatasetError(f"no <domain>/images directories under {root}")
    records, problems = [], []
    for d, name in enumerate(domains):
        for img in sorted((root / name / "images").iterdir()):
            if not img.is_file():
                continue
            mask = root / name / "masks" / (img.stem + IMAGE_EXT)
            if not mask.is_file():
                problems.append(f"missing mask for {img} (expected {mask})")
                continue
            m = read_mask(mask)
            records.append(PatchRecord(img.stem, str(img.relative_to(root)), str(mask.relative_to(root)),
                                       d, bool(m.any())))
    if problems:
        raise DatasetError(f"{len(problems)} record(s) without masks: " + "; ".join(problems), problems)
    return DatasetManifest(root, domains, records)


def build_imbalanced_manifest(source: DatasetManifest, neg_ratio: int = 7, rng=None) -> DatasetManifest:
    """Keep every positive, draw ``neg_ratio`` negatives per positive in each domain."""
    rng = rng if rng is not None else np.random.default_rng(0)
    records = []
    for d in source.used_domains():
        pos = [r for r in source.records if r.domain == d and r.is_positive]
        neg = [r for r in source.records if r.domain == d and not r.is_positive]
        want = neg_ratio * len(pos)
        if want > len(neg):
            raise DatasetError(
                f"domain {source.domains[d]}: need {want} negatives for {len(pos)} positives "
                f"at ratio {neg_ratio}, only {len(neg)} available")
        pick = sorted(rng.choice(len(neg), size=want, replace=False))
        records += pos + [neg[i] for i in pick]
    return DatasetManifest(source.root, list(source.domains), records)


# --------------------------------------------------------------------------
# synthetic stain simulator


# base render colours (RGB in [0,1]) before domain recolouring
_BG = np.array([0.86, 0.66, 0.80])
_NUCLEUS = np.array([0.30, 0.16, 0.45])
_CAPSULE = np.array([0.97, 0.95, 0.97])
_TUFT = np.array([0.68, 0.36, 0.62])
_TUBULE = np.array([0.78, 0.50, 0.72])

_DOMAINS = {
    "pas": (np.eye(3), np.zeros(3)),
    "jones": (np.array([[0.55, 0.10, 0.05], [0.05, 0.55, 0.05], [0.10, 0.15, 0.55]]), np.array([0.02, 0.02, 0.08])),
    "sirius": (np.array([[0.70, 0.20, 0.00], [0.40, 0.40, -0.10], [-0.15, 0.10, 0.35]]), np.array([0.20, 0.12, 0.05])),
    "cd68": (np.array([[0.40, 0.05, 0.20], [0.10, 0.50, 0.20], [0.05, 0.25, 0.65]]), np.array([0.05, 0.08, 0.15])),
    "cd34": (np.array([[0.85, 0.05, 0.05], [0.10, 0.70, 0.15], [0.10, -0.10, 0.30]]), np.array([0.08, 0.10, 0.25])),
    "novel": (np.array([[0.35, 0.20, 0.10], [0.20, 0.60, 0.10], [0.10, 0.25, 0.30]]), np.array([0.10, 0.12, 0.10])),
}


@dataclass
class StainSimulatorParams:
    names: list[str]
    matrices: np.ndarray  # [K,3,3]
    offsets: np.ndarray  # [K,3]
    img_size: int = 48
    texture_amp: float = 0.06
    nuclei_density: float = 0.004
    jitter: float = 0.03
    max_tubules: int = 3

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.matrices.shape != (len(self.names), 3, 3) or self.offsets.shape != (len(self.names), 3):
            raise ValueError("need one 3x3 matrix and one offset per domain")
        for name, m in zip(self.names, self.matrices):
            if abs(np.linalg.det(m)) < 1e-6:
                raise ValueError(f"mixing matrix for {name} is not invertible")

    @classmethod
    def default(cls, n_domains: int = 6, **kw) -> "StainSimulatorParams":
        names = list(_DOMAINS)[:n_domains]
        return cls(names, np.stack([_DOMAINS[n][0] for n in names]), np.stack([_DOMAINS[n][1] for n in names]), **kw)

    def to_dict(self) -> dict:
        return {"names": self.names, "matrices": self.matrices.tolist(), "offsets": self.offsets.tolist(),
                "img_size": self.img_size, "texture_amp": self.texture_amp,
                "nuclei_density": self.nuclei_density, "jitter": self.jitter, "max_tubules": self.max_tubules}


def apply_stain(base: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Recolour an [H,W,3] image in [0,1]: every pixel v -> clip(M v + b)."""
    return np.clip(base @ np.asarray(matrix).T + offset, 0.0, 1.0)


def _ellipse(shape, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def render_base(params: StainSimulatorParams, positive: bool, rng: np.random.Generator):
    """Render one stain-free patch: ([H,W,3] in [0,1], exact mask [H,W])."""
    n = params.img_size
    img = np.tile(_BG, (n, n, 1))
    if params.texture_amp > 0:
        tex = gaussian_filter(rng.standard_normal((n, n)), sigma=max(1.0, n / 16))
        tex = tex / (np.abs(tex).max() + 1e-12) * params.texture_amp
        img = img + tex[..., None] * np.array([1.0, 1.2, 1.0])
    mask = np.zeros((n, n), dtype=bool)
    tuft = np.zeros((n, n), dtype=bool)
    if positive:
        r = n * rng.uniform(0.17, 0.28)
        ry, rx = r * rng.uniform(0.8, 1.0), r * rng.uniform(0.8, 1.0)
        cy, cx = rng.uniform(0.3 * n, 0.7 * n, size=2)
        theta = rng.uniform(0, math.pi)
        mask = _ellipse((n, n), cy, cx, ry, rx, theta)
        ring = max(1.5, 0.18 * min(ry, rx))
        tuft = _ellipse((n, n), cy, cx, ry - ring, rx - ring, theta)
    for _ in range(int(rng.integers(0, params.max_tubules + 1))):
        r = n * rng.uniform(0.06, 0.11)
        cy, cx = rng.uniform(0, n, size=2)
        tub = _ellipse((n, n), cy, cx, r, r * rng.uniform(0.7, 1.0), rng.uniform(0, math.pi)) & ~mask
        lumen = _ellipse((n, n), cy, cx, 0.45 * r, 0.45 * r, 0.0) & ~mask
        img[tub] = _TUBULE
        img[lumen] = _CAPSULE * 0.95
    img[mask] = _CAPSULE
    img[tuft] = _TUFT
    if params.nuclei_density > 0:
        density = np.full((n, n), params.nuclei_density)
        density[tuft] *= 12
        centres = rng.random((n, n)) < density
        yy, xx = np.nonzero(centres)
        grid_y, grid_x = np.mgrid[:n, :n]
        for y, x in zip(yy, xx):
            rad = rng.uniform(0.8, 1.4)
            dot = (grid_y - y) ** 2 + (grid_x - x) ** 2 <= rad * rad
            inside = dot & (tuft if tuft[y, x] else ~mask)
            img[inside] = _NUCLEUS
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def stain_patch(base: np.ndarray, params: StainSimulatorParams, domain: int, rng: np.random.Generator | None = None):
    """Recolour a base render into ``domain``; per-patch jitter when ``rng`` is given."""
    m, b = params.matrices[domain], params.offsets[domain]
    if rng is not None and params.jitter > 0:
        m = m * (1.0 + params.jitter * rng.standard_normal())
        b = b + params.jitter * rng.standard_normal(3)
    return apply_stain(base, m, b)


def generate_toy_dataset(params: StainSimulatorParams, n_pos: int, n_neg: int, root, rng: np.random.Generator,
                         domains=None) -> DatasetManifest:
    """Render ``n_pos + n_neg`` base patches and write them recoloured into every domain.

    Every domain receives the same geometry (as when a single annotated
    stain is translated into all targets), so masks are shared.
    """
    if n_pos < 1 or n_neg < 1:
        raise EmptyRequestError("generate_toy_dataset needs n_pos >= 1 and n_neg >= 1")
    domains = list(range(len(params.names))) if domains is None else list(domains)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for d in domains:
        (root / params.names[d] / "images").mkdir(parents=True, exist_ok=True)
        (root / params.names[d] / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_pos + n_neg):
        positive = i < n_pos
        base, mask = render_base(params, positive, rng)
        pid = f"{i:05d}"
        for k, d in enumerate(domains):
            name = params.names[d]
            img01 = stain_patch(base, params, d, rng)
            rel_img = f"{name}/images/{pid}{IMAGE_EXT}"
            rel_mask = f"{name}/masks/{pid}{IMAGE_EXT}"
            write_image(root / rel_img, img01.transpose(2, 0, 1) * 2 - 1)
            write_mask(root / rel_mask, mask)
            records.append(PatchRecord(pid, rel_img, rel_mask, k, positive))
    manifest = DatasetManifest(root, [params.names[d] for d in domains], records)
    manifest.save()
    (root / "simulator.json").write_text(json.dumps(params.to_dict(), indent=1))
    return manifest


# --------------------------------------------------------------------------
# augmentation

GEOMETRIC_OPS = ("elastic", "rotate", "shift", "scale", "hflip", "vflip")
PHOTOMETRIC_OPS = ("brightness", "contrast", "noise")
ALL_OPS = AUGMENT_OPS


def sample_augmentation(cfg: AugmentationConfig, rng: np.random.Generator, shape) -> dict | None:
    """Draw one augmentation plan; ``None`` when the pipeline does not run.

    The number of draws is fixed, so the generator advances identically
    whatever fires.
    """
    run = rng.random() < cfg.pipeline_prob
    fires = rng.random(len(ALL_OPS)) < cfg.op_prob
    h, w = shape
    plan = {
        "angle": rng.uniform(*cfg.rotation_range),
        "shift": rng.uniform(*cfg.shift_range, size=2),
        "scale": rng.uniform(*cfg.scale_range),
        "brightness": rng.uniform(*cfg.brightness_range) * (1 if rng.random() < 0.5 else -1),
        "contrast": rng.uniform(*cfg.contrast_range),
        "noise_sigma": rng.uniform(*cfg.noise_sigma_range),
        "noise_seed": int(rng.integers(2**63)),
        "elastic": rng.uniform(-1, 1, size=(2, h, w)),
    }
    if not run:
        return None
    enabled = set(cfg.ops)
    plan["ops"] = {op for op, f in zip(ALL_OPS, fires) if f and op in enabled}
    return plan


def _source_coords(plan: dict, cfg: AugmentationConfig, shape):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    py, px = yy - cy, xx - cx
    ops = plan["ops"]
    if "shift" in ops:
        py = py - plan["shift"][0]
        px = px - plan["shift"][1]
    if "scale" in ops:
        py, px = py / plan["scale"], px / plan["scale"]
    if "rotate" in ops:
        t = math.radians(plan["angle"])
        c, s = math.cos(t), math.sin(t)
        py, px = c * py - s * px, s * py + c * px
    sy, sx = py + cy, px + cx
    if "elastic" in ops and cfg.elastic_alpha > 0:
        disp = np.stack([gaussian_filter(plan["elastic"][i], cfg.elastic_sigma, mode="reflect") for i in range(2)])
        disp = disp / (np.abs(disp).max() + 1e-12) * cfg.elastic_alpha
        sy, sx = sy + disp[0], sx + disp[1]
    return np.stack([sy, sx])


def apply_geometric(x: np.ndarray, m: np.ndarray, plan: dict, cfg: AugmentationConfig):
    """Warp image [3,H,W] and mask [H,W] with one shared coordinate map.

    The mask is warped by bilinear interpolation of its indicator followed
    by a 0.5 threshold, so it stays binary and agrees exactly with a
    thresholded warp of an image built from the mask.
    """
    ops = plan["ops"]
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if "hflip" in ops:
        x, m = x[:, :, ::-1], m[:, ::-1]
    if "vflip" in ops:
        x, m = x[:, ::-1, :], m[::-1, :]
    if ops & {"elastic", "rotate", "shift", "scale"}:
        coords = _source_coords(plan, cfg, m.shape)
        x = np.stack([map_coordinates(c, coords, order=1, mode="reflect") for c in x])
        m = map_coordinates(m, coords, order=1, mode="reflect")
    return np.ascontiguousarray(x), (m > 0.5).astype(np.uint8)


def apply_photometric(x: np.ndarray, plan: dict) -> np.ndarray:
    ops = plan["ops"]
    if not ops & set(PHOTOMETRIC_OPS):
        return x
    v = (np.asarray(x, dtype=np.float64) + 1) / 2
    if "brightness" in ops:
        v = v + plan["brightness"]
    if "contrast" in ops:
        mean = v.mean()
        v = (v - mean) * plan["contrast"] + mean
    if "noise" in ops:
        v = v + np.random.default_rng(plan["noise_seed"]).normal(0.0, plan["noise_sigma"], size=v.shape)
    return np.clip(v, 0, 1) * 2 - 1


def augment(x: np.ndarray, m: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    """Randomly augment an image/mask pair; geometry is shared, photometry is image-only."""
    plan = sample_augmentation(cfg, rng, np.asarray(m).shape)
    if plan is None or not plan["ops"]:
        return np.array(x, copy=True), np.array(m, copy=True)
    x2, m2 = apply_geometric(x, m, plan, cfg)
    x2 = apply_photometric(x2, plan)
    return x2.astype(np.asarray(x).dtype), m2


# --------------------------------------------------------------------------
# batch sampling


@dataclass
class Batch:
    x: np.ndarray  # [B,3,H,W]
    m: np.ndarray  # [B,H,W]
    y: np.ndarray  # [B] source domains
    y_trg: np.ndarray  # [B] random target domains
    x_ref: np.ndarray  # [B,3,H,W] references from y_trg
    x_ref2: np.ndarray
    z_trg: np.ndarray | None = None
    z_trg2: np.ndarray | None = None

    def __len__(self):
        return len(self.y)


def sample_training_batch(manifest: DatasetManifest, batch: int, rng: np.random.Generator,
                          aug: AugmentationConfig | None = None, num_domains: int | None = None,
                          aug_rng: np.random.Generator | None = None) -> Batch:
    """Uniformly sample ``batch`` annotated records plus two references per random target domain."""
    aug_rng = rng if aug_rng is None else aug_rng
    if len(manifest) == 0:
        raise DatasetError("cannot sample from an empty manifest")
    imgs, masks, doms = manifest.arrays()
    k = num_domains or len(manifest.domains)
    by_domain = [np.flatnonzero(doms == d) for d in range(k)]
    present = [d for d in range(k) if len(by_domain[d])]
    idx = rng.integers(0, len(imgs), size=batch)
    y_trg = np.asarray(present)[rng.integers(0, len(present), size=batch)]
    ref1 = np.array([by_domain[d][rng.integers(len(by_domain[d]))] for d in y_trg])
    ref2 = np.array([by_domain[d][rng.integers(len(by_domain[d]))] for d in y_trg])
    x, m = imgs[idx].copy(), masks[idx].copy()
    xr1, xr2 = imgs[ref1].copy(), imgs[ref2].copy()
    if aug is not None:
        for i in range(batch):
            x[i], m[i] = augment(x[i], m[i], aug, aug_rng)
            xr1[i], _ = augment(xr1[i], masks[ref1[i]], aug, aug_rng)
            xr2[i], _ = augment(xr2[i], masks[ref2[i]], aug, aug_rng)
    return Batch(x, m, doms[idx].copy(), y_trg.astype(np.int64), xr1, xr2)
