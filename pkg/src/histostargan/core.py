"""Shared types, configuration and seeded randomness."""

from __future__ import annotations

import copy
import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class EmptyRequestError(ValueError):
    pass


# --------------------------------------------------------------------------
# array validators (patches and masks are plain arrays / tensors)


def check_patch(x, down_depth: int | None = None) -> None:
    """Validate a [C=3, H, W] (or batched [B, 3, H, W]) image in [-1, 1]."""
    arr = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x)
    if arr.ndim not in (3, 4) or arr.shape[-3] != 3:
        raise ShapeError(f"expected [3,H,W] or [B,3,H,W] image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min(initial=0) < -1 or arr.max(initial=0) > 1:
        raise ValueError("image values outside [-1, 1]")
    if down_depth is not None:
        step = 2**down_depth
        h, w = arr.shape[-2:]
        if h % step or w % step:
            raise ShapeError(f"spatial size {h}x{w} not divisible by 2^{down_depth}={step}")


def check_mask(m, shape: tuple[int, int] | None = None) -> None:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be [H,W], got {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"mask shape {arr.shape} does not match image {tuple(shape)}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask contains labels other than 0/1")


def check_domain(y, num_domains: int) -> None:
    ys = np.atleast_1d(np.asarray(y.detach().cpu() if hasattr(y, "detach") else y))
    if ys.size and (ys.min() < 0 or ys.max() >= num_domains):
        raise DomainError(f"domain label(s) {ys.tolist()} outside [0, {num_domains})")


# --------------------------------------------------------------------------
# randomness

SUBSTREAMS = ("data", "latent", "augment", "init")


class RngStream:
    """Named, mutually independent numpy generators derived from one seed.

    Each substream owns its own bit generator, so drawing from ``augment``
    never shifts ``latent``. ``derive`` gives stateless generators keyed by
    extra integers (used for per-batch / per-worker data streams).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens = {name: np.random.default_rng(self._seq(name)) for name in SUBSTREAMS}

    def _seq(self, name: str, *keys: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()), *keys))

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._gens[name]

    @property
    def latent(self) -> np.random.Generator:
        return self._gens["latent"]

    @property
    def data(self) -> np.random.Generator:
        return self._gens["data"]

    @property
    def augment(self) -> np.random.Generator:
        return self._gens["augment"]

    @property
    def init(self) -> np.random.Generator:
        return self._gens["init"]

    def derive(self, name: str, *keys: int) -> np.random.Generator:
        return np.random.default_rng(self._seq(name, *(int(k) for k in keys)))

    def state_dict(self) -> dict:
        return {"seed": self.seed, "streams": {k: g.bit_generator.state for k, g in self._gens.items()}}

    def load_state_dict(self, state: dict) -> None:
        if int(state["seed"]) != self.seed:
            raise ValueError(f"rng state was saved for seed {state['seed']}, not {self.seed}")
        for k, st in state["streams"].items():
            self._gens[k].bit_generator.state = st


def sample_latent(rng: RngStream, n: int, latent_dim: int = 16) -> np.ndarray:
    """Draw ``n`` i.i.d. standard-normal latent codes, shape [n, latent_dim]."""
    if n < 1:
        raise EmptyRequestError("sample_latent needs n >= 1")
    return rng.latent.standard_normal((n, latent_dim)).astype(np.float32)


# --------------------------------------------------------------------------
# configuration


@dataclass
class NetConfig:
    img_size: int = 512
    base_channels: int = 32
    max_channels: int = 512
    down_depth: int = 4  # generator downsampling depth L
    bottleneck_blocks: int = 2
    disc_depth: int = 7  # downsampling blocks in D / E trunks
    mapping_hidden: int = 512
    mapping_shared_layers: int = 4
    mapping_head_layers: int = 3
    seg_skip: bool = False
    use_seg: bool = True

    @classmethod
    def toy(cls) -> "NetConfig":
        return cls(
            img_size=48,
            base_channels=16,
            max_channels=64,
            down_depth=2,
            bottleneck_blocks=2,
            disc_depth=3,
            mapping_hidden=64,
            mapping_shared_layers=2,
            mapping_head_layers=1,
        )


AUGMENT_OPS = ("elastic", "rotate", "shift", "scale", "hflip", "vflip", "brightness", "contrast", "noise")


@dataclass
class AugmentationConfig:
    pipeline_prob: float = 0.5
    op_prob: float = 0.5
    elastic_sigma: float = 10.0
    elastic_alpha: float = 10.0  # max displacement in pixels
    rotation_range: tuple[float, float] = (0.0, 180.0)
    shift_range: tuple[float, float] = (-5.0, 5.0)
    scale_range: tuple[float, float] = (0.95, 1.0)
    brightness_range: tuple[float, float] = (0.0, 0.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma_range: tuple[float, float] = (0.0, 0.01)
    ops: tuple[str, ...] = AUGMENT_OPS

    def validate(self) -> None:
        for name in ("pipeline_prob", "op_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {v}")
        for name in ("rotation_range", "shift_range", "scale_range", "brightness_range",
                     "contrast_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment.{name} has lower bound above upper bound")
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            raise ConfigError(f"augment.ops contains unknown op(s) {sorted(unknown)}")
        if self.elastic_sigma <= 0 or self.elastic_alpha < 0:
            raise ConfigError("augment.elastic_sigma must be > 0 and elastic_alpha >= 0")


@dataclass
class TrainConfig:
    preset: str = "reference"
    lambda_sty: float = 1.0
    lambda_ds: float = 1.0
    lambda_cyc: float = 1.0
    lambda_seg: float = 5.0
    lambda_r1: float = 1.0
    total_iterations: int = 100_000
    ds_decay_iterations: int = 100_000
    seg_warmup_iterations: int = 10_000
    ema_decay: float = 0.999
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lr_e: float = 1e-4
    lr_f: float = 1e-6
    lr_seg: float = 1e-5
    lr_finetune: float = 1e-4
    finetune_batch_size: int = 8
    adam_betas: tuple[float, float] = (0.0, 0.99)
    batch_size: int = 8
    num_domains: int = 5
    latent_dim: int = 16
    style_dim: int = 64
    checkpoint_every: int = 1000
    log_every: int = 1
    finite_check_every: int = 100
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentationConfig = field(default_factory=lambda: AugmentationConfig())

    @classmethod
    def toy(cls) -> "TrainConfig":
        return cls(
            preset="toy",
            total_iterations=3000,
            ds_decay_iterations=3000,
            seg_warmup_iterations=200,
            ema_decay=0.99,
            lr_f=1e-5,
            lr_seg=1e-4,
            checkpoint_every=1000,
            net=NetConfig.toy(),
            augment=AugmentationConfig(elastic_alpha=1.0, shift_range=(-2.0, 2.0)),
        )

    def validate(self) -> None:
        for name in ("lambda_sty", "lambda_ds", "lambda_cyc", "lambda_seg", "lambda_r1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.seg_warmup_iterations > self.total_iterations:
            raise ConfigError("seg_warmup_iterations must not exceed total_iterations")
        for name in ("total_iterations", "ds_decay_iterations", "batch_size", "num_domains",
                     "latent_dim", "style_dim", "checkpoint_every", "finetune_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_g", "lr_d", "lr_e", "lr_f", "lr_seg", "lr_finetune"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        step = 2**self.net.down_depth
        if self.net.img_size % step:
            raise ConfigError(f"net.img_size must be divisible by 2^down_depth={step}")
        if self.net.img_size % 2**self.net.disc_depth:
            raise ConfigError(f"net.img_size must be divisible by 2^disc_depth")
        self.augment.validate()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


PRESETS = {"reference": TrainConfig, "toy": TrainConfig.toy}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _apply(target, data: dict, prefix: str = "") -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{prefix}{key}' must be a mapping")
            _apply(current, value, prefix=f"{prefix}{key}.")
        elif isinstance(current, tuple) and all(isinstance(c, str) for c in current):
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"config key '{prefix}{key}' must be a list of names")
            setattr(target, key, tuple(value))
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"config key '{prefix}{key}' must be a list of {len(current)} numbers")
            setattr(target, key, tuple(type(c)(v) for c, v in zip(current, value)))
        elif isinstance(current, bool):
            setattr(target, key, bool(value))
        elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{prefix}{key}' must be numeric, got {value!r}")
        elif isinstance(current, int) and not isinstance(current, bool):
            if float(value) != int(value):
                raise ConfigError(f"config key '{prefix}{key}' must be an integer")
            setattr(target, key, int(value))
        elif isinstance(current, float):
            setattr(target, key, float(value))
        else:
            setattr(target, key, value)


def config_from_dict(data: dict | None) -> TrainConfig:
    data = copy.deepcopy(data or {})
    preset = data.pop("preset", "reference")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    _apply(cfg, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    """Read a YAML config; absent keys take the preset's defaults."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else {}
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def resolve_config(path: str | Path | None, seed: int | None = None, preset: str | None = None) -> TrainConfig:
    if path is not None:
        cfg = load_config(path)
    else:
        cfg = PRESETS[preset or "reference"]()
    if seed is not None:
        cfg.seed = int(seed)
    cfg.validate()
    return cfg


def as_dict(obj: Any) -> dict:
    return _plain(dataclasses.asdict(obj))
