"""Generator, discriminator, mapping network, style encoder and segmentation branch."""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RngStream, ShapeError, TrainConfig, check_domain

NETWORKS = ("G", "D", "F", "E", "Seg")
EMA_NETWORKS = ("G", "F", "E", "Seg")


class ResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, normalize=False, downsample=False, upsample=False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.learned_sc:
            x = self.conv1x1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return x

    def _residual(self, x):
        if self.normalize:
            x = self.norm1(x)
        x = F.leaky_relu(x, 0.2)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        x = F.leaky_relu(x, 0.2)
        return self.conv2(x)

    def forward(self, x):
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdaIN(nn.Module):
    """Instance norm whose scale and shift are predicted from the style code."""

    def __init__(self, style_dim, num_features):
        super().__init__()
        self.norm = nn.InstanceNorm2d(num_features, affine=False)
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x, s):
        h = self.fc(s)[:, :, None, None]
        gamma, beta = torch.chunk(h, chunks=2, dim=1)
        return (1 + gamma) * self.norm(x) + beta


class AdainResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x, s):
        x = F.leaky_relu(self.norm1(x, s), 0.2)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), 0.2)
        return self.conv2(x)

    def forward(self, x, s):
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


def _channel_plan(cfg: TrainConfig) -> list[int]:
    """Channel width at every encoder resolution, input first."""
    net = cfg.net
    dims = [net.base_channels]
    for _ in range(net.down_depth):
        dims.append(min(dims[-1] * 2, net.max_channels))
    return dims


class Generator(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        net = cfg.net
        self.down_depth = net.down_depth
        self.style_dim = cfg.style_dim
        dims = _channel_plan(cfg)
        self.bottleneck_channels = dims[-1]
        self.from_rgb = nn.Conv2d(3, dims[0], 3, 1, 1)
        self.encode_blocks = nn.ModuleList()
        self.decode_blocks = nn.ModuleList()
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            self.encode_blocks.append(ResBlk(d_in, d_out, normalize=True, downsample=True))
            self.decode_blocks.insert(0, AdainResBlk(d_out, d_in, cfg.style_dim, upsample=True))
        for _ in range(net.bottleneck_blocks):
            self.encode_blocks.append(ResBlk(dims[-1], dims[-1], normalize=True))
            self.decode_blocks.insert(0, AdainResBlk(dims[-1], dims[-1], cfg.style_dim))
        self.to_rgb = nn.Sequential(
            nn.InstanceNorm2d(dims[0], affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(dims[0], 3, 1, 1, 0),
        )

    def encode(self, x, return_skips=False):
        step = 2**self.down_depth
        if x.shape[-2] % step or x.shape[-1] % step:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.down_depth}")
        h = self.from_rgb(x)
        skips = []
        for i, block in enumerate(self.encode_blocks):
            if i < self.down_depth:
                skips.append(h)
            h = block(h)
        return (h, skips) if return_skips else h

    def decode(self, f, s):
        if s.shape[-1] != self.style_dim:
            raise ShapeError(f"style length {s.shape[-1]} != style_dim {self.style_dim}")
        for block in self.decode_blocks:
            f = block(f, s)
        return torch.tanh(self.to_rgb(f))

    def forward(self, x, s):
        return self.decode(self.encode(x), s)

    def adain_layers(self):
        return [m for m in self.modules() if isinstance(m, AdaIN)]


class SegBranch(nn.Module):
    """Mirror of the generator decoder with plain instance norm and a 2-class head."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        net = cfg.net
        dims = _channel_plan(cfg)
        self.skip = net.seg_skip
        self.down_depth = net.down_depth
        self.blocks = nn.ModuleList()
        for _ in range(net.bottleneck_blocks):
            self.blocks.append(ResBlk(dims[-1], dims[-1], normalize=True))
        for d_in, d_out in zip(dims[:0:-1], dims[-2::-1]):
            self.blocks.append(ResBlk(d_in, d_out, normalize=True, upsample=True))
        self.head = nn.Sequential(
            nn.InstanceNorm2d(dims[0], affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(dims[0], 2, 1, 1, 0),
        )

    def forward(self, f, skips=None):
        n_bottleneck = len(self.blocks) - self.down_depth
        for i, block in enumerate(self.blocks):
            f = block(f)
            if self.skip and skips is not None and i >= n_bottleneck:
                f = f + skips[len(skips) - 1 - (i - n_bottleneck)]
        return self.head(f)


class Discriminator(nn.Module):
    """Shared conv trunk with one logit (D) or one style vector (E) per domain."""

    def __init__(self, cfg: TrainConfig, out_per_domain: int = 1):
        super().__init__()
        net = cfg.net
        self.num_domains = cfg.num_domains
        self.out_per_domain = out_per_domain
        dim = net.base_channels
        blocks = [nn.Conv2d(3, dim, 3, 1, 1)]
        for _ in range(net.disc_depth):
            d_out = min(dim * 2, net.max_channels)
            blocks.append(ResBlk(dim, d_out, downsample=True))
            dim = d_out
        final = net.img_size // 2**net.disc_depth
        blocks += [nn.LeakyReLU(0.2), nn.Conv2d(dim, dim, final, 1, 0), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*blocks)
        self.dim = dim
        if out_per_domain == 1:
            self.heads = nn.Conv2d(dim, cfg.num_domains, 1, 1, 0)
        else:
            self.heads = nn.ModuleList(nn.Linear(dim, out_per_domain) for _ in range(cfg.num_domains))

    def forward(self, x, y):
        check_domain(y, self.num_domains)
        h = self.trunk(x)
        idx = torch.arange(x.shape[0], device=x.device)
        if self.out_per_domain == 1:
            return self.heads(h).view(x.shape[0], -1)[idx, y]
        h = h.view(x.shape[0], -1)
        out = torch.stack([head(h) for head in self.heads], dim=1)
        return out[idx, y]


class StyleEncoder(Discriminator):
    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg, out_per_domain=cfg.style_dim)


class MappingNetwork(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        net = cfg.net
        self.num_domains = cfg.num_domains
        self.latent_dim = cfg.latent_dim
        layers = [nn.Linear(cfg.latent_dim, net.mapping_hidden), nn.ReLU()]
        for _ in range(net.mapping_shared_layers - 1):
            layers += [nn.Linear(net.mapping_hidden, net.mapping_hidden), nn.ReLU()]
        self.shared = nn.Sequential(*layers)
        self.heads = nn.ModuleList()
        for _ in range(cfg.num_domains):
            head = []
            for _ in range(net.mapping_head_layers):
                head += [nn.Linear(net.mapping_hidden, net.mapping_hidden), nn.ReLU()]
            head.append(nn.Linear(net.mapping_hidden, cfg.style_dim))
            self.heads.append(nn.Sequential(*head))

    def forward(self, z, y):
        check_domain(y, self.num_domains)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent length {z.shape[-1]} != latent_dim {self.latent_dim}")
        h = self.shared(z)
        out = torch.stack([head(h) for head in self.heads], dim=1)
        return out[torch.arange(z.shape[0], device=z.device), y]


def he_init(module):
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.constant_(module.bias, 0)


# --------------------------------------------------------------------------
# bundle


class ModelBundle:
    """The five networks, EMA shadows of G/F/E/Seg, and the iteration counter."""

    def __init__(self, cfg: TrainConfig, nets: dict, ema: dict | None = None,
                 iteration: int = 0, domain_names: list[str] | None = None):
        self.cfg = cfg
        self.nets = nets
        self.ema = ema if ema is not None else {k: copy.deepcopy(nets[k]) for k in EMA_NETWORKS}
        for m in self.ema.values():
            m.requires_grad_(False)
        self.iteration = iteration
        self.domain_names = list(domain_names or [f"domain{i}" for i in range(cfg.num_domains)])
        if len(self.domain_names) != cfg.num_domains:
            raise ValueError("domain_names must have num_domains entries")
        self.optimizers: dict | None = None

    @classmethod
    def build(cls, cfg: TrainConfig, rng: RngStream, domain_names=None) -> "ModelBundle":
        seed = int(rng.derive("init", 0).integers(2**62))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            nets = {
                "G": Generator(cfg),
                "D": Discriminator(cfg),
                "F": MappingNetwork(cfg),
                "E": StyleEncoder(cfg),
                "Seg": SegBranch(cfg),
            }
            for name, net in nets.items():
                if name != "F":
                    net.apply(he_init)
        return cls(cfg, nets, domain_names=domain_names)

    def __getattr__(self, name):
        nets = self.__dict__.get("nets")
        if nets is not None and name in NETWORKS:
            return nets[name]
        raise AttributeError(name)

    def inference(self) -> dict:
        """Networks used after training: EMA shadows for G/F/E/Seg, raw D."""
        return {**self.ema, "D": self.nets["D"]}

    def domain_index(self, name: str) -> int:
        if name not in self.domain_names:
            raise KeyError(f"unknown domain '{name}', valid: {', '.join(self.domain_names)}")
        return self.domain_names.index(name)


def zero_style_path(G: Generator) -> Generator:
    """Zero every AdaIN affine predictor in place so the decoder ignores the style."""
    with torch.no_grad():
        for layer in G.adain_layers():
            layer.fc.weight.zero_()
            layer.fc.bias.zero_()
    return G


# --------------------------------------------------------------------------
# forward contracts on single patches or batches


def _as_batch(x, dims):
    x = torch.as_tensor(x) if not isinstance(x, torch.Tensor) else x
    single = x.dim() == dims
    return (x.unsqueeze(0) if single else x), single


def _labels(y, n):
    y = torch.as_tensor(y, dtype=torch.long)
    return y.expand(n) if y.dim() == 0 else y


def _unbatch(out, single):
    return out[0] if single else out


def generator_encode(G: Generator, x):
    xb, single = _as_batch(x, 3)
    return _unbatch(G.encode(xb), single)


def generator_decode(G: Generator, f, s):
    fb, single = _as_batch(f, 3)
    sb, _ = _as_batch(s, 1)
    return _unbatch(G.decode(fb, sb), single)


def translate(G: Generator, x, s):
    xb, single = _as_batch(x, 3)
    sb, _ = _as_batch(s, 1)
    return _unbatch(G(xb, sb), single)


def map_style(F_net: MappingNetwork, z, y):
    zb, single = _as_batch(z, 1)
    return _unbatch(F_net(zb, _labels(y, zb.shape[0])), single)


def encode_style(E: StyleEncoder, x, y):
    xb, single = _as_batch(x, 3)
    return _unbatch(E(xb, _labels(y, xb.shape[0])), single)


def discriminate(D: Discriminator, x, y):
    xb, single = _as_batch(x, 3)
    return _unbatch(D(xb, _labels(y, xb.shape[0])), single)


def segment(G: Generator, Seg: SegBranch, x):
    """Per-pixel 2-class scores from the generator encoder + segmentation branch."""
    xb, single = _as_batch(x, 3)
    if Seg.skip:
        f, skips = G.encode(xb, return_skips=True)
        out = Seg(f, skips)
    else:
        out = Seg(G.encode(xb))
    return _unbatch(out, single)


@torch.no_grad()
def predict_masks(G: Generator, Seg: SegBranch, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Argmax masks [N, H, W] for images [N, 3, H, W] in [-1, 1]."""
    out = []
    for i in range(0, len(images), batch_size):
        xb = torch.as_tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))
        out.append(segment(G, Seg, xb).argmax(1).numpy().astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,), np.uint8)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
