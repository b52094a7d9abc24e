"""Checkpoint directories: one parameter file per network plus a JSON manifest."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

from .core import RngStream, config_from_dict
from .nets import EMA_NETWORKS, NETWORKS, ModelBundle

MANIFEST = "checkpoint.json"
RNG_FILE = "rng.json"
OPTIM_FILE = "optim.pt"


class CheckpointError(RuntimeError):
    pass


def _param_files():
    return [f"{k}.pt" for k in NETWORKS] + [f"{k}_ema.pt" for k in EMA_NETWORKS]


def _save_tensor_file(obj, path: Path) -> str:
    buf = io.BytesIO()
    torch.save(obj, buf)
    data = buf.getvalue()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_hashes(path) -> dict[str, str]:
    path = Path(path)
    return {f: hashlib.sha256((path / f).read_bytes()).hexdigest() for f in _param_files()}


def save_checkpoint(path, bundle: ModelBundle, rng: RngStream | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for k in NETWORKS:
        hashes[f"{k}.pt"] = _save_tensor_file(bundle.nets[k].state_dict(), path / f"{k}.pt")
    for k in EMA_NETWORKS:
        hashes[f"{k}_ema.pt"] = _save_tensor_file(bundle.ema[k].state_dict(), path / f"{k}_ema.pt")
    if bundle.optimizers:
        _save_tensor_file({k: o.state_dict() for k, o in bundle.optimizers.items()}, path / OPTIM_FILE)
    if rng is not None:
        (path / RNG_FILE).write_text(json.dumps(rng.state_dict()))
    manifest = {
        "iteration": bundle.iteration,
        "domain_names": bundle.domain_names,
        "config": bundle.cfg.to_dict(),
        "files": hashes,
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, with_optimizers: bool = False):
    """Return ``(bundle, rng_state_or_None)``; raises CheckpointError on incompatible files."""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise CheckpointError(f"{path} is not a checkpoint directory (no {MANIFEST})")
    meta = json.loads((path / MANIFEST).read_text())
    cfg = config_from_dict(meta["config"])
    bundle = ModelBundle.build(cfg, RngStream(cfg.seed), domain_names=meta["domain_names"])
    for k in NETWORKS:
        _load_into(bundle.nets[k], path / f"{k}.pt")
    for k in EMA_NETWORKS:
        _load_into(bundle.ema[k], path / f"{k}_ema.pt")
    bundle.iteration = int(meta["iteration"])
    if with_optimizers and (path / OPTIM_FILE).is_file():
        from .train import make_optimizers

        opts = make_optimizers(bundle, cfg)
        state = torch.load(path / OPTIM_FILE, weights_only=True)
        for k, o in opts.items():
            o.load_state_dict(state[k])
    rng_state = json.loads((path / RNG_FILE).read_text()) if (path / RNG_FILE).is_file() else None
    return bundle, rng_state


def _load_into(module, file: Path) -> None:
    if not file.is_file():
        raise CheckpointError(f"missing parameter file {file}")
    state = torch.load(file, weights_only=True)
    own = module.state_dict()
    if set(own) != set(state):
        raise CheckpointError(f"{file.name}: parameter names do not match the configured architecture")
    for name, t in state.items():
        if own[name].shape != t.shape:
            raise CheckpointError(f"{file.name}: {name} has shape {tuple(t.shape)}, expected {tuple(own[name].shape)}")
    module.load_state_dict(state)


def read_meta(path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text())
