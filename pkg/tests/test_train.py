import copy

import numpy as np
import pytest
import torch

from histostargan.checkpoint import file_hashes, load_checkpoint, save_checkpoint
from histostargan.core import RngStream, TrainConfig
from histostargan.data import DatasetError
from histostargan.nets import ModelBundle
from histostargan.train import (
    ema_update,
    finetune_seg,
    generator_objective,
    generator_step,
    lambda_ds_at,
    lambda_seg_at,
    make_optimizers,
    next_batch,
    read_log,
    train,
    train_step,
)

from conftest import tiny_config

# ---- schedules ----


def test_lambda_ds_schedule():
    cfg = TrainConfig()
    assert lambda_ds_at(0, cfg) == 1.0
    assert lambda_ds_at(50_000, cfg) == 0.5
    assert lambda_ds_at(100_000, cfg) == 0.0
    assert lambda_ds_at(150_000, cfg) == 0.0
    with pytest.raises(ValueError):
        lambda_ds_at(-1, cfg)


def test_lambda_seg_schedule():
    cfg = TrainConfig()
    assert lambda_seg_at(9_999, cfg) == 0.0
    assert lambda_seg_at(10_000, cfg) == 5.0
    assert lambda_seg_at(99_999, cfg) == 5.0


# ---- EMA ----


def test_ema_single_update():
    s, c = torch.nn.Linear(2, 1), torch.nn.Linear(2, 1)
    with torch.no_grad():
        for p in s.parameters():
            p.zero_()
        for p in c.parameters():
            p.fill_(1.0)
    ema_update(s, c, 0.999)
    for p in s.parameters():
        assert torch.allclose(p, torch.full_like(p, 0.001), atol=1e-9)


def test_ema_fixed_point():
    s, c = torch.nn.Linear(3, 2).double(), torch.nn.Linear(3, 2).double()
    s.load_state_dict(c.state_dict())
    for _ in range(10):
        ema_update(s, c, 0.9)
    for p, q in zip(s.parameters(), c.parameters()):
        assert torch.equal(p, q)


def test_ema_closed_form():
    s, c = [torch.zeros(4, dtype=torch.float64)], [torch.ones(4, dtype=torch.float64)]
    n, d = 50, 0.95
    for _ in range(n):
        ema_update(s, c, d)
    assert torch.allclose(s[0], torch.full((4,), 1 - d**n, dtype=torch.float64), atol=1e-12, rtol=0)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.9)


# ---- steps ----


def _params(net):
    return [p.detach().clone() for p in net.parameters()]


def _equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def _run_steps(cfg, manifest, n, seed=0):
    cfg = copy.deepcopy(cfg)
    cfg.seed = seed
    rng = RngStream(seed)
    bundle = ModelBundle.build(cfg, rng, manifest.domains)
    make_optimizers(bundle, cfg)
    reports = []
    for t in range(n):
        reports.append(train_step(bundle, next_batch(manifest, cfg, rng, t), cfg).to_dict())
    return bundle, reports


def test_ten_step_determinism(tiny_dataset):
    cfg = tiny_config()
    _, a = _run_steps(cfg, tiny_dataset, 10)
    _, b = _run_steps(cfg, tiny_dataset, 10)
    for ra, rb in zip(a, b):
        for k in ra:
            assert ra[k] == pytest.approx(rb[k], rel=1e-5, abs=1e-12)


def test_seg_frozen_during_warmup(tiny_dataset):
    cfg = tiny_config(seg_warmup_iterations=3)
    rng = RngStream(0)
    bundle = ModelBundle.build(cfg, rng, tiny_dataset.domains)
    make_optimizers(bundle, cfg)
    seg0, g0 = _params(bundle.Seg), _params(bundle.G)
    for t in range(3):
        train_step(bundle, next_batch(tiny_dataset, cfg, rng, t), cfg)
    assert _equal(_params(bundle.Seg), seg0)
    assert not _equal(_params(bundle.G), g0)
    train_step(bundle, next_batch(tiny_dataset, cfg, rng, 3), cfg)
    assert not _equal(_params(bundle.Seg), seg0)


def test_reference_pass_only_updates_generator(tiny_dataset):
    """With the latent-pass weights zeroed, only G receives gradients."""
    cfg = tiny_config(seg_warmup_iterations=0)
    rng = RngStream(0)
    bundle = ModelBundle.build(cfg, rng, tiny_dataset.domains)
    make_optimizers(bundle, cfg)
    batch = next_batch(tiny_dataset, cfg, rng, 0)
    for k in bundle.nets:
        bundle.nets[k].zero_grad(set_to_none=True)
    bundle.D.requires_grad_(False)
    generator_objective(bundle, batch, cfg, 0, backward=True)
    assert all(p.grad is None for p in bundle.D.parameters())
    for k in ("G", "F", "E", "Seg"):
        assert any(p.grad is not None for p in bundle.nets[k].parameters())


def test_generator_descent_with_frozen_discriminator(tiny_dataset):
    decreased = 0
    for seed in range(10):
        cfg = tiny_config(lr_g=1e-3, lr_f=1e-3, lr_e=1e-3, seed=seed)
        rng = RngStream(seed)
        bundle = ModelBundle.build(cfg, rng, tiny_dataset.domains)
        make_optimizers(bundle, cfg)
        batch = next_batch(tiny_dataset, cfg, rng, 0)
        before = generator_objective(bundle, batch, cfg, 0).total_g
        generator_step(bundle, batch, cfg)
        after = generator_objective(bundle, batch, cfg, 0).total_g
        decreased += after < before
    assert decreased >= 8


# ---- train loop, checkpoints, resume ----


def test_train_writes_log_and_checkpoints(tmp_path, tiny_dataset):
    cfg = tiny_config(total_iterations=12, checkpoint_every=5)
    bundle = train(tiny_dataset, cfg, out_dir=tmp_path)
    assert bundle.iteration == 12
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["iter_000005", "iter_000010", "iter_000012"]
    log = read_log(tmp_path / "train_log.jsonl")
    assert [r["iteration"] for r in log] == list(range(12))
    assert log[0]["lambda_seg"] == 0.0 and log[-1]["lambda_seg"] == cfg.lambda_seg
    loaded, rng_state = load_checkpoint(tmp_path / "checkpoints" / "iter_000012")
    assert loaded.iteration == 12 and rng_state is not None
    for p, q in zip(loaded.ema["G"].parameters(), bundle.ema["G"].parameters()):
        assert torch.equal(p, q)


def test_checkpoint_save_is_byte_stable(tmp_path):
    b = ModelBundle.build(tiny_config(), RngStream(0))
    save_checkpoint(tmp_path / "a", b)
    save_checkpoint(tmp_path / "b", b)
    assert file_hashes(tmp_path / "a") == file_hashes(tmp_path / "b")


def test_resume_equivalence(tmp_path, tiny_dataset):
    cfg = tiny_config(total_iterations=20, checkpoint_every=10)
    full = train(tiny_dataset, cfg, out_dir=tmp_path / "full")
    train(tiny_dataset, cfg, out_dir=tmp_path / "split", iterations=10)
    resumed = train(tiny_dataset, cfg, out_dir=tmp_path / "split",
                    resume_from=tmp_path / "split" / "checkpoints" / "iter_000010")
    a = read_log(tmp_path / "full" / "train_log.jsonl")
    b = read_log(tmp_path / "split" / "train_log.jsonl")
    assert [r["iteration"] for r in b] == list(range(20))
    for ra, rb in zip(a, b):
        for k in ("adv_d", "adv_g", "sty", "ds", "cyc", "seg_real", "seg_fake", "total_g"):
            assert rb[k] == pytest.approx(ra[k], rel=1e-4, abs=1e-7)
    for k in full.nets:
        for p, q in zip(full.nets[k].parameters(), resumed.nets[k].parameters()):
            assert torch.allclose(p, q, rtol=1e-4, atol=1e-6)


def test_train_rejects_domain_mismatch(tiny_dataset):
    from histostargan.core import ConfigError

    with pytest.raises(ConfigError, match="num_domains"):
        train(tiny_dataset, tiny_config(num_domains=4))


# ---- segmentation fine-tuning ----


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    cfg = tiny_config(total_iterations=8, seg_warmup_iterations=2)
    return train(tiny_dataset, cfg)


def test_finetune_changes_only_inference_seg(tmp_path, trained, tiny_source):
    save_checkpoint(tmp_path / "before", trained)
    tuned = finetune_seg(trained, tiny_source, epochs=1, seed=0)
    save_checkpoint(tmp_path / "after", tuned)
    a, b = file_hashes(tmp_path / "before"), file_hashes(tmp_path / "after")
    assert sorted(f for f in a if a[f] != b[f]) == ["Seg_ema.pt"]
    # input bundle untouched
    save_checkpoint(tmp_path / "again", trained)
    assert file_hashes(tmp_path / "again") == a


def test_finetune_zero_epochs_is_identity(tmp_path, trained, tiny_source):
    save_checkpoint(tmp_path / "a", trained)
    save_checkpoint(tmp_path / "b", finetune_seg(trained, tiny_source, epochs=0))
    assert file_hashes(tmp_path / "a") == file_hashes(tmp_path / "b")


def test_finetune_rejects_multi_domain(trained, tiny_dataset):
    with pytest.raises(DatasetError, match="3 domains"):
        finetune_seg(trained, tiny_dataset)


def test_finetune_seeded(trained, tiny_source):
    a = finetune_seg(trained, tiny_source, seed=3).ema["Seg"]
    b = finetune_seg(trained, tiny_source, seed=3).ema["Seg"]
    assert _equal(_params(a), _params(b))
