import numpy as np
import pytest
import torch

from histostargan.core import NetConfig, TrainConfig
from histostargan.data import StainSimulatorParams, generate_toy_dataset


def tiny_config(**kw) -> TrainConfig:
    cfg = TrainConfig.toy()
    cfg.net = NetConfig(img_size=16, base_channels=8, max_channels=16, down_depth=2, bottleneck_blocks=1,
                        disc_depth=2, mapping_hidden=16, mapping_shared_layers=2, mapping_head_layers=1)
    cfg.num_domains = 3
    cfg.style_dim = 8
    cfg.latent_dim = 4
    cfg.batch_size = 4
    cfg.total_iterations = 20
    cfg.ds_decay_iterations = 20
    cfg.seg_warmup_iterations = 5
    cfg.checkpoint_every = 10
    cfg.finetune_batch_size = 4
    for k, v in kw.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_sim():
    return StainSimulatorParams.default(4, img_size=16, max_tubules=1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_sim):
    root = tmp_path_factory.mktemp("tiny_data")
    return generate_toy_dataset(tiny_sim, 6, 6, root, np.random.default_rng(0), domains=[0, 1, 2])


@pytest.fixture(scope="session")
def tiny_source(tmp_path_factory, tiny_sim):
    """Single-domain annotated set with enough negatives for a 1:7 subsample."""
    root = tmp_path_factory.mktemp("tiny_source")
    return generate_toy_dataset(tiny_sim, 2, 16, root, np.random.default_rng(1), domains=[0])


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


CRITERIA_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA_LINES):
            terminalreporter.write_line(CRITERIA_LINES[n])
