import numpy as np
import pytest
import torch

from icssn.config import Config, EncoderConfig, SoclConfig


def tiny_encoder_config(**kw):
    base = dict(backbone_depth=18, base_width=8, output_channels=16,
                aspp_dilations=(1, 2, 4), se_reduction=4)
    base.update(kw)
    return EncoderConfig(**base)


def desk_config():
    """The desk-scale model used by training tests."""
    cfg = Config()
    cfg.encoder = EncoderConfig(backbone_depth=18, base_width=16, output_channels=64,
                                aspp_dilations=(1, 2, 4, 6), se_reduction=8)
    cfg.data.tile_size = 128
    cfg.data.augment_ops = ()
    cfg.training.workers = 0
    return cfg


@pytest.fixture
def tiny_cfg():
    cfg = Config()
    cfg.encoder = tiny_encoder_config()
    cfg.classifier.hidden_units = 8
    cfg.training.batch_size = 2
    cfg.training.workers = 0
    cfg.socl = SoclConfig(n_pos=8, n_neg=8)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
