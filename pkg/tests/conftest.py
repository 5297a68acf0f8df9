import numpy as np
import pytest
import torch

from angiovid.data import AngioVideo, even_phase_tags, phantom_dataset
from angiovid.model import DiscriminatorConfig, GeneratorConfig

torch.set_num_threads(1)

TINY_GEN = GeneratorConfig(base_channels=8, downsample_stages=2, residual_blocks=1, nce_dim=16)
TINY_DISC = DiscriminatorConfig(base_channels=8, n_layers=3)


@pytest.fixture
def tiny_gen_cfg():
    return TINY_GEN


@pytest.fixture
def tiny_disc_cfg():
    return TINY_DISC


@pytest.fixture(scope="session")
def phantoms32():
    return phantom_dataset(4, seed=3, resolution=32)


def make_video(frames, tags=None, ts=None):
    frames = np.asarray(frames, dtype=np.float32)
    return AngioVideo(frames, tags or even_phase_tags(len(frames)), ts)


# acceptance verdicts, echoed again at the end of the run so they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
