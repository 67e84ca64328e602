import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cov3d.network import NetworkConfig, build_network
from cov3d.resampler import SizePreset


TINY_PRESET = SizePreset("tiny", 32, 16)


def tiny_network_config(head_mode="dual", dims=(16, 32, 32), dropout=0.0):
    return NetworkConfig(
        input_dims=dims,
        stage_widths=(4, 8, 8, 8),
        blocks_per_stage=(1, 1, 1, 1),
        stage_dropout=(dropout,) * 4,
        head_hidden=16,
        head_dropout=dropout,
        head_mode=head_mode,
    )


@pytest.fixture
def tiny_network():
    return build_network(tiny_network_config(), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
