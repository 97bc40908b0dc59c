import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from advaug.config import RunConfig


def small_config(**overrides) -> RunConfig:
    """A fast 16x16 configuration for unit tests."""
    raw = {
        "dataset": {"kind": "synthetic-cls", "resolution": 16, "size": 48,
                    "train_fraction": 0.75, "num_classes": 4, "seed": 0},
        "model": {"noise_dim": 16, "base_width": 8},
        "train": {"batch_size": 16, "epochs": 1, "seed": 0, "out_dir": "unused"},
    }
    for section, vals in overrides.items():
        raw.setdefault(section, {}).update(vals)
    return RunConfig.from_dict(raw)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(12345)
