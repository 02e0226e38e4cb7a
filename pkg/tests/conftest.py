import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gldmnet import config  # noqa: E402
from synth import write_dataset  # noqa: E402

torch.set_num_threads(1)

# small network for tests that only need wiring, not the full profile
SMALL = {
    "backbone.family": "resnet18",
    "fusion.widths": [16, 32, 40, 64],
    "data.size": 64,
}


@pytest.fixture
def small_cfg():
    return config.resolve(overrides=SMALL)


@pytest.fixture
def toy_root(tmp_path):
    write_dataset(tmp_path, "TOY", n=3, size=(80, 72))
    return tmp_path


@pytest.fixture(scope="session")
def session_toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_dataset(root, "TOY", n=4, size=(96, 96))
    return root
