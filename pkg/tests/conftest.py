"""Test configuration."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure src is importable
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from densetok.config import _ENV_MAP  # noqa: E402
from densetok.data import SynthConfig, synth_scenes  # noqa: E402
from densetok.geometry import RotatedBox  # noqa: E402
from densetok.vit import ModelConfig  # noqa: E402

TINY_SYNTH = {
    "image_size": 16,
    "num_clusters": [1, 1],
    "targets_per_cluster": [1, 2],
    "extent_range": [4.0, 6.0],
    "aspect_range": [1.5, 2.0],
    "cluster_radius": 5.0,
    "clutter_blob_count": 1,
    "cell_size": 8,
}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in _ENV_MAP:
        monkeypatch.delenv(key, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_synth():
    return SynthConfig(seed=7, **TINY_SYNTH)


@pytest.fixture
def tiny_scenes(tiny_synth):
    return synth_scenes(tiny_synth, 6)


@pytest.fixture
def tiny_boxes():
    return [
        [RotatedBox(4.3, 5.1, 5.0, 2.5, 0.3), RotatedBox(11.7, 10.2, 6.0, 3.0, -0.7)],
        [RotatedBox(9.4, 3.6, 4.0, 2.2, 1.1)],
    ]


@pytest.fixture
def tiny_run_config(tmp_path):
    """Config file for a tiny end-to-end CLI run."""
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "seed": 3,
        "model": ModelConfig.tiny().to_dict(),
        "synth": TINY_SYNTH,
        "optim": {"warmup_iters": 2},
        "train": {"iters": 3, "batch_size": 2, "eval_every": 0, "scenes": 6},
        "paths": {"out_dir": str(tmp_path / "run")},
    }))
    return path
