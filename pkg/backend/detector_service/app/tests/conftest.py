"""
Fixtures for testing
"""
import copy
import json
import logging
from typing import Callable

import numpy as np
import pytest
from click.testing import CliRunner

from app.application.dtos import AppConfig, parse_config
from app.application.synth_service import SynthService
from app.domain.tensor import Tensor, backward, no_grad
from app.infrastructure.storage.image_store import PillowImageStore
from app.infrastructure.storage.manifest_repository import FileManifestRepository

# Small enough that a training step takes milliseconds
TINY_CONFIG = {
    "dataset": {
        "generator": {
            "num_videos": 4, "frames_per_video": 16, "num_classes": 3,
            "image_width": 32, "image_height": 32,
        },
        "frame_stride": 2,
        "undersample_ratio": 1.0,
        "augmentation": {"scale_width": 28, "scale_height": 20, "crop_width": 24, "crop_height": 16},
        "pca_max_pixels": 500,
    },
    "split": {"n_val_videos": 1},
    "model": {
        "backbone_widths": [4, 8], "backbone_strides": [1, 2], "blocks_per_stage": 1,
        "custom_features": 4, "custom_repetitions": 1, "ffe_cut_points": [3, 5],
    },
    "train": {"batch_size": 4, "iterations": 3, "val_every": 2, "log_every": 1},
    "experiment": {"repeats": 1},
}


def _gradient_check(forward: Callable[[], Tensor], arrays: dict[str, np.ndarray], seed: int = 0,
                    eps: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7) -> None:
    """
    Compare `backward` against central finite differences.

    `forward` builds the graph from the current contents of `arrays`, whose
    keys are the leaf names; entries are perturbed in place.
    """
    out = forward()
    upstream = np.random.default_rng(seed).normal(size=out.shape)
    analytic = backward(out, upstream)
    for name, array in arrays.items():
        numeric = np.zeros_like(array)
        with no_grad():
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + eps
                plus = float(np.sum(forward().data * upstream))
                array[index] = original - eps
                minus = float(np.sum(forward().data * upstream))
                array[index] = original
                numeric[index] = (plus - minus) / (2 * eps)
        assert name in analytic, f"no gradient for {name}"
        np.testing.assert_allclose(analytic[name], numeric, rtol=rtol, atol=atol, err_msg=name)


@pytest.fixture
def gradient_check():
    """Finite-difference gradient checker"""
    return _gradient_check


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config_data():
    """Raw JSON document of the tiny run configuration"""
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_data) -> AppConfig:
    return parse_config(tiny_config_data)


@pytest.fixture
def config_file(tmp_path, tiny_config_data):
    """Tiny configuration written to disk for CLI runs"""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_data), encoding="utf-8")
    return path


@pytest.fixture
def synthetic_dataset(tmp_path, tiny_config):
    """Tiny synthetic target dataset; returns the manifest path"""
    out_dir = tmp_path / "data"
    SynthService(PillowImageStore(), FileManifestRepository(), workers=2).generate(
        tiny_config.dataset.generator, out_dir
    )
    return out_dir / "manifest.json"


@pytest.fixture
def cli_runner():
    """Click runner; drops the log handler bound to the runner's stream afterwards"""
    yield CliRunner()
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
