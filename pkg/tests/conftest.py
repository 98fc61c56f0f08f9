import numpy as np
import pytest
import torch

from fewseg.config import PipelineConfig
from fewseg.encoder import EncoderConfig, FewsegModel
from fewseg.synthetic import gen_synthetic


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    gen_synthetic(n_patients=10, image_size=32, seed=0, out_dir=out)
    return out


@pytest.fixture(scope="session")
def manifest_path(dataset_dir):
    return dataset_dir / "manifest.jsonl"


def make_config(manifest_path, out_dir, **overrides) -> PipelineConfig:
    base = {
        "data": {"manifest": str(manifest_path)},
        "out_dir": str(out_dir),
        "stage1": {"iterations": 0},
        "stage2": {"iterations": 0},
        "finetune": {"iterations": 0},
    }
    for key, value in overrides.items():
        node = base
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return PipelineConfig.from_dict(base)


@pytest.fixture
def pipeline_config(manifest_path, tmp_path):
    return make_config(manifest_path, tmp_path / "run")


def tiny_model(seed: int = 0, dtype=torch.float64) -> FewsegModel:
    """A <5k-parameter encoder used by the finite-difference checks."""
    torch.manual_seed(seed)
    config = EncoderConfig(
        input_size=16, block_channels=[6, 10], feature_dim=10,
        projection_dim=6, grid_size=2,
    )
    return FewsegModel(config).to(dtype)
