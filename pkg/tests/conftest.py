"""Shared fixtures: a tiny synthetic dataset and a fast pipeline config."""

import pytest
import torch

from protoconcepts.config import default_config
from protoconcepts.data import SyntheticConceptSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "ds"
    spec = SyntheticConceptSpec(train_per_class=6, test_per_class=3, image_size=32, seed=3)
    return generate_synthetic(spec, root)


@pytest.fixture
def tiny_cfg(tiny_dataset):
    """Fast config resolved against the session dataset: 1/1/2 epochs, small net."""

    return default_config().with_overrides(
        [
            f"data.root={tiny_dataset.root}",
            "data.batch_size=8",
            "data.seed=0",
            "data.synthetic=true",
            "model.resolution=32",
            "model.latent_dim=16",
            "model.prototypes_per_class=2",
            "geometry.radius_init=0.8",
            "losses.k=2",
            "schedule.warmup.epochs=1",
            "schedule.joint.epochs=1",
            "schedule.finetune.epochs=2",
        ]
    )


@pytest.fixture
def tiny_net_factory():
    from protoconcepts.model import build_net

    def make(seed=0, **kwargs):
        torch.manual_seed(seed)
        defaults = dict(num_classes=4, prototypes_per_class=2, latent_dim=16, resolution=32, radius_init=0.8)
        defaults.update(kwargs)
        return build_net(**defaults)

    return make
