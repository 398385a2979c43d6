"""Shared fixtures: tiny model configs, seeded generators and analytic shapes."""

import numpy as np
import pytest

from src.config import ModelConfig, TrainConfig
from src.geometry import ShapeSpec, sample_sdf
from src.model import ImplicitTemplateModel


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(latent_dim=3, hidden_dim=4, template_width=8, template_layers=2, steps=8)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        iterations=6,
        shapes_per_batch=2,
        points_per_shape=32,
        checkpoint_every=3,
        log_every=2,
        model=tiny_model_config(),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    return ImplicitTemplateModel(tiny_config, seed=7)


@pytest.fixture
def identity_model(tiny_config):
    model = ImplicitTemplateModel(tiny_config, seed=7)
    model.zero_warp_head()
    return model


@pytest.fixture
def sphere_spec():
    return ShapeSpec("sphere", (0.5,), shape_id=0)


@pytest.fixture
def box_spec():
    return ShapeSpec("box", (0.3, 0.2, 0.25), shape_id=1)


@pytest.fixture(scope="session")
def small_sample_sets():
    specs = [
        ShapeSpec("sphere", (0.4,), shape_id=0),
        ShapeSpec("sphere", (0.6,), shape_id=1),
        ShapeSpec("box", (0.3, 0.3, 0.3), shape_id=2),
    ]
    return [sample_sdf(s, n_surface=200, n_uniform=50, rng_seed=s.shape_id) for s in specs]


def carve_octahedron(model: ImplicitTemplateModel, radius: float = 0.5) -> ImplicitTemplateModel:
    """Set the template to |x| + |y| + |z| - radius, up to softplus smoothing."""
    layers = model.template.mlp.layers
    for layer in layers:
        layer.weight.value[...] = 0.0
        layer.bias.value[...] = 0.0
    layers[0].weight.value[:6] = np.concatenate([np.eye(3), -np.eye(3)])
    for layer in layers[1:-1]:
        layer.weight.value[:6, :6] = np.eye(6)
    layers[-1].weight.value[0, :6] = 1.0
    layers[-1].bias.value[0] = -radius
    return model
