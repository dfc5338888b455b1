import pytest
import torch

from src.models.config import Config, MeshConfig, MetricConfig, ModelConfig, TrainConfig
from src.neural.diffcore import configure_precision
from src.services.synthetic_service import generate_synthetic


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run end-to-end fixture runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on the desk fixture (enable with --run-slow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64():
    previous = torch.get_default_dtype()
    configure_precision("float64")
    yield
    torch.set_default_dtype(previous)


def small_model_config(**overrides) -> ModelConfig:
    values = dict(
        code_dim=4,
        hidden_width=16,
        deformation_layers=2,
        template_layers=3,
        displacement_layers=2,
        render_layers_stage1=2,
        render_layers_stage2=3,
        render_skip_layer=1,
        deformation_feature_dim=4,
        template_feature_dim=4,
        displacement_feature_dim=4,
        point_frequencies=2,
        view_frequencies=1,
        stage2_frequency_increase=1,
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def toy_model_config() -> ModelConfig:
    return small_model_config()


@pytest.fixture
def quick_config() -> Config:
    return Config(
        model=small_model_config(),
        train=TrainConfig(
            rays_per_step=16,
            stage1_steps=4,
            stage2_steps=3,
            fit_steps=3,
            n_coarse=6,
            n_fine=4,
            regularizer_points=8,
            checkpoint_every=2,
            log_every=1,
            held_out_views=1,
        ),
        mesh=MeshConfig(resolution=16, batch_size=4096),
        metrics=MetricConfig(surface_samples=200, render_chunk=64),
    )


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Two training identities and one held-out identity, three 12x12 views each"""
    previous = torch.get_default_dtype()
    configure_precision("float64")
    root = tmp_path_factory.mktemp("desk") / "dataset"
    manifest = generate_synthetic(root, n_identities=2, n_views=3, image_size=12, seed=0,
                                  n_held_out=1, mesh_resolution=24)
    torch.set_default_dtype(previous)
    return manifest
