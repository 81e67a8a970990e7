import pathlib

import pytest
from hydra import compose, initialize_config_dir
from hydra.core.global_hydra import GlobalHydra

from src.diffusion.geometry import segment_frame
from src.diffusion.mixture import build_grid_mixture
from src.diffusion.schedule import build_linear_schedule

ROOT = pathlib.Path(__file__).resolve().parents[1]
CONFIG_DIR = ROOT / "configs"


@pytest.fixture(scope="session")
def grid25():
    return build_grid_mixture()


@pytest.fixture(scope="session")
def schedule(grid25):
    return build_linear_schedule(sigma_data=grid25.sigma)


@pytest.fixture(scope="session")
def short_schedule(grid25):
    """T = 100 keeps full reverse runs cheap."""
    return build_linear_schedule(T=100, beta_min=1e-3, beta_max=0.2, sigma_data=grid25.sigma)


@pytest.fixture(scope="session")
def corner_pair(grid25):
    """Adjacent pair (0, 1) in the lattice corner."""
    return segment_frame(grid25, 0, 1)


@pytest.fixture
def compose_run(tmp_path):
    """Composes run.yaml with test overrides and a private output directory."""

    def _compose(*overrides):
        GlobalHydra.instance().clear()
        with initialize_config_dir(config_dir=str(CONFIG_DIR), version_base="1.3"):
            return compose(
                config_name="run.yaml",
                overrides=[f"original_work_dir={ROOT}", f"out_dir={tmp_path / 'out'}", *overrides],
            )

    yield _compose
    GlobalHydra.instance().clear()
