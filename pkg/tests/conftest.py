import numpy as np
import pytest
import torch

from evsplat.synthdata import generate_dataset, load_dataset


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """Default medium-blur toy dataset (8 frames, 64x64, 200 Gaussians)."""
    out = tmp_path_factory.mktemp("toy")
    generate_dataset(out, seed=3)
    return out


@pytest.fixture(scope="session")
def toy(toy_dir):
    return load_dataset(toy_dir)


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    generate_dataset(out, seed=11, n_frames=3, width=24, height=24, n_gaussians=40)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
