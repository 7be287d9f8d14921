import numpy as np
import pytest
import torch


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """64-image container (2 shapes x 2 x 2 x 2 x 4) shared by trainer/evalkit/cli tests."""
    from modnet.dataset import DatasetManifest, generate_grid

    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    generate_grid(DatasetManifest(image_shape=(32, 32, 3), grid=(2, 2, 2, 2, 4), seed=0), path)
    return path


TINY_CONFIG = dict(m=2, n=2, u=3, k=2, batch_size=8, steps=6, channels=[4, 4, 8, 8], hidden=16,
                   hessian_pairs=1, checkpoint_interval=3, lambda_kl=1e-2)


@pytest.fixture
def tiny_config():
    from modnet.trainer import TrainConfig

    return TrainConfig(**TINY_CONFIG)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.summary_lines():
            terminalreporter.write_line(line)
