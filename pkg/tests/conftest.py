import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from flatvi.nbvae import NbVaeModel, TrainConfig, train
from flatvi.simulate import simulate

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data():
    return simulate(n=300, g=10, seed=3)


@pytest.fixture(scope="session")
def trained_model(small_data):
    """A briefly trained 2-d model; geometry tests only need a generic smooth decoder."""
    model = NbVaeModel(10, latent_dim=2, seed=3, use_size_factor=False)
    train(model, small_data.X, TrainConfig(max_epochs=15, seed=3, use_size_factor=False))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one pass/fail line for an acceptance criterion and keep it for the final summary."""

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
