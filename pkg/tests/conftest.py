import pytest

from pcegzsl.data import SyntheticSpec, generate_synthetic
from pcegzsl.losses import LossWeights
from pcegzsl.pipeline import TrainConfig


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_seen=4, n_unseen=2, attr_dim=6, feature_dim=8, samples_per_class=20, noise_sigma=0.5, seed=3)


@pytest.fixture(scope="session")
def tiny_ds(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        epochs=2,
        batch_size=16,
        n_critic=2,
        hidden_dim=16,
        d_h=8,
        d_z=6,
        noise_dim=4,
        n_synth_per_unseen=10,
        classifier_epochs=5,
        weights=LossWeights(0.1, 0.1, 0.1),
        seed=5,
    )


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
