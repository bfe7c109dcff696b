import pytest

from crossseq.cfd import LcscConfig
from crossseq.config import DataConfig, ExperimentConfig
from crossseq.data import PhantomConfig
from crossseq.losses import LossWeights
from crossseq.segnet import SegNetConfig


def tiny_config(**changes) -> ExperimentConfig:
    """A few-second configuration: 4 small phantom subjects and a shallow network."""
    cfg = ExperimentConfig(
        data=DataConfig(n_subjects=4, phantom=PhantomConfig(shape=(32, 32, 4)), labeled_fraction=0.5),
        lr=1e-3,
        epochs=2,
        batch_labeled=2,
        batch_unlabeled=2,
        steps_per_epoch=3,
        weights=LossWeights(ramp_length=2),
        lcsc_t1=LcscConfig(n_filters=4, kernel_size=3),
        lcsc_fa=LcscConfig(n_filters=4, kernel_size=3),
        segnet=SegNetConfig(depth=2, base_channels=8),
    )
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture
def tiny():
    return tiny_config


# filled by test_acceptance.report(); printed after the run so the lines survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
