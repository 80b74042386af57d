import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from boxcorr.config import TrainConfig, apply_overrides

settings.register_profile(
    "boxcorr",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("boxcorr")

# criterion lines collected by test_acceptance.py and echoed in the terminal summary
CRITERIA: list = []

TINY = {
    "epochs": 1.0,
    "epoch_size": 8,
    "batch_size": 2,
    "warmup_epochs": 0.25,
    "eval_images": 4,
    "ckpt_every": 2,
    "aug.view_size": 32,
    "aug.local_view_size": 16,
    "synth.canvas_size": 48,
    "net.channels": [8, 8, 16, 16],
    "net.proj_hidden": 16,
    "net.embed_dim": 8,
    "net.decoder_dim": 8,
}


def tiny_config(**extra) -> TrainConfig:
    """Four-step config on 32-pixel views; seconds per run."""
    return apply_overrides(TrainConfig(), {**TINY, **extra}).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERIA:
        terminalreporter.write_line(line)
