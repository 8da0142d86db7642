import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """A model small enough for finite-difference checks through the whole objective."""
    from tapf.config import ExperimentConfig

    base = {
        "data.n_samples": 64, "data.n_video": 8, "data.video_dim": 6, "data.event_fraction": 0.2,
        "codec.strides": (4, 2), "codec.channels": 4, "codec.latent_dim": 8, "codec.kernel_size": 3,
        "spectral.fft_sizes": (32, 16), "spectral.mel_bins": (8, 4), "spectral.scale_weights": (2.0, 1.0),
        "quantizer.n_q": 2, "quantizer.codebook_size": 8, "fusion.semantic_dim": 4,
        "train.precision": "f64", "train.batch_size": 3, "train.steps": 3, "train.grad_every": 1,
    }
    base.update(overrides)
    return ExperimentConfig().replace(**base)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains desk-scale tokenizers (minutes each)")


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
