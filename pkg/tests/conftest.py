import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("default", deadline=None, max_examples=30)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A few-second synthetic corpus shared by data, training and evaluation tests."""
    from idccrn_vae.data import SynthConfig, synth_corpus

    cfg = SynthConfig(n_speakers=8, n_noise_sources=8, utterances_per_source=2, duration_range=(0.4, 0.6))
    return synth_corpus(cfg, tmp_path_factory.mktemp("corpus"), seed=3)


def tiny_experiment(**train):
    """A seconds-scale experiment config for exercising the training stages."""
    from dataclasses import replace

    from idccrn_vae.config import ExperimentConfig
    from idccrn_vae.networks import EncoderConfig

    cfg = ExperimentConfig(profile="tiny")
    cfg.network = EncoderConfig(channels=[2, 3, 4, 4, 5, 5], latent_dim=4, lstm_hidden=8)
    base = dict(max_epochs=2, batch_size=2, segment_seconds=0.25, max_batches_per_epoch=2, snr_range=(-5.0, 5.0))
    cfg.train = replace(cfg.train, **{**base, **train})
    return cfg


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
