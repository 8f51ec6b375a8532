import numpy as np
import pytest
import torch

from einet.dsp import DspConfig, Waveform

torch.set_num_threads(1)


@pytest.fixture
def dsp():
    return DspConfig()


def sine(freq, seconds=1.0, amp=0.5, sr=16000, phase=0.0):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


SMALL_OVERRIDES = {"model.hidden": "32", "model.filter_channels": "64", "model.emotion_dim": "16",
                   "model.latent": "8", "model.upsample_channels": "32", "model.im_hidden": "16",
                   "data.segment_frames": "8", "data.batch_size": "2", "run.epochs": "2",
                   "run.checkpoint_every": "1"}


def small_config(**extra):
    from einet.config import resolve

    over = dict(SMALL_OVERRIDES)
    over.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return resolve(overrides=over, profile="tiny")


@pytest.fixture(scope="session")
def small_corpus():
    """A 2-text toy corpus (20 utterances) with features for the tiny profile."""
    from einet.corpus import build_toy_corpus
    from einet.training import compute_features

    cfg = small_config()
    man, audio = build_toy_corpus(2, [0.3, 0.7], seed=1, dsp=cfg.dsp())
    return cfg, man, compute_features(man, cfg, audio, cache_dir="")


@pytest.fixture
def small_batch(small_corpus):
    from einet.corpus import make_batches

    cfg, man, feats = small_corpus
    return next(make_batches(man, "train", 2, None, feats, cfg.data.hop_length, shuffle=False))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
