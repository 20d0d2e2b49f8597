import numpy as np
import pytest
import torch

from pse.audio import AudioClip
from pse.corpus import AudioStore, load_manifest, partition_speakers
from pse.synthetic import generate_synthetic_corpus, test_speaker_ids

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def harmonic_clip(num_samples=16000, f0=220.0, sample_rate=16000, seed=0, rms=0.08) -> AudioClip:
    """Deterministic speech-like harmonic test signal."""
    gen = np.random.default_rng(seed)
    t = np.arange(num_samples) / sample_rate
    wave = np.zeros(num_samples)
    for h in range(1, 8):
        wave += h**-1.0 * np.sin(2 * np.pi * h * f0 * t + gen.uniform(0, 2 * np.pi))
    wave *= 0.55 - 0.45 * np.cos(2 * np.pi * 3.0 * t)
    wave *= rms / np.sqrt(np.mean(wave**2))
    return AudioClip(wave, sample_rate)


def noise_clip(num_samples=16000, sample_rate=16000, seed=1, rms=0.08) -> AudioClip:
    gen = np.random.default_rng(seed)
    wave = gen.standard_normal(num_samples)
    wave *= rms / np.sqrt(np.mean(wave**2))
    return AudioClip(wave, sample_rate)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus shared across tests: manifest, partition
    (2 test speakers, 3 s pool), and a warm audio store."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest, manifest_path = generate_synthetic_corpus(
        root,
        n_test_speakers=2,
        n_background_speakers=2,
        utterances_per_speaker=10,
        utterance_sec=1.5,
        n_train_noises=4,
        n_eval_noises=2,
        n_premix_noises=2,
        noise_sec=4.0,
        seed=42,
    )
    partition = partition_speakers(manifest, test_speaker_ids(2), ft_budget_sec=3.0, seed=7)
    return {
        "root": root,
        "manifest": manifest,
        "manifest_path": manifest_path,
        "partition": partition,
        "store": AudioStore(),
        "speakers": test_speaker_ids(2),
    }
