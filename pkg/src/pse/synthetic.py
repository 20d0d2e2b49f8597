"""Desk-scale synthetic corpus for tests and demos.

Licensed speech/noise corpora cannot ship with the toolkit, so this
module fabricates a miniature stand-in: each "speaker" is a harmonic tone
complex with a speaker-specific fundamental, spectral rolloff, vibrato,
and syllable-like amplitude modulation; "noises" are band-filtered noise
with burst envelopes over a nonzero floor. The generator writes 16 kHz
float32 WAVs in the directory layout the manifest scanner expects and
returns a validated manifest.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from pse.audio import AudioClip, write_wav
from pse.corpus import (
    TAG_NOISE_EVAL,
    TAG_NOISE_PREMIX,
    TAG_NOISE_TRAIN,
    TAG_SPEECH,
    CorpusManifest,
    ManifestEntry,
    make_manifest,
    save_manifest,
)

TARGET_RMS = 0.08


def _speaker_voice(rng: np.random.Generator) -> dict:
    """Draw the per-speaker timbre parameters."""
    return {
        "f0": float(rng.uniform(110.0, 320.0)),
        "rolloff": float(rng.uniform(0.6, 1.6)),
        "num_harmonics": int(rng.integers(6, 12)),
        "vibrato_hz": float(rng.uniform(4.0, 7.0)),
        "vibrato_depth": float(rng.uniform(0.005, 0.02)),
        "syllable_hz": float(rng.uniform(2.0, 5.0)),
    }


def _utterance(voice: dict, num_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(num_samples) / sample_rate
    f0 = voice["f0"] * (1.0 + rng.uniform(-0.02, 0.02))
    vibrato = 1.0 + voice["vibrato_depth"] * np.sin(
        2 * np.pi * voice["vibrato_hz"] * t + rng.uniform(0, 2 * np.pi)
    )
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    wave = np.zeros(num_samples)
    nyquist = sample_rate / 2
    for h in range(1, voice["num_harmonics"] + 1):
        if h * f0 * 1.05 >= nyquist:
            break
        amp = h ** -voice["rolloff"]
        wave += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    # syllable-like AM with a floor so clips always carry energy
    env = 0.55 - 0.45 * np.cos(2 * np.pi * voice["syllable_hz"] * t + rng.uniform(0, 2 * np.pi))
    wave *= env
    wave *= TARGET_RMS / np.sqrt(np.mean(np.square(wave)))
    return wave


def _noise(num_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    low = rng.uniform(80.0, 2000.0)
    high = low * rng.uniform(1.5, 4.0)
    high = min(high, 0.45 * sample_rate)
    sos = butter(4, [low, high], btype="bandpass", fs=sample_rate, output="sos")
    colored = sosfilt(sos, rng.standard_normal(num_samples))
    # bursts over a floor: never fully silent, so SNRs stay defined
    t = np.arange(num_samples) / sample_rate
    burst_hz = rng.uniform(0.5, 3.0)
    gate = 0.5 * (1 + np.sin(2 * np.pi * burst_hz * t + rng.uniform(0, 2 * np.pi)))
    env = 0.3 + 0.7 * gate**2
    wave = colored * env
    wave *= TARGET_RMS / np.sqrt(np.mean(np.square(wave)))
    return wave


def generate_synthetic_corpus(
    out_dir,
    n_test_speakers: int = 3,
    n_background_speakers: int = 5,
    utterances_per_speaker: int = 24,
    utterance_sec: float = 1.5,
    n_train_noises: int = 8,
    n_eval_noises: int = 4,
    n_premix_noises: int = 4,
    noise_sec: float = 8.0,
    sample_rate: int = 16000,
    seed: int = 0,
) -> tuple[CorpusManifest, Path]:
    """Write the synthetic corpus under `out_dir` and its manifest.jsonl.

    Deterministic for a given seed. Speakers are named spk00.. with the
    test speakers first; noise roles live in separate subdirectories.
    """
    out_dir = Path(out_dir).resolve()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    entries = []

    n_speakers = n_test_speakers + n_background_speakers
    utt_samples = int(round(utterance_sec * sample_rate))
    for k in range(n_speakers):
        speaker = f"spk{k:02d}"
        voice = _speaker_voice(rng)
        speaker_dir = out_dir / "speech" / speaker
        speaker_dir.mkdir(parents=True, exist_ok=True)
        for u in range(utterances_per_speaker):
            wave = _utterance(voice, utt_samples, sample_rate, rng)
            path = speaker_dir / f"utt{u:03d}.wav"
            write_wav(path, AudioClip(wave, sample_rate), dtype="float32")
            entries.append(
                ManifestEntry(str(path), speaker, utt_samples / sample_rate, sample_rate, TAG_SPEECH)
            )

    noise_samples = int(round(noise_sec * sample_rate))
    for tag, count in (
        (TAG_NOISE_TRAIN, n_train_noises),
        (TAG_NOISE_EVAL, n_eval_noises),
        (TAG_NOISE_PREMIX, n_premix_noises),
    ):
        tag_dir = out_dir / tag
        tag_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            wave = _noise(noise_samples, sample_rate, rng)
            path = tag_dir / f"{tag}_{i:03d}.wav"
            write_wav(path, AudioClip(wave, sample_rate), dtype="float32")
            entries.append(ManifestEntry(str(path), "", noise_samples / sample_rate, sample_rate, tag))

    manifest = make_manifest(entries)
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest, manifest_path


def test_speaker_ids(n_test_speakers: int = 3) -> list[str]:
    """Speaker ids the generator designates as test-time users."""
    return [f"spk{k:02d}" for k in range(n_test_speakers)]
