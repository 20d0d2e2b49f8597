"""Waveform primitives: clips, WAV I/O, SNR-controlled mixing, random cropping.

All audio is mono, normalized floating point in [-1, 1], fixed sample rate
(16 kHz by default throughout the toolkit). Every operation here is a pure
function of its inputs (plus an explicit RNG), so they are safe to call
from concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


class ZeroEnergyError(ValueError):
    """A signal with zero energy was given where an SNR must be defined."""


class ClipTooShortError(ValueError):
    """Source material is shorter than the requested clip duration."""


@dataclass(frozen=True)
class AudioClip:
    """A mono waveform at a fixed sample rate.

    `samples` is a read-only float64 1-D array; values must be finite.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("AudioClip requires at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite (no NaN/Inf)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_sec(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))


def _check_compatible(a: AudioClip, b: AudioClip) -> None:
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")


def mix_at_snr(target: AudioClip, interference: AudioClip, snr_db: float) -> tuple[AudioClip, AudioClip]:
    """Mix `interference` into `target` at an exact RMS signal-to-noise ratio.

    The interference is scaled by beta = rms(target) / (rms(interference)
    * 10^(snr_db/20)) so that 20*log10(rms(target)/rms(scaled)) == snr_db.
    Returns (mixture, scaled_interference); mixture = target + scaled.

    An infinite snr_db is accepted as a "no noise" sentinel: the scaled
    interference is all zeros and the mixture equals the target.
    """
    _check_compatible(target, interference)
    if math.isinf(snr_db) and snr_db > 0:
        silence = AudioClip(np.zeros(len(target)), target.sample_rate)
        return AudioClip(target.samples.copy(), target.sample_rate), silence
    target_rms = target.rms()
    interference_rms = interference.rms()
    if target_rms == 0.0:
        raise ZeroEnergyError("target has zero energy; SNR is undefined")
    if interference_rms == 0.0:
        raise ZeroEnergyError("interference has zero energy; SNR is undefined")
    beta = target_rms / (interference_rms * 10.0 ** (snr_db / 20.0))
    scaled = beta * interference.samples
    mixture = target.samples + scaled
    return (
        AudioClip(mixture, target.sample_rate),
        AudioClip(scaled, target.sample_rate),
    )


def random_clip(source: AudioClip, duration_sec: float, rng: np.random.Generator) -> AudioClip:
    """Cut a contiguous segment of round(duration_sec * sample_rate) samples
    at a uniformly random offset. Same RNG state -> same offset.
    """
    num = int(round(duration_sec * source.sample_rate))
    if num < 1:
        raise ValueError(f"requested duration {duration_sec}s is below one sample")
    if num > len(source):
        raise ClipTooShortError(
            f"source of {len(source)} samples is shorter than the requested "
            f"{num}; reject it (or loop-pad upstream) before sampling"
        )
    offset = int(rng.integers(0, len(source) - num + 1))
    return AudioClip(source.samples[offset : offset + num], source.sample_rate)


def read_wav(path) -> AudioClip:
    """Read a mono PCM WAV (16-bit int or 32-bit float) as a normalized clip."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV dtype {data.dtype}; use int16 or float32")
    return AudioClip(samples, int(sample_rate))


def write_wav(path, clip: AudioClip, dtype: str = "float32") -> None:
    """Write a clip as mono little-endian WAV, 32-bit float or 16-bit int."""
    if dtype == "float32":
        wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    elif dtype == "int16":
        scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        wavfile.write(path, clip.sample_rate, scaled.astype(np.int16))
    else:
        raise ValueError(f"unsupported WAV dtype {dtype!r}")
