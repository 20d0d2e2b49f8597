"""STFT analysis/synthesis and ratio-mask application.

Fixed analysis setup: 1024-sample periodic Hann window with 75% overlap
(hop 256), centered frames, synthesis-window-compensated overlap-add so
that istft(stft(x)) reconstructs x without global rescaling. The actual
transforms are delegated to torch.stft/torch.istft, which implement
exactly this convention; mask-based models reuse the mixture phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from pse.audio import AudioClip

WINDOW_SIZE = 1024
HOP_SIZE = WINDOW_SIZE // 4
NUM_BINS = WINDOW_SIZE // 2 + 1


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, [num_frames x num_bins]."""

    frames: np.ndarray
    window_size: int = WINDOW_SIZE
    hop: int = HOP_SIZE

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2:
            raise ValueError(f"expected [frames x bins] matrix, got shape {frames.shape}")
        if frames.shape[1] != self.window_size // 2 + 1:
            raise ValueError(
                f"got {frames.shape[1]} bins, expected {self.window_size // 2 + 1} "
                f"for a {self.window_size}-sample window"
            )
        if self.hop != self.window_size // 4:
            raise ValueError("hop must be window_size/4 (75% overlap)")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True)
class RatioMask:
    """Per-bin multiplicative gain in [0, 1], same shape as the magnitude."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected [frames x bins] matrix, got shape {values.shape}")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("ratio mask values must lie in [0, 1]")
        object.__setattr__(self, "values", values)


def _hann(dtype=torch.float64) -> torch.Tensor:
    return torch.hann_window(WINDOW_SIZE, periodic=True, dtype=dtype)


def stft_tensor(wave: torch.Tensor, window: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable STFT of [..., samples] -> complex [..., bins, frames]."""
    if window is None:
        window = _hann(wave.dtype)
    return torch.stft(
        wave,
        n_fft=WINDOW_SIZE,
        hop_length=HOP_SIZE,
        win_length=WINDOW_SIZE,
        window=window,
        center=True,
        return_complex=True,
    )


def istft_tensor(spec: torch.Tensor, length: int, window: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable inverse of `stft_tensor`, trimmed/padded to `length`."""
    if window is None:
        window = _hann(torch.float64 if spec.dtype == torch.complex128 else torch.float32)
    return torch.istft(
        spec,
        n_fft=WINDOW_SIZE,
        hop_length=HOP_SIZE,
        win_length=WINDOW_SIZE,
        window=window,
        center=True,
        length=length,
    )


def stft(clip: AudioClip) -> Spectrogram:
    """Analyze a clip of at least one window into complex frames."""
    if len(clip) < WINDOW_SIZE:
        raise ValueError(f"clip of {len(clip)} samples is shorter than the {WINDOW_SIZE}-sample window")
    spec = stft_tensor(torch.from_numpy(np.array(clip.samples)))
    return Spectrogram(spec.numpy().T)


def istft(spec: Spectrogram, length: int, sample_rate: int = 16000) -> AudioClip:
    """Overlap-add synthesis trimmed/padded to `length` samples."""
    if length < 1:
        raise ValueError("length must be positive")
    frames = torch.from_numpy(spec.frames.T)
    wave = istft_tensor(frames, length=length)
    return AudioClip(wave.numpy(), sample_rate)


def apply_mask(mixture_spec: Spectrogram, mask: RatioMask) -> Spectrogram:
    """Scale the complex frames by the mask; the mixture phase is kept."""
    if mask.values.shape != mixture_spec.frames.shape:
        raise ValueError(
            f"mask shape {mask.values.shape} does not match spectrogram {mixture_spec.frames.shape}"
        )
    return Spectrogram(mixture_spec.frames * mask.values, mixture_spec.window_size, mixture_spec.hop)


def ideal_ratio_mask(target_spec: Spectrogram, interference_spec: Spectrogram) -> RatioMask:
    """Oracle mask |S| / (|S| + |N|) of a known two-source decomposition."""
    s = target_spec.magnitude()
    n = interference_spec.magnitude()
    if s.shape != n.shape:
        raise ValueError("target and interference spectrograms must share a shape")
    denom = s + n
    values = np.divide(s, denom, out=np.zeros_like(s), where=denom > 0)
    return RatioMask(np.clip(values, 0.0, 1.0))
