"""Enhancement models and portable checkpoints.

Two families:

* MaskNet: magnitude spectrogram -> 2-layer GRU -> dense + sigmoid ratio
  mask in [0, 1], applied to the complex mixture spectrogram (mixture
  phase kept) and resynthesized to the input length.
* Separator: a compact time-domain encoder/mask/decoder network in the
  Conv-TasNet style, smallest configuration (128 encoder filters),
  single output source.

Checkpoints are zip archives holding a JSON metadata header (model kind,
config, provenance, tensor directory) plus raw little-endian float32
tensor blobs, so transfers between pretraining and finetuning copy
weights verbatim.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from pse.audio import AudioClip
from pse.stft import HOP_SIZE, NUM_BINS, WINDOW_SIZE, RatioMask, istft_tensor, stft_tensor

CHECKPOINT_FORMAT = "pse-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or inconsistent with its config."""


@dataclass(frozen=True)
class MaskNetConfig:
    hidden_size: int = 64
    num_layers: int = 2
    num_bins: int = NUM_BINS
    mask_activation: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_size not in (64, 128, 256):
            raise ValueError(f"hidden_size must be 64, 128, or 256, got {self.hidden_size}")
        if self.num_layers != 2:
            raise ValueError("mask estimator is fixed at 2 recurrent layers")
        if self.num_bins != NUM_BINS:
            raise ValueError(f"num_bins must be {NUM_BINS} for the fixed analysis window")
        if self.mask_activation != "sigmoid":
            raise ValueError("mask activation must be the bounded [0,1] sigmoid")


@dataclass(frozen=True)
class SeparatorConfig:
    """Smallest Conv-TasNet-style setup; only num_filters is load-bearing,
    the rest follow the cited small configuration."""

    num_filters: int = 128
    filter_length: int = 40
    bottleneck_channels: int = 128
    conv_channels: int = 256
    skip_channels: int = 128
    kernel_size: int = 3
    blocks_per_stack: int = 7
    num_stacks: int = 2

    def __post_init__(self):
        if self.num_filters != 128:
            raise ValueError("separator is pinned at its smallest configuration (128 filters)")


class MaskNet(nn.Module):
    """Recurrent time-frequency ratio-mask estimator."""

    def __init__(self, config: MaskNetConfig | None = None):
        super().__init__()
        self.config = config or MaskNetConfig()
        self.gru = nn.GRU(
            input_size=self.config.num_bins,
            hidden_size=self.config.hidden_size,
            num_layers=self.config.num_layers,
            batch_first=True,
        )
        self.mask_head = nn.Linear(self.config.hidden_size, self.config.num_bins)
        self.register_buffer("window", torch.hann_window(WINDOW_SIZE, periodic=True))

    def forward(self, mixture: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[batch, samples] -> (estimate [batch, samples], mask [batch, frames, bins])."""
        if mixture.dim() != 2:
            raise ValueError(f"expected [batch, samples], got shape {tuple(mixture.shape)}")
        length = mixture.shape[-1]
        if length < WINDOW_SIZE:
            raise ValueError(f"input of {length} samples is shorter than the {WINDOW_SIZE}-sample window")
        spec = stft_tensor(mixture, self.window)          # [B, bins, frames]
        features = spec.abs().transpose(1, 2)             # [B, frames, bins]
        hidden, _ = self.gru(features)
        mask = torch.sigmoid(self.mask_head(hidden))      # [B, frames, bins]
        masked = spec * mask.transpose(1, 2).to(spec.dtype)
        estimate = istft_tensor(masked, length=length, window=self.window)
        return estimate, mask

    @torch.no_grad()
    def enhance(self, clip: AudioClip) -> tuple[AudioClip, RatioMask]:
        dtype = next(self.parameters()).dtype
        wave = torch.from_numpy(np.array(clip.samples)).to(dtype).unsqueeze(0)
        estimate, mask = self.forward(wave)
        return (
            AudioClip(estimate.squeeze(0).double().numpy(), clip.sample_rate),
            RatioMask(np.clip(mask.squeeze(0).double().numpy(), 0.0, 1.0)),
        )


class _GlobalLayerNorm(nn.Module):
    """Normalize over channels and time jointly (non-causal)."""

    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return self.gain * (x - mean) / torch.sqrt(var + 1e-8) + self.bias


class _ConvBlock(nn.Module):
    """1x1 conv -> depthwise dilated conv, with residual and skip outputs."""

    def __init__(self, cfg: SeparatorConfig, dilation: int):
        super().__init__()
        self.expand = nn.Conv1d(cfg.bottleneck_channels, cfg.conv_channels, 1)
        self.act1 = nn.PReLU()
        self.norm1 = _GlobalLayerNorm(cfg.conv_channels)
        self.depthwise = nn.Conv1d(
            cfg.conv_channels,
            cfg.conv_channels,
            cfg.kernel_size,
            padding=dilation * (cfg.kernel_size - 1) // 2,
            dilation=dilation,
            groups=cfg.conv_channels,
        )
        self.act2 = nn.PReLU()
        self.norm2 = _GlobalLayerNorm(cfg.conv_channels)
        self.residual = nn.Conv1d(cfg.conv_channels, cfg.bottleneck_channels, 1)
        self.skip = nn.Conv1d(cfg.conv_channels, cfg.skip_channels, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.norm1(self.act1(self.expand(x)))
        h = self.norm2(self.act2(self.depthwise(h)))
        return x + self.residual(h), self.skip(h)


class Separator(nn.Module):
    """Compact time-domain denoiser: learned encoder, masked bottleneck
    TCN, learned decoder; single estimated source."""

    def __init__(self, config: SeparatorConfig | None = None):
        super().__init__()
        self.config = config or SeparatorConfig()
        cfg = self.config
        self.stride = cfg.filter_length // 2
        self.encoder = nn.Conv1d(1, cfg.num_filters, cfg.filter_length, stride=self.stride, bias=False)
        self.input_norm = _GlobalLayerNorm(cfg.num_filters)
        self.bottleneck = nn.Conv1d(cfg.num_filters, cfg.bottleneck_channels, 1)
        self.blocks = nn.ModuleList(
            _ConvBlock(cfg, dilation=2**i)
            for _ in range(cfg.num_stacks)
            for i in range(cfg.blocks_per_stack)
        )
        self.mask_act = nn.PReLU()
        self.mask_head = nn.Conv1d(cfg.skip_channels, cfg.num_filters, 1)
        self.decoder = nn.ConvTranspose1d(
            cfg.num_filters, 1, cfg.filter_length, stride=self.stride, bias=False
        )

    def forward(self, mixture: torch.Tensor) -> torch.Tensor:
        """[batch, samples] -> [batch, samples]."""
        if mixture.dim() != 2:
            raise ValueError(f"expected [batch, samples], got shape {tuple(mixture.shape)}")
        length = mixture.shape[-1]
        if length < self.config.filter_length:
            raise ValueError(
                f"input of {length} samples is shorter than the {self.config.filter_length}-sample encoder filter"
            )
        pad = (-(length - self.config.filter_length)) % self.stride
        x = torch.nn.functional.pad(mixture.unsqueeze(1), (0, pad))
        rep = torch.relu(self.encoder(x))
        h = self.bottleneck(self.input_norm(rep))
        skip_sum = 0.0
        for block in self.blocks:
            h, skip = block(h)
            skip_sum = skip_sum + skip
        mask = torch.sigmoid(self.mask_head(self.mask_act(skip_sum)))
        estimate = self.decoder(rep * mask).squeeze(1)
        return estimate[..., :length]

    @torch.no_grad()
    def enhance(self, clip: AudioClip) -> AudioClip:
        dtype = next(self.parameters()).dtype
        wave = torch.from_numpy(np.array(clip.samples)).to(dtype).unsqueeze(0)
        estimate = self.forward(wave)
        return AudioClip(estimate.squeeze(0).double().numpy(), clip.sample_rate)


ARCHITECTURES = {
    "masknet64": lambda: MaskNet(MaskNetConfig(hidden_size=64)),
    "masknet128": lambda: MaskNet(MaskNetConfig(hidden_size=128)),
    "masknet256": lambda: MaskNet(MaskNetConfig(hidden_size=256)),
    "separator": lambda: Separator(SeparatorConfig()),
}


def build_architecture(name: str, seed: int | None = None) -> nn.Module:
    """Construct a fresh model, optionally with seeded weight init."""
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    if seed is not None:
        torch.manual_seed(seed)
    return ARCHITECTURES[name]()


def config_for(model: nn.Module):
    return model.config


def architecture_name(model: nn.Module) -> str:
    if isinstance(model, MaskNet):
        return f"masknet{model.config.hidden_size}"
    if isinstance(model, Separator):
        return "separator"
    raise ValueError(f"unrecognized model type {type(model).__name__}")


def param_count(config: MaskNetConfig | SeparatorConfig) -> int:
    """Exact number of trainable scalars for a model config."""
    model = MaskNet(config) if isinstance(config, MaskNetConfig) else Separator(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass(frozen=True)
class Provenance:
    scheme: str
    seed: int
    step: int
    premix_snr_db: float | None = None
    ft_budget_sec: float | None = None
    speaker_id: str | None = None


@dataclass(frozen=True)
class ModelCheckpoint:
    kind: str                      # "masknet" | "separator"
    config: MaskNetConfig | SeparatorConfig
    state: dict[str, np.ndarray]   # float32 tensors, state_dict order
    provenance: Provenance

    def build_model(self) -> nn.Module:
        model = MaskNet(self.config) if self.kind == "masknet" else Separator(self.config)
        reference = model.state_dict()
        if set(reference) != set(self.state):
            missing = sorted(set(reference) ^ set(self.state))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing}")
        loaded = {}
        for name, ref in reference.items():
            arr = self.state[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}"
                )
            loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        model.load_state_dict(loaded)
        model.eval()
        return model


def checkpoint_from_model(model: nn.Module, provenance: Provenance) -> ModelCheckpoint:
    kind = "masknet" if isinstance(model, MaskNet) else "separator"
    state = {
        name: tensor.detach().cpu().to(torch.float32).numpy().copy()
        for name, tensor in model.state_dict().items()
    }
    return ModelCheckpoint(kind, model.config, state, provenance)


def save_checkpoint(checkpoint: ModelCheckpoint, path) -> None:
    """Write the zip archive: meta.json + one raw float32 blob per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    for i, (name, arr) in enumerate(checkpoint.state.items()):
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        file = f"tensors/{i:04d}.bin"
        tensors.append({"name": name, "shape": list(arr32.shape), "dtype": "float32", "file": file})
        blobs.append((file, arr32.astype("<f4").tobytes()))
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": checkpoint.kind,
        "config": asdict(checkpoint.config),
        "provenance": asdict(checkpoint.provenance),
        "tensors": tensors,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep checkpoint bytes reproducible
        def write(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        write("meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for file, data in blobs:
            write(file, data)


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
            state = {}
            for spec in meta["tensors"]:
                raw = zf.read(spec["file"])
                arr = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).astype(np.float32)
                state[spec["name"]] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    kind = meta["kind"]
    config = MaskNetConfig(**meta["config"]) if kind == "masknet" else SeparatorConfig(**meta["config"])
    provenance = Provenance(**meta["provenance"])
    return ModelCheckpoint(kind, config, state, provenance)
