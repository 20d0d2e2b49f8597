"""Experiment configuration: one YAML file drives a whole run.

Schema (all keys optional unless marked required):

    manifest: corpus/manifest.jsonl      # required; JSON Lines manifest
    output_dir: runs/exp1                # required; artifacts land here
    seed: 0                              # global seed; all stages derive from it
    test_speakers: [spk00, spk01]        # required; manifest speaker ids
    architecture: masknet64              # masknet64|masknet128|masknet256|separator
    scheme: cm                           # multispeaker|pseudose|cm|random-init
    premix_snr_db: 10.0                  # 5 or 10 (or .inf to disable premixing)
    allowed_premix_snrs_db: [5.0, 10.0]
    ft_budgets_sec: [0, 3]               # subset of {0,3,5,10,30,60}
    num_threads: 1                       # torch CPU threads (1 keeps runs bit-reproducible)
    train:
      batch_size: 128                    # 8 suggested for the separator
      pair_count: null                   # contrastive pairs per kind; default batch_size//2
      learning_rate: 1.0e-3              # 1e-4 suggested for the separator
      pretrain_steps: 1000
      finetune_steps: 300
      validation_every: 50
      patience: 10
      lambda_positive: 0.05
      lambda_negative: 1.0e-4
      clip_sec: 1.0
      snr_range_db: [-5.0, 5.0]
      loss_reduction: sum
      validation_mixtures: 16
      validation_fraction: 0.1
      grad_clip_norm: 5.0
    eval:
      n_mixtures: 100
      snr_range_db: [-5.0, 5.0]
      clip_sec: 1.0
      seed: 1234

CLI flags override the top-level fields; a frozen resolved copy is
written beside every run's outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from pse.evaluation import EvalProtocol
from pse.losses import ContrastiveWeights
from pse.models import ARCHITECTURES
from pse.training import FT_BUDGETS_SEC, SCHEMES, TrainConfig


class ConfigError(ValueError):
    """The experiment config file is missing, malformed, or invalid."""


@dataclass
class TrainSettings:
    batch_size: int = 128
    pair_count: int | None = None
    learning_rate: float = 1e-3
    pretrain_steps: int = 1000
    finetune_steps: int = 300
    validation_every: int = 50
    patience: int = 10
    lambda_positive: float = 0.05
    lambda_negative: float = 0.0001
    clip_sec: float = 1.0
    snr_range_db: tuple[float, float] = (-5.0, 5.0)
    loss_reduction: str = "sum"
    validation_mixtures: int = 16
    validation_fraction: float = 0.1
    grad_clip_norm: float = 5.0

    def train_config(self, scheme: str, seed: int, max_steps: int, ft_budget_sec: float = 0.0) -> TrainConfig:
        return TrainConfig(
            scheme=scheme,
            batch_size=self.batch_size,
            pair_count=self.pair_count,
            learning_rate=self.learning_rate,
            max_steps=max_steps,
            validation_every=self.validation_every,
            seed=seed,
            contrastive=ContrastiveWeights(self.lambda_positive, self.lambda_negative),
            ft_budget_sec=ft_budget_sec,
            clip_sec=self.clip_sec,
            snr_range_db=tuple(self.snr_range_db),
            patience=self.patience,
            grad_clip_norm=self.grad_clip_norm,
            loss_reduction=self.loss_reduction,
            validation_mixtures=self.validation_mixtures,
            validation_fraction=self.validation_fraction,
        )


@dataclass
class ExperimentConfig:
    manifest: str
    output_dir: str
    test_speakers: list[str]
    seed: int = 0
    architecture: str = "masknet64"
    scheme: str = "cm"
    premix_snr_db: float = 10.0
    allowed_premix_snrs_db: tuple[float, ...] = (5.0, 10.0)
    ft_budgets_sec: tuple[float, ...] = (0.0, 3.0)
    num_threads: int = 1
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalProtocol = field(default_factory=lambda: EvalProtocol(seed=1234))

    def validate(self) -> None:
        problems = []
        if not self.manifest:
            problems.append("manifest is required")
        if not self.output_dir:
            problems.append("output_dir is required")
        if not self.test_speakers:
            problems.append("test_speakers must name at least one speaker")
        if self.architecture not in ARCHITECTURES:
            problems.append(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}")
        if self.scheme not in SCHEMES:
            problems.append(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not math.isinf(self.premix_snr_db) and self.premix_snr_db not in self.allowed_premix_snrs_db:
            problems.append(
                f"premix_snr_db {self.premix_snr_db} not in allowed set {tuple(self.allowed_premix_snrs_db)}"
            )
        bad_budgets = [b for b in self.ft_budgets_sec if float(b) not in FT_BUDGETS_SEC]
        if bad_budgets:
            problems.append(f"ft_budgets_sec {bad_budgets} outside {FT_BUDGETS_SEC}")
        if not self.ft_budgets_sec:
            problems.append("ft_budgets_sec must not be empty")
        if self.num_threads < 1:
            problems.append("num_threads must be >= 1")
        if self.train.loss_reduction not in ("sum", "mean"):
            problems.append("train.loss_reduction must be 'sum' or 'mean'")
        if problems:
            raise ConfigError("invalid experiment config:\n  " + "\n  ".join(problems))

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["ft_budgets_sec"] = [float(b) for b in self.ft_budgets_sec]
        raw["allowed_premix_snrs_db"] = [float(b) for b in self.allowed_premix_snrs_db]
        raw["train"]["snr_range_db"] = list(self.train.snr_range_db)
        raw["eval"] = self.eval.to_dict()
        return raw

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)


_TOP_KEYS = {
    "manifest", "output_dir", "test_speakers", "seed", "architecture", "scheme",
    "premix_snr_db", "allowed_premix_snrs_db", "ft_budgets_sec", "num_threads",
    "train", "eval",
}


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key in ("manifest", "output_dir", "test_speakers"):
        if key not in raw:
            raise ConfigError(f"missing required config key {key!r}")
    try:
        train_raw = dict(raw.get("train", {}))
        unknown = sorted(set(train_raw) - {f.name for f in TrainSettings.__dataclass_fields__.values()})
        if unknown:
            raise ConfigError(f"unknown train keys: {unknown}")
        if "snr_range_db" in train_raw:
            train_raw["snr_range_db"] = tuple(float(v) for v in train_raw["snr_range_db"])
        train = TrainSettings(**train_raw)
        eval_raw = dict(raw.get("eval", {}))
        unknown = sorted(set(eval_raw) - {"n_mixtures", "snr_range_db", "clip_sec", "seed"})
        if unknown:
            raise ConfigError(f"unknown eval keys: {unknown}")
        if "snr_range_db" in eval_raw:
            eval_raw["snr_range_db"] = tuple(float(v) for v in eval_raw["snr_range_db"])
        protocol = EvalProtocol(**eval_raw)
        cfg = ExperimentConfig(
            manifest=str(raw["manifest"]),
            output_dir=str(raw["output_dir"]),
            test_speakers=[str(s) for s in raw["test_speakers"]],
            seed=int(raw.get("seed", 0)),
            architecture=str(raw.get("architecture", "masknet64")),
            scheme=str(raw.get("scheme", "cm")),
            premix_snr_db=float(raw.get("premix_snr_db", 10.0)),
            allowed_premix_snrs_db=tuple(float(v) for v in raw.get("allowed_premix_snrs_db", (5.0, 10.0))),
            ft_budgets_sec=tuple(float(v) for v in raw.get("ft_budgets_sec", (0.0, 3.0))),
            num_threads=int(raw.get("num_threads", 1)),
            train=train,
            eval=protocol,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    if base_dir is not None:
        if not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(base_dir / cfg.manifest)
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base_dir / cfg.output_dir)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)
