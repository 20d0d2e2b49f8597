"""Pretraining schemes, initialization transfer, and few-shot finetuning.

Four initialization schemes share one Adam loop with validation-driven
model selection:

* multispeaker — supervised denoising of many-speaker mixtures;
* pseudose — self-supervised: denoise noise-injected premixtures back to
  the premixed (pseudo-source) targets;
* cm — contrastive mixtures: pseudo enhancement over positive/negative
  pair batches with estimate-agreement regularizers;
* random-init — no pretraining; finetuning starts from seeded random
  weights.

Finetuning is supervised training on the few-shot clean set; it copies
the pretrained weights verbatim and re-initializes optimizer state.
Every run is a pure function of (config, seed, corpus): samplers draw
from seeded generator streams and the trace records losses, validation
scores, and every audio id touched.
"""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass, field, replace, asdict

import numpy as np
import torch

from pse.audio import AudioClip
from pse.corpus import (
    AccessLog,
    AudioStore,
    PremixtureSet,
    require_min_duration,
    sample_pseudose_batch,
    sample_supervised_batch,
)
from pse.losses import ContrastiveWeights, loss_cm_batch, neg_sd_sdr
from pse.metrics import si_sdr_improvement
from pse.models import ModelCheckpoint, Provenance, checkpoint_from_model
from pse.pairs import build_pair_batch, split_pair_estimates, stack_pair_batch

SCHEMES = ("multispeaker", "pseudose", "cm", "random-init")
FT_BUDGETS_SEC = (0.0, 3.0, 5.0, 10.0, 30.0, 60.0)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    scheme: str = "multispeaker"
    batch_size: int = 128                 # 8 for the time-domain separator
    pair_count: int | None = None         # contrastive pairs of each kind; default batch_size // 2
    learning_rate: float = 1e-3           # 1e-4 suggested for the separator
    max_steps: int = 1000
    validation_every: int = 50
    seed: int = 0
    contrastive: ContrastiveWeights = field(default_factory=ContrastiveWeights)
    ft_budget_sec: float = 0.0
    clip_sec: float = 1.0
    snr_range_db: tuple[float, float] = (-5.0, 5.0)
    patience: int = 10                    # validations without improvement before stopping
    grad_clip_norm: float = 5.0
    loss_reduction: str = "sum"           # "mean" for lr comparability across batch sizes
    validation_mixtures: int = 16
    validation_fraction: float = 0.1      # material held out for validation

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if float(self.ft_budget_sec) not in FT_BUDGETS_SEC:
            raise ValueError(f"ft_budget_sec must be one of {FT_BUDGETS_SEC}")
        if self.batch_size < 1 or self.max_steps < 0 or self.validation_every < 1:
            raise ValueError("batch_size/validation_every must be >= 1 and max_steps >= 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")

    @property
    def pairs(self) -> int:
        return self.pair_count if self.pair_count is not None else max(1, self.batch_size // 2)


@dataclass
class TrainTrace:
    scheme: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    access: AccessLog = field(default_factory=AccessLog)

    def audio_ids(self) -> set[str]:
        return self.access.unique()

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"type": "header", "scheme": self.scheme, "seed": self.seed}) + "\n")
            for rec in self.steps:
                f.write(json.dumps({"type": "step", **rec}) + "\n")
            for rec in self.validations:
                f.write(json.dumps({"type": "validation", **rec}) + "\n")
            f.write(json.dumps({"type": "access", "ids": sorted(self.access.unique())}) + "\n")


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _forward(model, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


def _batch_tensors(batch, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([clip.samples for clip, _ in batch])).to(dtype)
    s = torch.from_numpy(np.stack([clip.samples for _, clip in batch])).to(dtype)
    return x, s


def _score_mixtures(model, mixtures) -> float:
    """Mean SI-SDR improvement of the model over the given frozen
    (mixture, target) pairs."""
    dtype = _model_dtype(model)
    x = torch.from_numpy(np.stack([m.samples for m, _ in mixtures])).to(dtype)
    with torch.no_grad():
        est = _forward(model, x).double().numpy()
    scores = [
        si_sdr_improvement(target, mix, est[i])
        for i, (mix, target) in enumerate(mixtures)
    ]
    return float(np.mean(scores))


def _supervised_loss(cfg: TrainConfig):
    def loss_fn(model, batch):
        x, s = _batch_tensors(batch, _model_dtype(model))
        est = _forward(model, x)
        per_item = neg_sd_sdr(s, est)
        total = per_item.sum() if cfg.loss_reduction == "sum" else per_item.mean()
        return total, float(total.detach()), 0.0

    return loss_fn


def _cm_loss(cfg: TrainConfig):
    def loss_fn(model, pair_batch):
        x = stack_pair_batch(pair_batch, _model_dtype(model))
        est = _forward(model, x)
        estimates = split_pair_estimates(pair_batch, est)
        total = loss_cm_batch(pair_batch, estimates, cfg.contrastive, cfg.loss_reduction)
        with torch.no_grad():
            detached = split_pair_estimates(pair_batch, est.detach())
            se_part = float(
                loss_cm_batch(pair_batch, detached, ContrastiveWeights(0.0, 0.0), cfg.loss_reduction)
            )
        return total, se_part, float(total.detach()) - se_part

    return loss_fn


def _fit(model, batches, loss_fn, val_mixtures, cfg: TrainConfig, trace: TrainTrace) -> int:
    """Adam loop with best-validation selection; returns the best step.

    The model is left holding the best-validation weights.
    """
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    best_score = _score_mixtures(model, val_mixtures)
    best_state = copy.deepcopy(model.state_dict())
    best_step = 0
    trace.validations.append({"step": 0, "val_sisdri_db": best_score})
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        batch = next(batches)
        total, se_part, reg_part = loss_fn(model, batch)
        if not math.isfinite(float(total.detach())):
            raise DivergenceError(f"non-finite loss at step {step}", trace)
        optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        optimizer.step()
        trace.steps.append(
            {"step": step, "loss": float(total.detach()), "se_term": se_part, "contrastive_term": reg_part}
        )
        if step % cfg.validation_every == 0:
            score = _score_mixtures(model, val_mixtures)
            trace.validations.append({"step": step, "val_sisdri_db": score})
            if score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
                best_step = step
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    return best_step


def _split_validation(items, fraction: float, rng: np.random.Generator):
    """Hold out a fraction of items for validation; tiny sets (< 4 items)
    validate on fresh mixtures of the same material instead."""
    items = list(items)
    if len(items) < 4:
        return items, items
    k = max(1, int(round(fraction * len(items))))
    order = rng.permutation(len(items))
    val = [items[int(i)] for i in order[:k]]
    train = [items[int(i)] for i in order[k:]]
    return train, val


def _streams(seed: int):
    batch_ss, val_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(batch_ss),
        np.random.default_rng(val_ss),
        np.random.default_rng(split_ss),
    )


def pretrain_multispeaker(
    model,
    speech_entries,
    noise_entries,
    cfg: TrainConfig,
    store: AudioStore,
    batches=None,
    val_mixtures=None,
) -> tuple[ModelCheckpoint, TrainTrace]:
    """Supervised pretraining on mixtures of many-speaker clean speech."""
    if cfg.ft_budget_sec:
        warnings.warn("ft_budget_sec is ignored during pretraining", stacklevel=2)
    trace = TrainTrace("multispeaker", cfg.seed)
    batch_rng, val_rng, split_rng = _streams(cfg.seed)
    if batches is None or val_mixtures is None:
        if not speech_entries:
            raise ValueError("empty speech set")
        require_min_duration(speech_entries, cfg.clip_sec)
        require_min_duration(noise_entries, cfg.clip_sec)
        train_entries, val_entries = _split_validation(speech_entries, cfg.validation_fraction, split_rng)
        if val_mixtures is None:
            val_mixtures = sample_supervised_batch(
                val_entries, noise_entries, cfg.validation_mixtures, cfg.snr_range_db,
                cfg.clip_sec, val_rng, store, trace.access,
            )
        if batches is None:
            batches = _endless(
                lambda: sample_supervised_batch(
                    train_entries, noise_entries, cfg.batch_size, cfg.snr_range_db,
                    cfg.clip_sec, batch_rng, store, trace.access,
                )
            )
    best_step = _fit(model, batches, _supervised_loss(cfg), val_mixtures, cfg, trace)
    ckpt = checkpoint_from_model(model, Provenance("multispeaker", cfg.seed, best_step))
    return ckpt, trace


def pretrain_pseudose(
    model,
    premixture_set: PremixtureSet,
    noise_entries,
    cfg: TrainConfig,
    store: AudioStore,
    batches=None,
    val_mixtures=None,
) -> tuple[ModelCheckpoint, TrainTrace]:
    """Self-supervised pretraining: recover premixed pseudo-sources from
    noise-injected inputs. Never touches hidden clean audio."""
    trace = TrainTrace("pseudose", cfg.seed)
    batch_rng, val_rng, split_rng = _streams(cfg.seed)
    if batches is None or val_mixtures is None:
        train_items, val_items = _split_validation(premixture_set.items, cfg.validation_fraction, split_rng)
        train_set = replace(premixture_set, items=tuple(train_items))
        val_set = replace(premixture_set, items=tuple(val_items))
        if val_mixtures is None:
            val_mixtures = sample_pseudose_batch(
                val_set, noise_entries, cfg.validation_mixtures, cfg.snr_range_db,
                cfg.clip_sec, val_rng, store, trace.access,
            )
        if batches is None:
            batches = _endless(
                lambda: sample_pseudose_batch(
                    train_set, noise_entries, cfg.batch_size, cfg.snr_range_db,
                    cfg.clip_sec, batch_rng, store, trace.access,
                )
            )
    best_step = _fit(model, batches, _supervised_loss(cfg), val_mixtures, cfg, trace)
    ckpt = checkpoint_from_model(
        model, Provenance("pseudose", cfg.seed, best_step, premix_snr_db=premixture_set.premix_snr_db)
    )
    return ckpt, trace


def pretrain_cm(
    model,
    premixture_set: PremixtureSet,
    noise_entries,
    cfg: TrainConfig,
    store: AudioStore,
    batches=None,
    val_mixtures=None,
) -> tuple[ModelCheckpoint, TrainTrace]:
    """Contrastive-mixtures pretraining over positive/negative pair batches."""
    if len(premixture_set.items) < 2:
        raise ValueError("contrastive pretraining needs at least two premixture items")
    trace = TrainTrace("cm", cfg.seed)
    batch_rng, val_rng, split_rng = _streams(cfg.seed)
    if batches is None or val_mixtures is None:
        train_items, val_items = _split_validation(premixture_set.items, cfg.validation_fraction, split_rng)
        train_set = replace(premixture_set, items=tuple(train_items))
        val_set = replace(premixture_set, items=tuple(val_items))
        if val_mixtures is None:
            val_mixtures = sample_pseudose_batch(
                val_set, noise_entries, cfg.validation_mixtures, cfg.snr_range_db,
                cfg.clip_sec, val_rng, store, trace.access,
            )
        if batches is None:
            batches = _endless(
                lambda: build_pair_batch(
                    train_set, noise_entries, cfg.pairs, cfg.snr_range_db,
                    cfg.clip_sec, batch_rng, store, trace.access,
                )
            )
    best_step = _fit(model, batches, _cm_loss(cfg), val_mixtures, cfg, trace)
    ckpt = checkpoint_from_model(
        model, Provenance("cm", cfg.seed, best_step, premix_snr_db=premixture_set.premix_snr_db)
    )
    return ckpt, trace


def finetune(
    checkpoint: ModelCheckpoint,
    finetune_entries,
    noise_entries,
    cfg: TrainConfig,
    store: AudioStore,
    batches=None,
    val_mixtures=None,
) -> tuple[ModelCheckpoint, TrainTrace]:
    """Supervised few-shot adaptation from a pretrained (or random)
    checkpoint; weights are copied verbatim and Adam state starts fresh.

    A zero-second budget returns the input checkpoint unchanged. Early
    stopping watches a fixed seeded set of validation mixtures drawn from
    the same few-shot material.
    """
    trace = TrainTrace(checkpoint.provenance.scheme, cfg.seed)
    if cfg.ft_budget_sec == 0:
        ckpt = replace(
            checkpoint,
            provenance=replace(checkpoint.provenance, ft_budget_sec=0.0),
        )
        return ckpt, trace
    if not finetune_entries and batches is None:
        raise ValueError("few-shot clean set is empty but ft_budget_sec > 0")
    model = checkpoint.build_model()
    model.train()
    batch_rng, val_rng, _ = _streams(cfg.seed)
    if batches is None or val_mixtures is None:
        require_min_duration(finetune_entries, cfg.clip_sec)
        if val_mixtures is None:
            # mixture-level holdout: fresh noise/offset/SNR draws over the
            # same few seconds of clean speech
            val_mixtures = sample_supervised_batch(
                finetune_entries, noise_entries, cfg.validation_mixtures, cfg.snr_range_db,
                cfg.clip_sec, val_rng, store, trace.access,
            )
        if batches is None:
            batches = _endless(
                lambda: sample_supervised_batch(
                    finetune_entries, noise_entries, cfg.batch_size, cfg.snr_range_db,
                    cfg.clip_sec, batch_rng, store, trace.access,
                )
            )
    best_step = _fit(model, batches, _supervised_loss(cfg), val_mixtures, cfg, trace)
    provenance = replace(
        checkpoint.provenance, seed=cfg.seed, step=best_step, ft_budget_sec=float(cfg.ft_budget_sec)
    )
    return checkpoint_from_model(model, provenance), trace


def _endless(make_batch):
    def gen():
        while True:
            yield make_batch()

    return gen()
