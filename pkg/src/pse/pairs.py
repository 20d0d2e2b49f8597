"""Positive and negative contrastive mixture pairs.

A positive pair injects two different noises into the same noisy
reference (pseudo-source), so the inputs differ but share a target. A
negative pair adds one shared noise realization to two different
pseudo-sources, so the inputs are similar but the targets differ. Batches
carry T pairs of each kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from pse.audio import AudioClip, mix_at_snr, random_clip
from pse.corpus import AccessLog, AudioStore, PremixtureSet, noise_segment


@dataclass(frozen=True)
class PositivePair:
    """Shared pseudo-source, two independently scaled noises."""

    s_tilde: AudioClip
    x1: AudioClip
    x2: AudioClip
    n1_id: str
    n2_id: str


@dataclass(frozen=True)
class NegativePair:
    """Two distinct pseudo-sources deformed by one shared noise realization."""

    s1_tilde: AudioClip
    s2_tilde: AudioClip
    x1: AudioClip
    x2: AudioClip
    n_id: str


@dataclass(frozen=True)
class PairBatch:
    positives: tuple[PositivePair, ...]
    negatives: tuple[NegativePair, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        lengths = {len(p.s_tilde) for p in self.positives} | {len(p.s1_tilde) for p in self.negatives}
        if len(lengths) > 1:
            raise ValueError(f"pair batch mixes clip lengths: {sorted(lengths)}")


@dataclass(frozen=True)
class PairBatchEstimates:
    """Model outputs for every pair member, parallel to a PairBatch."""

    positive: tuple[tuple, ...]
    negative: tuple[tuple, ...]


def make_positive_pair(
    s_tilde: AudioClip,
    n1: AudioClip,
    n2: AudioClip,
    snr1_db: float,
    snr2_db: float,
    n1_id: str = "n1",
    n2_id: str = "n2",
) -> PositivePair:
    """Mix the pseudo-source with two distinct noise draws."""
    if n1_id == n2_id or np.array_equal(n1.samples, n2.samples):
        raise ValueError("degenerate positive pair: the two noise draws are identical")
    x1, _ = mix_at_snr(s_tilde, n1, snr1_db)
    x2, _ = mix_at_snr(s_tilde, n2, snr2_db)
    return PositivePair(s_tilde, x1, x2, n1_id, n2_id)


def make_negative_pair(
    s1_tilde: AudioClip,
    s2_tilde: AudioClip,
    n: AudioClip,
    snr_db_pair: float,
    n_id: str = "n",
) -> NegativePair:
    """Add one shared scaled noise to two distinct pseudo-sources.

    The noise level is anchored to the first source: it is scaled so that
    s1_tilde sits at snr_db_pair against it, then that same realization is
    added to both sources.
    """
    if np.array_equal(s1_tilde.samples, s2_tilde.samples):
        raise ValueError("degenerate negative pair: both sides use the same pseudo-source")
    x1, scaled = mix_at_snr(s1_tilde, n, snr_db_pair)
    x2 = AudioClip(s2_tilde.samples + scaled.samples, s2_tilde.sample_rate)
    return NegativePair(s1_tilde, s2_tilde, x1, x2, n_id)


def build_pair_batch(
    premixture_set: PremixtureSet,
    noise_entries,
    pair_count: int,
    snr_range_db: tuple[float, float],
    clip_sec: float,
    rng: np.random.Generator,
    store: AudioStore,
    log: AccessLog | None = None,
) -> PairBatch:
    """Draw `pair_count` positive and `pair_count` negative pairs.

    Pseudo-source clips come from the premixture set only (never hidden
    clean speech); noises come from the training-noise entries. Pair SNRs
    are drawn per mixture for positive pairs and once per pair for
    negative pairs, all from `snr_range_db`.
    """
    if len(premixture_set.items) < 2:
        raise ValueError("need at least two premixture items to build negative pairs")
    if pair_count < 1:
        raise ValueError("pair_count must be at least 1")
    lo, hi = snr_range_db

    positives = []
    for _ in range(pair_count):
        item = premixture_set.items[int(rng.integers(len(premixture_set.items)))]
        s_tilde = random_clip(item.premixed, clip_sec, rng)
        n1, id1 = noise_segment(noise_entries, len(s_tilde), rng, store, log)
        while True:
            n2, id2 = noise_segment(noise_entries, len(s_tilde), rng, store, log)
            if id2 != id1:
                break
        if log is not None:
            log.add(item.audio_id)
        positives.append(
            make_positive_pair(s_tilde, n1, n2, rng.uniform(lo, hi), rng.uniform(lo, hi), id1, id2)
        )

    negatives = []
    for _ in range(pair_count):
        i = int(rng.integers(len(premixture_set.items)))
        while True:
            j = int(rng.integers(len(premixture_set.items)))
            if j != i:
                break
        item1 = premixture_set.items[i]
        item2 = premixture_set.items[j]
        s1 = random_clip(item1.premixed, clip_sec, rng)
        s2 = random_clip(item2.premixed, clip_sec, rng)
        n, n_id = noise_segment(noise_entries, len(s1), rng, store, log)
        if log is not None:
            log.add(item1.audio_id)
            log.add(item2.audio_id)
        negatives.append(make_negative_pair(s1, s2, n, rng.uniform(lo, hi), n_id))

    return PairBatch(tuple(positives), tuple(negatives))


def stack_pair_batch(pairs: PairBatch, dtype=torch.float32) -> torch.Tensor:
    """Stack every pair member's input mixture into one [4T, samples]
    tensor ordered [pos x1..., pos x2..., neg x1..., neg x2...]."""
    rows = (
        [p.x1.samples for p in pairs.positives]
        + [p.x2.samples for p in pairs.positives]
        + [p.x1.samples for p in pairs.negatives]
        + [p.x2.samples for p in pairs.negatives]
    )
    return torch.from_numpy(np.stack(rows)).to(dtype)


def split_pair_estimates(pairs: PairBatch, estimates: torch.Tensor) -> PairBatchEstimates:
    """Undo `stack_pair_batch` ordering on a [4T, samples] estimate tensor."""
    t = len(pairs.positives)
    n = len(pairs.negatives)
    if estimates.shape[0] != 2 * t + 2 * n:
        raise ValueError("estimate rows do not match the pair batch")
    pos = tuple((estimates[i], estimates[t + i]) for i in range(t))
    neg = tuple((estimates[2 * t + i], estimates[2 * t + n + i]) for i in range(n))
    return PairBatchEstimates(pos, neg)
