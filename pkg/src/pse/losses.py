"""Differentiable training objectives built on negated SD-SDR.

The enhancement loss of an estimate y against a reference v is
E(v||y) = -SD-SDR(v||y); contrastive pair losses combine several such
terms:

    positive pair:  E(t||y1) + E(t||y2) + lambda_p * E(y1||y2)
    negative pair:  E(t1||y1) + E(t2||y2)
                    + lambda_n * (E(t1||t2) - E(y1||y2))^2

All functions accept torch tensors (gradients flow through estimate
arguments), numpy arrays, or AudioClips, operate on the last axis, and
broadcast over leading batch axes. Values are clamped to +/-50 dB exactly
like the evaluation metrics; gradients are zero on the clamped region.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from pse.metrics import SDR_CAP_DB, SDR_EPS


@dataclass(frozen=True)
class ContrastiveWeights:
    """Scales of the estimate-to-estimate regularizers."""

    lambda_p: float = 0.05
    lambda_n: float = 0.0001

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_n < 0:
            raise ValueError("contrastive weights must be non-negative")


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    arr = np.array(getattr(v, "samples", v), dtype=np.float64)
    return torch.from_numpy(arr)


def neg_sd_sdr(ref: torch.Tensor, est: torch.Tensor) -> torch.Tensor:
    """-SD-SDR(ref||est) along the last axis; leading axes broadcast."""
    ref = _as_tensor(ref)
    est = _as_tensor(est)
    alpha = (est * ref).sum(dim=-1) / (ref * ref).sum(dim=-1)
    num = alpha.square() * (ref * ref).sum(dim=-1) + SDR_EPS
    den = (ref - est).square().sum(dim=-1) + SDR_EPS
    sdr = 10.0 * torch.log10(num / den)
    return -torch.clamp(sdr, -SDR_CAP_DB, SDR_CAP_DB)


def se_loss(v, v_hat) -> torch.Tensor:
    """Enhancement loss E(v||v_hat) = -SD-SDR; minimal at -50 dB."""
    return neg_sd_sdr(v, v_hat)


def loss_positive(s_tilde, y1, y2, w: ContrastiveWeights) -> torch.Tensor:
    """Positive-pair loss: both estimates chase the shared target and,
    weighted by lambda_p, each other."""
    total = se_loss(s_tilde, y1) + se_loss(s_tilde, y2)
    if w.lambda_p != 0.0:
        total = total + w.lambda_p * se_loss(y1, y2)
    return total


def loss_negative(s1_tilde, s2_tilde, y1, y2, w: ContrastiveWeights) -> torch.Tensor:
    """Negative-pair loss: each estimate chases its own target, and the
    estimate disagreement is pulled toward the target disagreement."""
    t1 = _as_tensor(s1_tilde)
    t2 = _as_tensor(s2_tilde)
    if bool((t1.detach() == t2.detach()).all(dim=-1).any()):
        warnings.warn("degenerate negative pair: identical targets", stacklevel=2)
    total = se_loss(t1, y1) + se_loss(t2, y2)
    if w.lambda_n != 0.0:
        total = total + w.lambda_n * (se_loss(t1, t2) - se_loss(y1, y2)).square()
    return total


def loss_cm_batch(pairs, estimates, w: ContrastiveWeights, reduction: str = "sum") -> torch.Tensor:
    """Contrastive-mixtures batch loss: positive-pair losses plus
    negative-pair losses over the whole batch.

    `pairs` is a PairBatch; `estimates` is a PairBatchEstimates holding
    the model outputs for every pair member, in the same order. Reduction
    over pairs is "sum" (default) or "mean".
    """
    if len(pairs.positives) == 0 and len(pairs.negatives) == 0:
        raise ValueError("empty pair batch")
    if len(estimates.positive) != len(pairs.positives) or len(estimates.negative) != len(pairs.negatives):
        raise ValueError("estimates do not line up with the pair batch")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    terms = []
    if pairs.positives:
        targets = torch.stack([_as_tensor(p.s_tilde) for p in pairs.positives])
        y1 = torch.stack([_as_tensor(e[0]) for e in estimates.positive])
        y2 = torch.stack([_as_tensor(e[1]) for e in estimates.positive])
        terms.append(loss_positive(targets, y1, y2, w))
    if pairs.negatives:
        t1 = torch.stack([_as_tensor(p.s1_tilde) for p in pairs.negatives])
        t2 = torch.stack([_as_tensor(p.s2_tilde) for p in pairs.negatives])
        y1 = torch.stack([_as_tensor(e[0]) for e in estimates.negative])
        y2 = torch.stack([_as_tensor(e[1]) for e in estimates.negative])
        terms.append(loss_negative(t1, t2, y1, y2, w))
    per_pair = torch.cat(terms)
    return per_pair.sum() if reduction == "sum" else per_pair.mean()
