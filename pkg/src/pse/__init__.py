"""Personalized speech enhancement toolkit.

Small recurrent mask estimators and a compact time-domain separator,
pretrained with either multi-speaker supervision or self-supervision on a
single speaker's noisy recordings (pseudo speech enhancement and
contrastive mixtures), then finetuned on a few seconds of clean speech and
scored with SI-SDR improvement.
"""

from pse.audio import AudioClip, ClipTooShortError, ZeroEnergyError, mix_at_snr, random_clip, read_wav, write_wav
from pse.stft import RatioMask, Spectrogram, apply_mask, ideal_ratio_mask, istft, stft
from pse.metrics import SDR_CAP_DB, SdrResult, sd_sdr, si_sdr, si_sdr_improvement
from pse.losses import ContrastiveWeights, loss_cm_batch, loss_negative, loss_positive, se_loss

__version__ = "0.1.0"
