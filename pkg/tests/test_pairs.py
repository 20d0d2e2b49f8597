import numpy as np
import pytest

from pse.audio import AudioClip, mix_at_snr
from pse.corpus import AccessLog, build_premixture
from pse.pairs import (
    PairBatch,
    build_pair_batch,
    make_negative_pair,
    make_positive_pair,
    split_pair_estimates,
    stack_pair_batch,
)

from conftest import harmonic_clip, noise_clip

ATOL = 1e-12  # machine-precision "exact" for unit-scale audio


class TestPositivePair:
    def test_members_differ_by_scaled_noises(self, rng):
        s = harmonic_clip(4096, seed=1)
        n1 = noise_clip(4096, seed=2)
        n2 = noise_clip(4096, seed=3)
        pair = make_positive_pair(s, n1, n2, 0.0, 4.0, "a", "b")
        _, scaled1 = mix_at_snr(s, n1, 0.0)
        _, scaled2 = mix_at_snr(s, n2, 4.0)
        np.testing.assert_allclose(
            pair.x1.samples - pair.x2.samples, scaled1.samples - scaled2.samples, rtol=0, atol=ATOL
        )
        np.testing.assert_allclose(pair.x1.samples - s.samples, scaled1.samples, rtol=0, atol=ATOL)
        np.testing.assert_allclose(pair.x2.samples - s.samples, scaled2.samples, rtol=0, atol=ATOL)
        assert pair.n1_id != pair.n2_id

    def test_orthogonal_unit_noises_at_zero_db(self):
        sr = 16000
        t = np.arange(sr) / sr
        s = AudioClip(np.sin(2 * np.pi * 100 * t))
        n1 = AudioClip(np.sin(2 * np.pi * 200 * t))
        n2 = AudioClip(np.cos(2 * np.pi * 300 * t))
        pair = make_positive_pair(s, n1, n2, 0.0, 0.0)
        # equal-power draws at 0 dB keep unit scaling: x1 - x2 = n1 - n2
        np.testing.assert_allclose(
            pair.x1.samples - pair.x2.samples, n1.samples - n2.samples, rtol=0, atol=1e-9
        )

    def test_identical_noise_rejected(self):
        s = harmonic_clip(2048)
        n = noise_clip(2048)
        with pytest.raises(ValueError, match="degenerate positive"):
            make_positive_pair(s, n, n, 0.0, 0.0, "same", "same")


class TestNegativePair:
    def test_shared_deformation_cancels(self):
        s1 = harmonic_clip(4096, f0=150.0, seed=4)
        s2 = harmonic_clip(4096, f0=260.0, seed=5)
        n = noise_clip(4096, seed=6)
        pair = make_negative_pair(s1, s2, n, 2.0)
        np.testing.assert_allclose(
            pair.x1.samples - pair.x2.samples, s1.samples - s2.samples, rtol=0, atol=ATOL
        )
        # both members carry the same scaled-noise realization
        np.testing.assert_allclose(
            pair.x1.samples - s1.samples, pair.x2.samples - s2.samples, rtol=0, atol=ATOL
        )

    def test_snr_anchored_to_first_source(self):
        s1 = harmonic_clip(4096, f0=150.0, seed=4)
        s2 = harmonic_clip(4096, f0=260.0, seed=5)
        n = noise_clip(4096, seed=6)
        pair = make_negative_pair(s1, s2, n, 3.5)
        scaled = pair.x1.samples - s1.samples
        measured = 20 * np.log10(s1.rms() / np.sqrt(np.mean(scaled**2)))
        assert abs(measured - 3.5) < 1e-6

    def test_same_source_rejected(self):
        s = harmonic_clip(2048)
        with pytest.raises(ValueError, match="degenerate negative"):
            make_negative_pair(s, s, noise_clip(2048), 0.0)

    def test_same_speaker_different_utterances_accepted(self):
        s1 = harmonic_clip(2048, f0=180.0, seed=1)
        s2 = harmonic_clip(2048, f0=180.0, seed=2)  # same voice, different utterance
        pair = make_negative_pair(s1, s2, noise_clip(2048), 0.0)
        assert pair.x1.samples.shape == pair.x2.samples.shape


@pytest.fixture
def premix(tiny_corpus):
    p = tiny_corpus["partition"]
    return build_premixture(
        p.test_clean["spk00"], p.noise_premix, 10.0, seed=13, store=tiny_corpus["store"]
    )


class TestPairBatch:
    def test_deterministic(self, tiny_corpus, premix):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        a = build_pair_batch(premix, p.noise_train, 4, (-5, 5), 1.0, np.random.default_rng(3), store)
        b = build_pair_batch(premix, p.noise_train, 4, (-5, 5), 1.0, np.random.default_rng(3), store)
        for pa, pb in zip(a.positives, b.positives):
            np.testing.assert_array_equal(pa.x1.samples, pb.x1.samples)
            np.testing.assert_array_equal(pa.x2.samples, pb.x2.samples)
        for na, nb in zip(a.negatives, b.negatives):
            np.testing.assert_array_equal(na.x1.samples, nb.x1.samples)

    def test_invariant_sweep(self, tiny_corpus, premix):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        log = AccessLog()
        batch = build_pair_batch(premix, p.noise_train, 64, (-5, 5), 1.0,
                                 np.random.default_rng(17), store, log)
        assert len(batch.positives) == len(batch.negatives) == 64
        for pair in batch.positives:
            assert pair.n1_id != pair.n2_id
            assert len(pair.x1) == len(pair.x2) == len(pair.s_tilde) == 16000
        for pair in batch.negatives:
            assert not np.array_equal(pair.s1_tilde.samples, pair.s2_tilde.samples)
            np.testing.assert_allclose(
                pair.x1.samples - pair.x2.samples,
                pair.s1_tilde.samples - pair.s2_tilde.samples,
                rtol=0, atol=ATOL,
            )
        # privacy: only premixture ids and noise paths were touched
        clean_paths = {e.path for e in p.test_clean["spk00"]}
        assert not (log.unique() & clean_paths)

    def test_too_few_items_rejected(self, tiny_corpus, premix):
        p = tiny_corpus["partition"]
        single = type(premix)(premix.speaker_id, premix.premix_snr_db, premix.items[:1])
        with pytest.raises(ValueError, match="at least two"):
            build_pair_batch(single, p.noise_train, 2, (-5, 5), 1.0,
                             np.random.default_rng(0), tiny_corpus["store"])

    def test_mixed_lengths_rejected(self):
        s1 = harmonic_clip(2048, seed=1)
        s2 = harmonic_clip(4096, seed=2)
        pos = make_positive_pair(s1, noise_clip(2048, seed=3), noise_clip(2048, seed=4), 0, 0)
        neg = make_negative_pair(s2, harmonic_clip(4096, seed=9), noise_clip(4096, seed=5), 0)
        with pytest.raises(ValueError, match="lengths"):
            PairBatch((pos,), (neg,))

    def test_stack_and_split_round_trip(self, tiny_corpus, premix):
        import torch

        p = tiny_corpus["partition"]
        batch = build_pair_batch(premix, p.noise_train, 3, (-5, 5), 1.0,
                                 np.random.default_rng(2), tiny_corpus["store"])
        stacked = stack_pair_batch(batch, torch.float64)
        assert stacked.shape == (12, 16000)
        est = split_pair_estimates(batch, stacked)
        np.testing.assert_array_equal(est.positive[0][0].numpy(), batch.positives[0].x1.samples)
        np.testing.assert_array_equal(est.positive[2][1].numpy(), batch.positives[2].x2.samples)
        np.testing.assert_array_equal(est.negative[1][0].numpy(), batch.negatives[1].x1.samples)
        np.testing.assert_array_equal(est.negative[2][1].numpy(), batch.negatives[2].x2.samples)
