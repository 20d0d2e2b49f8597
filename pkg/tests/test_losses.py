import numpy as np
import pytest
import torch

from pse.losses import ContrastiveWeights, loss_cm_batch, loss_negative, loss_positive, se_loss
from pse.metrics import SDR_CAP_DB, sd_sdr
from pse.pairs import PairBatch, PairBatchEstimates, make_negative_pair, make_positive_pair
from pse.audio import AudioClip

from test_metrics import oracle_sd_sdr


def rand_signals(rng, n, length=8):
    return [rng.standard_normal(length) for _ in range(n)]


def finite_difference_grad(fn, x, h=1e-4):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2 * h)
    return grad


class TestSeLoss:
    def test_negation_of_sd_sdr(self, rng):
        for _ in range(50):
            v, v_hat = rand_signals(rng, 2, 32)
            assert float(se_loss(v, v_hat)) == pytest.approx(-sd_sdr(v, v_hat).value_db, rel=1e-10, abs=1e-10)

    def test_perfect_estimate_minimal(self):
        v = [0.4, -0.2, 0.6]
        assert float(se_loss(v, v)) == -SDR_CAP_DB

    def test_hand_example_zero(self):
        assert float(se_loss([1.0, 0.0], [1.0, 1.0])) == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(10):
            v = rng.standard_normal(32)
            v_hat = v + 0.4 * rng.standard_normal(32)
            est = torch.tensor(v_hat, requires_grad=True)
            loss = se_loss(torch.tensor(v), est)
            loss.backward()
            fd = finite_difference_grad(lambda e: oracle_sd_sdr(v, e) * -1.0, v_hat)
            analytic = est.grad.numpy()
            assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-4

    def test_batched_last_axis(self, rng):
        refs = rng.standard_normal((5, 16))
        ests = rng.standard_normal((5, 16))
        batched = se_loss(refs, ests)
        assert batched.shape == (5,)
        for i in range(5):
            assert float(batched[i]) == pytest.approx(float(se_loss(refs[i], ests[i])), rel=1e-12)


class TestPositivePairLoss:
    def test_compositional_oracle(self, rng):
        w = ContrastiveWeights(lambda_p=0.05)
        for _ in range(20):
            s, y1, y2 = rand_signals(rng, 3)
            expected = (-oracle_sd_sdr(s, y1)) + (-oracle_sd_sdr(s, y2)) + w.lambda_p * (-oracle_sd_sdr(y1, y2))
            assert float(loss_positive(s, y1, y2, w)) == pytest.approx(expected, rel=1e-9)

    def test_zero_weight_reduces_to_pseudo_enhancement_terms(self, rng):
        s, y1, y2 = rand_signals(rng, 3)
        w0 = ContrastiveWeights(lambda_p=0.0, lambda_n=0.0)
        assert float(loss_positive(s, y1, y2, w0)) == float(se_loss(s, y1) + se_loss(s, y2))

    def test_perfect_agreement_all_terms_capped(self):
        s = [0.2, -0.4, 0.3]
        w = ContrastiveWeights(lambda_p=0.05)
        assert float(loss_positive(s, s, s, w)) == pytest.approx(2 * -SDR_CAP_DB + 0.05 * -SDR_CAP_DB)

    def test_gradient_matches_finite_differences(self, rng):
        w = ContrastiveWeights()
        s = rng.standard_normal(32)
        y2 = s + 0.3 * rng.standard_normal(32)
        y1_np = s + 0.3 * rng.standard_normal(32)
        y1 = torch.tensor(y1_np, requires_grad=True)
        loss_positive(s, y1, torch.tensor(y2), w).backward()
        fd = finite_difference_grad(lambda e: float(loss_positive(s, e, y2, w)), y1_np)
        assert np.linalg.norm(y1.grad.numpy() - fd) / np.linalg.norm(fd) < 1e-4


class TestNegativePairLoss:
    def test_compositional_oracle(self, rng):
        w = ContrastiveWeights(lambda_n=0.0001)
        for _ in range(20):
            s1, s2, y1, y2 = rand_signals(rng, 4)
            expected = (
                -oracle_sd_sdr(s1, y1)
                - oracle_sd_sdr(s2, y2)
                + w.lambda_n * ((-oracle_sd_sdr(s1, s2)) - (-oracle_sd_sdr(y1, y2))) ** 2
            )
            assert float(loss_negative(s1, s2, y1, y2, w)) == pytest.approx(expected, rel=1e-9)

    def test_matched_dissimilarity_kills_contrastive_term(self, rng):
        s1, s2 = rand_signals(rng, 2)
        w = ContrastiveWeights(lambda_n=123.0)
        # estimates equal to the targets: estimate disagreement == target disagreement
        total = float(loss_negative(s1, s2, s1, s2, w))
        assert total == pytest.approx(2 * -SDR_CAP_DB)

    def test_zero_weight_reduces_to_two_terms(self, rng):
        s1, s2, y1, y2 = rand_signals(rng, 4)
        w0 = ContrastiveWeights(lambda_n=0.0)
        assert float(loss_negative(s1, s2, y1, y2, w0)) == float(se_loss(s1, y1) + se_loss(s2, y2))

    def test_identical_sources_warn(self, rng):
        s = rng.standard_normal(8)
        y1, y2 = rand_signals(rng, 2)
        with pytest.warns(UserWarning, match="degenerate"):
            loss_negative(s, s, y1, y2, ContrastiveWeights())

    def test_gradient_matches_finite_differences(self, rng):
        w = ContrastiveWeights(lambda_n=0.1)
        s1, s2 = rng.standard_normal(32), rng.standard_normal(32)
        y2_np = s2 + 0.2 * rng.standard_normal(32)
        y1_np = s1 + 0.2 * rng.standard_normal(32)
        y1 = torch.tensor(y1_np, requires_grad=True)
        loss_negative(s1, s2, y1, torch.tensor(y2_np), w).backward()
        fd = finite_difference_grad(lambda e: float(loss_negative(s1, s2, e, y2_np, w)), y1_np)
        assert np.linalg.norm(y1.grad.numpy() - fd) / np.linalg.norm(fd) < 1e-4


def tiny_pair_batch(rng, pair_count=2, length=64):
    positives, negatives = [], []
    sources = [AudioClip(0.5 + 0.3 * rng.standard_normal(length)) for _ in range(pair_count + 1)]
    for t in range(pair_count):
        s = sources[t]
        n1 = AudioClip(rng.standard_normal(length))
        n2 = AudioClip(rng.standard_normal(length))
        positives.append(make_positive_pair(s, n1, n2, 0.0, 3.0, f"n{t}a", f"n{t}b"))
        n = AudioClip(rng.standard_normal(length))
        negatives.append(make_negative_pair(sources[t], sources[t + 1], n, 1.0, f"n{t}c"))
    batch = PairBatch(tuple(positives), tuple(negatives))
    estimates = PairBatchEstimates(
        tuple((rng.standard_normal(length), rng.standard_normal(length)) for _ in range(pair_count)),
        tuple((rng.standard_normal(length), rng.standard_normal(length)) for _ in range(pair_count)),
    )
    return batch, estimates


class TestBatchLoss:
    def test_single_pair_equals_sum_of_pair_losses(self, rng):
        w = ContrastiveWeights()
        batch, est = tiny_pair_batch(rng, pair_count=1)
        p, n = batch.positives[0], batch.negatives[0]
        expected = float(loss_positive(p.s_tilde, est.positive[0][0], est.positive[0][1], w)) + float(
            loss_negative(n.s1_tilde, n.s2_tilde, est.negative[0][0], est.negative[0][1], w)
        )
        assert float(loss_cm_batch(batch, est, w)) == pytest.approx(expected, rel=1e-12)

    def test_pair_order_invariance(self, rng):
        w = ContrastiveWeights()
        batch, est = tiny_pair_batch(rng, pair_count=3)
        total = float(loss_cm_batch(batch, est, w))
        perm = [2, 0, 1]
        shuffled = PairBatch(
            tuple(batch.positives[i] for i in perm), tuple(batch.negatives[i] for i in perm)
        )
        shuffled_est = PairBatchEstimates(
            tuple(est.positive[i] for i in perm), tuple(est.negative[i] for i in perm)
        )
        assert float(loss_cm_batch(shuffled, shuffled_est, w)) == pytest.approx(total, rel=1e-12)

    def test_zero_weights_reduce_to_summed_pseudo_enhancement(self, rng):
        w0 = ContrastiveWeights(0.0, 0.0)
        batch, est = tiny_pair_batch(rng, pair_count=3)
        total = float(loss_cm_batch(batch, est, w0))
        composed = 0.0
        for p, (y1, y2) in zip(batch.positives, est.positive):
            composed += -oracle_sd_sdr(p.s_tilde.samples, y1) - oracle_sd_sdr(p.s_tilde.samples, y2)
        for n, (y1, y2) in zip(batch.negatives, est.negative):
            composed += -oracle_sd_sdr(n.s1_tilde.samples, y1) - oracle_sd_sdr(n.s2_tilde.samples, y2)
        assert total == pytest.approx(composed, rel=1e-9)

    def test_mean_reduction(self, rng):
        w = ContrastiveWeights()
        batch, est = tiny_pair_batch(rng, pair_count=2)
        total = float(loss_cm_batch(batch, est, w, reduction="sum"))
        mean = float(loss_cm_batch(batch, est, w, reduction="mean"))
        assert total == pytest.approx(mean * 4, rel=1e-12)  # 2 positive + 2 negative pairs

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            loss_cm_batch(PairBatch((), ()), PairBatchEstimates((), ()), ContrastiveWeights())

    def test_misaligned_estimates_rejected(self, rng):
        batch, est = tiny_pair_batch(rng, pair_count=2)
        bad = PairBatchEstimates(est.positive[:1], est.negative)
        with pytest.raises(ValueError, match="line up"):
            loss_cm_batch(batch, bad, ContrastiveWeights())


class TestContrastiveWeights:
    def test_defaults(self):
        w = ContrastiveWeights()
        assert w.lambda_p == 0.05 and w.lambda_n == 0.0001

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ContrastiveWeights(lambda_p=-1.0)
