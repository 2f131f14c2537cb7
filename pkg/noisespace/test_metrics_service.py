"""
Test PSNR, the clustering diversity score and average pairwise cosine similarity.
"""

import math
import unittest

import numpy as np
import pytest
from scipy import stats

from noisespace.app.errors import ContractViolationError, DegenerateSampleSetError
from noisespace.app.services.forward_operators import DFTMagnitudeOperator, LikelihoodModel, Measurement
from noisespace.app.services.generative_maps import AffineMap
from noisespace.app.services.metrics_service import (
    SampleSet,
    avg_pairwise_cosine,
    default_cluster_count,
    diversity_score,
    psnr,
    summarize,
)
from noisespace.app.services.sampler_service import SamplerConfig, run_chain
from noisespace.app.utils.rng import CounterStream, Purpose


def _two_clusters(n_per=50, seed=0):
    stream = CounterStream(seed, purpose=Purpose.ORACLE)
    a = 0.1 * stream.normal(0, (n_per, 2))
    b = np.array([10.0, 10.0]) + 0.1 * stream.normal(1, (n_per, 2))
    return np.vstack([a, b])


class TestPSNR(unittest.TestCase):
    """Peak signal-to-noise ratio"""

    def test_known_mse(self):
        """MSE 0.04 over range 2 gives exactly 20 dB"""
        x = np.array([0.2, -0.2, 0.2, -0.2])
        self.assertAlmostEqual(psnr(x, np.zeros(4)), 20.0, places=10)

    def test_constant_offset(self):
        ref = np.linspace(-0.5, 0.5, 9)
        self.assertAlmostEqual(psnr(ref + 0.2, ref), 20.0, places=10)

    def test_identical_is_infinite(self):
        x = np.array([0.1, 0.5, -0.3])
        self.assertEqual(psnr(x, x), math.inf)

    def test_length_mismatch(self):
        with self.assertRaises(ContractViolationError):
            psnr([0.0, 1.0], [0.0, 1.0, 2.0])

    def test_symmetric_and_order_free(self):
        stream = CounterStream(21, purpose=Purpose.ORACLE)
        gen = stream.generator(0)
        for i in range(5):
            x = stream.normal(1 + i, 16)
            ref = stream.normal(100 + i, 16)
            order = gen.permutation(16)
            self.assertAlmostEqual(psnr(x, ref), psnr(ref, x), places=12)
            self.assertAlmostEqual(psnr(x[order], ref[order]), psnr(x, ref), places=10)


class TestDiversityScore(unittest.TestCase):
    """k-means inter / intra cluster distance ratio"""

    def test_identical_samples_are_degenerate(self):
        s = SampleSet(np.tile([0.5, -0.5], (10, 1)))
        with self.assertRaises(DegenerateSampleSetError):
            diversity_score(s)

    def test_two_tight_clusters_score_high(self):
        s = SampleSet(_two_clusters())
        self.assertGreater(diversity_score(s, k=2), 50.0)

    def test_single_blob_scores_lower_than_two_clusters(self):
        blob = SampleSet(CounterStream(5, purpose=Purpose.ORACLE).normal(0, (200, 2)))
        clustered = SampleSet(_two_clusters(100))
        self.assertLess(diversity_score(blob, k=2), diversity_score(clustered, k=2))

    def test_invariant_to_rotation_and_scale(self):
        x = _two_clusters(seed=3)
        theta = 0.7
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        base = diversity_score(SampleSet(x), k=2, seed=1)
        self.assertAlmostEqual(diversity_score(SampleSet(x @ rot.T), k=2, seed=1), base, places=6)
        self.assertAlmostEqual(diversity_score(SampleSet(3.5 * x), k=2, seed=1), base, places=6)

    def test_requires_enough_samples(self):
        with self.assertRaises(ContractViolationError):
            diversity_score(SampleSet(np.eye(3)), k=3)
        with self.assertRaises(ContractViolationError):
            diversity_score(SampleSet(np.eye(3)), k=1)

    def test_default_cluster_count(self):
        self.assertEqual(default_cluster_count(5), 2)
        self.assertEqual(default_cluster_count(100), 6)

    def test_seeded_result_is_deterministic(self):
        x = CounterStream(8, purpose=Purpose.ORACLE).normal(0, (60, 3))
        self.assertEqual(diversity_score(SampleSet(x), seed=4), diversity_score(SampleSet(x), seed=4))


class TestPairwiseCosine(unittest.TestCase):
    """Average cosine similarity over unordered pairs"""

    def test_identical_directions(self):
        self.assertAlmostEqual(avg_pairwise_cosine(SampleSet([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]])), 1.0)

    def test_orthogonal(self):
        self.assertAlmostEqual(avg_pairwise_cosine(SampleSet([[1.0, 0.0], [0.0, 3.0]])), 0.0)

    def test_opposite(self):
        self.assertAlmostEqual(avg_pairwise_cosine(SampleSet([[1.0, 0.0], [-1.0, 0.0]])), -1.0)

    def test_zero_vector_rejected(self):
        with self.assertRaises(ContractViolationError):
            avg_pairwise_cosine(SampleSet([[0.0, 0.0], [1.0, 1.0]]))

    def test_invariant_to_per_sample_rescaling(self):
        x = CounterStream(2, purpose=Purpose.ORACLE).normal(0, (20, 4))
        scales = np.linspace(0.5, 3.0, 20)[:, None]
        self.assertAlmostEqual(
            avg_pairwise_cosine(SampleSet(x)), avg_pairwise_cosine(SampleSet(x * scales)), places=12
        )


def test_sample_set_validation():
    with pytest.raises(ContractViolationError):
        SampleSet(np.empty((0, 3)))
    with pytest.raises(ContractViolationError):
        SampleSet([[0.0, np.inf]])
    with pytest.raises(ContractViolationError):
        SampleSet([[0.0, 1.0]], reference=[0.0, 1.0, 2.0])
    single = SampleSet([1.0, 2.0])
    assert (single.n, single.dim) == (1, 2)


def test_summarize_skips_unsupported_metrics():
    """Metrics the sample set cannot support are reported as None."""
    print("Testing metric summary...")

    s = SampleSet(np.tile([0.2, 0.2], (4, 1)), reference=[0.0, 0.0])
    out = summarize(s)
    assert out["n_samples"] == 4
    assert out["psnr_mean_sample"] == pytest.approx(20.0)
    assert out["psnr_avg"] == pytest.approx(20.0)
    assert out["diversity_score"] is None
    assert out["avg_pairwise_cosine"] == pytest.approx(1.0)

    no_ref = summarize(SampleSet(_two_clusters()), toggles=("diversity",), k=2)
    assert "psnr_mean_sample" not in no_ref
    assert "avg_pairwise_cosine" not in no_ref
    assert no_ref["diversity_score"] > 50.0

    print("✓ Metric summary test passed")


def _phase_retrieval_diversity(tau, seed):
    op = DFTMagnitudeOperator((2,))
    lik = LikelihoodModel(op, Measurement([3.0, 3.0], 1.0))
    cfg = SamplerConfig(
        tau=tau, n_steps=10_000, warm_steps=200, burn_in=1000, thinning=100, seed=seed, adam_lr=1e-2
    )
    report = run_chain(AffineMap.identity(2), lik, cfg)
    return diversity_score(SampleSet(report.sample_array), seed=seed)


@pytest.mark.slow
def test_larger_step_size_gives_higher_diversity():
    """Over 20 seeds, tau = 4e-3 explores more than tau = 1e-4 (one-sided t-test)."""
    print("\nTesting diversity vs step size...")

    large = [_phase_retrieval_diversity(4e-3, seed) for seed in range(20)]
    small = [_phase_retrieval_diversity(1e-4, seed) for seed in range(20)]
    result = stats.ttest_ind(large, small, alternative="greater")
    assert np.mean(large) > np.mean(small)
    assert result.pvalue < 0.05, f"p = {result.pvalue:.3g}"

    print(f"✓ Diversity trend test passed (p = {result.pvalue:.3g})")


if __name__ == "__main__":
    unittest.main()
