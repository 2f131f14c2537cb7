"""
Test forward operators, the Gaussian likelihood and noise-space gradients.
"""

import unittest

import numpy as np

from noisespace.app.errors import ContractViolationError
from noisespace.app.services.forward_operators import (
    AvgPoolOperator,
    ConvBlurOperator,
    DFTMagnitudeOperator,
    ForwardOperator,
    HDRClipOperator,
    IdentityOperator,
    InpaintOperator,
    LikelihoodModel,
    Measurement,
    ToyNonlinearOperator,
    default_noise_sigma,
    gaussian_kernel,
    grad_noise_loss,
    loss_and_grad,
    neg_log_likelihood,
    op_apply,
    op_pullback,
    operator_from_spec,
    synthesize_measurement,
)
from noisespace.app.services.generative_maps import AffineMap, MLPMap, apply_map
from noisespace.app.utils.rng import CounterStream, Purpose


def _fd_operator_vjp(op, x0, v, h=1e-6):
    out = np.empty(op.in_dim)
    for j in range(op.in_dim):
        e = np.zeros(op.in_dim)
        e[j] = h
        out[j] = (v @ op_apply(op, x0 + e) - v @ op_apply(op, x0 - e)) / (2.0 * h)
    return out


class TestOperatorApply(unittest.TestCase):
    """Forward evaluation of each operator kind"""

    def test_avgpool_mean_of_block(self):
        """2x2 pooling of [[1,3],[5,7]] is [4]"""
        op = AvgPoolOperator(4, 2)
        np.testing.assert_array_equal(op_apply(op, [1.0, 3.0, 5.0, 7.0]), [4.0])

    def test_avgpool_requires_divisible_square(self):
        with self.assertRaises(ContractViolationError):
            AvgPoolOperator(6, 2)
        with self.assertRaises(ContractViolationError):
            AvgPoolOperator(9, 2)

    def test_hdr_clip(self):
        """clip(2x, -1, 1)"""
        op = HDRClipOperator(2)
        np.testing.assert_allclose(op_apply(op, [0.6, -0.2]), [1.0, -0.4])

    def test_dft_of_constant(self):
        """DFT magnitude of a constant sequence concentrates in bin 0"""
        op = DFTMagnitudeOperator((4,))
        np.testing.assert_allclose(op_apply(op, [1.0, 1.0, 1.0, 1.0]), [4.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_dft_padding_oversamples(self):
        op = DFTMagnitudeOperator((2, 2), pad=1)
        self.assertEqual(op.in_dim, 4)
        self.assertEqual(op.out_dim, 16)

    def test_delta_kernel_blur_is_identity(self):
        """A centered delta kernel leaves the image unchanged"""
        kernel = np.zeros((3, 3))
        kernel[1, 1] = 1.0
        op = ConvBlurOperator(16, kernel)
        x0 = np.arange(16, dtype=float)
        np.testing.assert_array_equal(op_apply(op, x0), x0)

    def test_blur_rejects_bad_shapes(self):
        with self.assertRaises(ContractViolationError):
            ConvBlurOperator(15, gaussian_kernel(3, 1.0))
        with self.assertRaises(ContractViolationError):
            ConvBlurOperator(16, np.ones((2, 2)) / 4.0)

    def test_gaussian_kernel_normalized(self):
        kernel = gaussian_kernel(61, 3.0)
        self.assertEqual(kernel.shape, (61, 61))
        self.assertAlmostEqual(kernel.sum(), 1.0, places=12)
        np.testing.assert_allclose(kernel, kernel.T)

    def test_inpaint_random_mask_keep_fraction(self):
        op = InpaintOperator.random(100, 0.3, seed=4)
        self.assertEqual(int(op.mask.sum()), 30)
        again = InpaintOperator.random(100, 0.3, seed=4)
        np.testing.assert_array_equal(op.mask, again.mask)

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractViolationError):
            op_apply(IdentityOperator(3), [1.0, 2.0])
        with self.assertRaises(ContractViolationError):
            op_pullback(AvgPoolOperator(4, 2), [1.0, 2.0, 3.0, 4.0], [1.0, 2.0])


class TestOperatorPullback(unittest.TestCase):
    """Adjoints and vector-Jacobian products"""

    def test_inpaint_pullback_is_mask(self):
        op = InpaintOperator([1, 0])
        np.testing.assert_array_equal(op_pullback(op, [9.0, 9.0], [3.0, 5.0]), [3.0, 0.0])

    def test_avgpool_pullback_spreads_evenly(self):
        op = AvgPoolOperator(4, 2)
        np.testing.assert_allclose(op_pullback(op, np.zeros(4), [2.0]), [0.5, 0.5, 0.5, 0.5])

    def test_hdr_clip_pullback(self):
        """Saturated entries get zero, active entries get slope 2"""
        op = HDRClipOperator(2)
        np.testing.assert_array_equal(op_pullback(op, [0.6, -0.2], [1.0, 1.0]), [0.0, 2.0])

    def test_linear_adjoints(self):
        """<A x, v> == <x, A^T v> for linear operators"""
        stream = CounterStream(1, purpose=Purpose.ORACLE)
        ops = [
            IdentityOperator(16),
            InpaintOperator.random(16, 0.5, seed=1),
            AvgPoolOperator(16, 2),
            ConvBlurOperator(16, stream.uniform(99, (3, 3))),
            ConvBlurOperator(64, gaussian_kernel(5, 1.5)),
        ]
        for i, op in enumerate(ops):
            x = stream.normal(2 * i, op.in_dim)
            v = stream.normal(2 * i + 1, op.out_dim)
            lhs = op_apply(op, x) @ v
            rhs = x @ op_pullback(op, x, v)
            self.assertAlmostEqual(lhs, rhs, delta=1e-10 * max(1.0, abs(lhs)))

    def test_nonlinear_pullbacks_match_finite_differences(self):
        stream = CounterStream(2, purpose=Purpose.ORACLE)
        ops = [
            DFTMagnitudeOperator((4, 4)),
            DFTMagnitudeOperator((3, 3), pad=1),
            DFTMagnitudeOperator((8,)),
            ToyNonlinearOperator(5, hidden=7, seed=3),
        ]
        for i, op in enumerate(ops):
            x0 = stream.normal(2 * i, op.in_dim)
            v = stream.normal(2 * i + 1, op.out_dim)
            analytic = op_pullback(op, x0, v)
            fd = _fd_operator_vjp(op, x0, v)
            err = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
            self.assertLess(err, 1e-6, f"{op!r}")


class _PermutedOperator(ForwardOperator):
    """Rows of a wrapped operator in a fixed order."""

    def __init__(self, inner, order):
        super().__init__(inner.in_dim, inner.out_dim)
        self.inner = inner
        self.order = np.asarray(order)

    def _forward(self, x0):
        return op_apply(self.inner, x0)[self.order]

    def _pullback(self, x0, v):
        u = np.empty_like(v)
        u[self.order] = v
        return op_pullback(self.inner, x0, u)


class TestLikelihood(unittest.TestCase):
    """Negative log-likelihood and noise-space gradients"""

    def test_zero_residual(self):
        op = AvgPoolOperator(4, 2)
        x0 = np.array([1.0, 2.0, 3.0, 4.0])
        lik = LikelihoodModel(op, Measurement(op_apply(op, x0), 0.3))
        self.assertEqual(neg_log_likelihood(lik, x0), 0.0)

    def test_known_value(self):
        """Residual (0.1, 0) with sigma 0.1 gives 0.5"""
        lik = LikelihoodModel(IdentityOperator(2), Measurement([0.0, 0.0], 0.1))
        self.assertAlmostEqual(neg_log_likelihood(lik, [0.1, 0.0]), 0.5, places=12)

    def test_gradient_examples(self):
        identity = AffineMap.identity(2)
        lik = LikelihoodModel(IdentityOperator(2), Measurement([0.4, -0.3], 1.0))
        np.testing.assert_array_equal(grad_noise_loss(lik, identity, [0.4, -0.3]), [0.0, 0.0])

        lik0 = LikelihoodModel(IdentityOperator(2), Measurement([0.0, 0.0], 1.0))
        np.testing.assert_array_equal(grad_noise_loss(lik0, identity, [2.0, -1.0]), [2.0, -1.0])

        doubled = AffineMap([[2.0, 0.0], [0.0, 2.0]])
        np.testing.assert_array_equal(grad_noise_loss(lik0, doubled, [1.0, 0.0]), [4.0, 0.0])

    def test_loss_and_grad_returns_sample(self):
        m = MLPMap.random(3, hidden=(4,), seed=0)
        lik = LikelihoodModel(IdentityOperator(3), Measurement([0.1, 0.2, 0.3], 0.5))
        x1 = np.array([0.3, -0.4, 0.8])
        loss, grad, x0 = loss_and_grad(lik, m, x1)
        np.testing.assert_array_equal(x0, apply_map(m, x1))
        self.assertEqual(loss, neg_log_likelihood(lik, x0))
        np.testing.assert_array_equal(grad, grad_noise_loss(lik, m, x1))

    def test_mismatches_rejected(self):
        with self.assertRaises(ContractViolationError):
            LikelihoodModel(AvgPoolOperator(4, 2), Measurement([1.0, 2.0], 0.1))
        with self.assertRaises(ContractViolationError):
            Measurement([1.0], 0.0)
        lik = LikelihoodModel(IdentityOperator(3), Measurement([0.0, 0.0, 0.0], 1.0))
        with self.assertRaises(ContractViolationError):
            loss_and_grad(lik, AffineMap.identity(2), [0.0, 0.0])

    def test_synthesize_measurement_deterministic(self):
        op = InpaintOperator([1, 1, 0, 1])
        x = np.array([0.5, -0.5, 0.25, 1.0])
        a = synthesize_measurement(op, x, 0.1, noise_seed=7)
        b = synthesize_measurement(op, x, 0.1, noise_seed=7)
        c = synthesize_measurement(op, x, 0.1, noise_seed=8)
        np.testing.assert_array_equal(a.values, b.values)
        self.assertFalse(np.array_equal(a.values, c.values))
        self.assertEqual(a.noise_sigma, 0.1)
        noise = CounterStream(7, purpose=Purpose.MEASUREMENT).normal(0, 4)
        np.testing.assert_allclose(a.values, op_apply(op, x) + 0.1 * noise)

    def test_output_order_does_not_matter(self):
        """Permuting measurement rows and y together leaves loss and gradient unchanged"""
        m = MLPMap.random(4, hidden=(5,), seed=3)
        stream = CounterStream(12, purpose=Purpose.ORACLE)
        inner = ToyNonlinearOperator(4, hidden=6, seed=1)
        y = stream.normal(0, 4)
        order = [2, 0, 3, 1]
        lik = LikelihoodModel(inner, Measurement(y, 0.2))
        permuted = LikelihoodModel(_PermutedOperator(inner, order), Measurement(y[order], 0.2))

        for i in range(5):
            x1 = stream.normal(1 + i, 4)
            x0 = apply_map(m, x1)
            self.assertAlmostEqual(neg_log_likelihood(permuted, x0), neg_log_likelihood(lik, x0), places=10)
            np.testing.assert_allclose(
                grad_noise_loss(permuted, m, x1), grad_noise_loss(lik, m, x1), rtol=1e-10, atol=1e-12
            )


class TestOperatorSpecs(unittest.TestCase):
    """Config-format round trips"""

    def test_round_trip(self):
        ops = [
            IdentityOperator(4),
            InpaintOperator([1, 0, 1, 1]),
            AvgPoolOperator(16, 2),
            ConvBlurOperator(16, gaussian_kernel(3, 0.8)),
            HDRClipOperator(4, scale=3.0),
            DFTMagnitudeOperator((2, 2), pad=1),
            ToyNonlinearOperator(4, hidden=6, seed=2),
        ]
        x0 = np.array([0.1, -0.2, 0.3, 0.05] * (16 // 4))
        for op in ops:
            rebuilt = operator_from_spec(op.to_spec())
            self.assertEqual((rebuilt.in_dim, rebuilt.out_dim), (op.in_dim, op.out_dim))
            x = x0[: op.in_dim]
            np.testing.assert_array_equal(op_apply(rebuilt, x), op_apply(op, x))

    def test_unknown_kind(self):
        with self.assertRaises(ContractViolationError):
            operator_from_spec({"kind": "jpeg", "dim": 4})

    def test_default_noise_sigma(self):
        self.assertEqual(default_noise_sigma("dft_magnitude"), 0.05)
        for kind in ("identity", "inpaint", "avgpool", "conv_blur", "hdr_clip", "toy_nonlinear"):
            self.assertEqual(default_noise_sigma(kind), 0.1)


if __name__ == "__main__":
    unittest.main()
