"""
Verification Service - numerical acceptance suites.

Suites:
- pullback:    map pullbacks and noise-space gradients against finite differences
- adjoint:     <A x, v> = <x, A^T v> for the linear operators
- equilibrium: long EM/EI chains on the affine 2-D benchmark vs the closed-form posterior
- theorem:     TV guarantee on randomized 1-D instances, kappa_y >= 1, ill-conditioning
- dpi:         data processing inequality on pushed-forward samples
- nfe:         eta * (K + N) accounting and the amortized per-sample curve
- drift:       Langevin drift equals the score of the quadrature target
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from noisespace.app.errors import ContractViolationError, NoiseSpaceError
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
    gaussian_kernel,
    grad_noise_loss,
    neg_log_likelihood,
    op_apply,
    op_pullback,
    synthesize_measurement,
)
from noisespace.app.services.generative_maps import (
    AffineMap,
    GenerativeMap,
    MLPMap,
    apply_map,
    check_pullback_fd,
    make_two_step_map,
)
from noisespace.app.services.oracle_service import (
    DensityGrid,
    GaussianPosterior,
    GridSpec,
    check_dpi,
    check_drift_score,
    check_theorem_bound,
    condition_number,
    dpi_tolerance,
    gaussian_likelihood,
    gaussian_posterior_closed_form,
    moment_estimate,
)
from noisespace.app.services.sampler_service import SamplerConfig, nfe_curve, run_chain
from noisespace.app.utils.rng import CounterStream, Purpose
from noisespace.app.utils.vectors import relative_error

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
ADJOINT_TOLERANCE = 1e-12
PULLBACK_TOLERANCE = 1e-5
MEAN_TOLERANCE_STD = 0.05
COVARIANCE_TOLERANCE = 0.10
DRIFT_TOLERANCE = 1e-3
# distance from a clip kink below which a point is treated as non-smooth
KINK_MARGIN = 1e-3
# DFT bins with smaller modulus have no defined gradient
DFT_ZERO_MARGIN = 1e-6


@dataclass
class CheckResult:
    """Outcome of a single numerical check."""

    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"[{status}] {self.suite}/{self.name}: value={self.value:.6g} tolerance={self.tolerance:.6g}"
        return f"{text} ({self.detail})" if self.detail else text


# --- benchmarks ---------------------------------------------------------------

AFFINE_MATRIX = np.array([[1.0, 0.2], [0.0, 0.9]])
AFFINE_OFFSET = np.array([0.1, -0.2])
AFFINE_Y = np.array([0.3, -0.1])
AFFINE_SIGMA = 0.1


def affine_benchmark(
    y: np.ndarray = AFFINE_Y,
    sigma: float = AFFINE_SIGMA,
) -> Tuple[AffineMap, LikelihoodModel, GaussianPosterior]:
    """Affine d=2 map with identity operator and its closed-form noise posterior."""
    gen_map = AffineMap(AFFINE_MATRIX, AFFINE_OFFSET)
    lik = LikelihoodModel(IdentityOperator(2), Measurement(y, sigma))
    post = gaussian_posterior_closed_form(AFFINE_MATRIX, AFFINE_OFFSET, np.eye(2), y, sigma)
    return gen_map, lik, post


def image_operators(side: int = 4, seed: int = 0) -> Dict[str, ForwardOperator]:
    """One instance of every operator kind on a side x side image."""
    dim = side * side
    return {
        "identity": IdentityOperator(dim),
        "inpaint": InpaintOperator.random(dim, 0.5, seed),
        "avgpool": AvgPoolOperator(dim, 2),
        "conv_blur": ConvBlurOperator(dim, gaussian_kernel(3, 1.0)),
        "hdr_clip": HDRClipOperator(dim),
        "dft_magnitude": DFTMagnitudeOperator((side, side)),
        "toy_nonlinear": ToyNonlinearOperator(dim, hidden=8, seed=seed),
    }


def image_maps(side: int = 4, seed: int = 0) -> Dict[str, GenerativeMap]:
    """Affine, MLP and two-step maps on a side x side image."""
    dim = side * side
    gen = CounterStream(seed, purpose=Purpose.PARAMETERS).generator(2)
    matrix = np.eye(dim) + 0.3 * gen.standard_normal((dim, dim)) / math.sqrt(dim)
    mlp = MLPMap.random(dim, hidden=(8,), seed=seed)
    return {
        "affine": AffineMap(matrix, 0.1 * gen.standard_normal(dim)),
        "mlp": mlp,
        "two_step": make_two_step_map(mlp, seed=seed + 1, mix=0.5),
    }


def fd_noise_gradient(lik: LikelihoodModel, gen_map: GenerativeMap, x1: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of L_y(Phi(.)) at x1."""
    fd = np.empty(gen_map.dim)
    for j in range(gen_map.dim):
        e = np.zeros(gen_map.dim)
        e[j] = h
        plus = neg_log_likelihood(lik, apply_map(gen_map, x1 + e))
        minus = neg_log_likelihood(lik, apply_map(gen_map, x1 - e))
        fd[j] = (plus - minus) / (2.0 * h)
    return fd


def _near_kink(op: ForwardOperator, x0: np.ndarray) -> bool:
    if isinstance(op, HDRClipOperator):
        return bool(np.any(np.abs(np.abs(op.scale * x0) - 1.0) < KINK_MARGIN))
    if isinstance(op, DFTMagnitudeOperator):
        return bool(np.min(op_apply(op, x0)) < DFT_ZERO_MARGIN)
    return False


# --- suites -------------------------------------------------------------------

def verify_pullback(n_points: int = 100, seed: int = 0) -> List[CheckResult]:
    """Map pullbacks and full noise-space gradients against central differences."""
    results = []
    maps = image_maps(seed=seed)
    operators = image_operators(seed=seed)

    for map_name, gen_map in maps.items():
        stream = CounterStream(seed, purpose=Purpose.ORACLE)
        worst = max(
            check_pullback_fd(gen_map, stream.normal(2 * i, gen_map.dim), stream.normal(2 * i + 1, gen_map.dim))
            for i in range(n_points)
        )
        results.append(CheckResult("pullback", f"map/{map_name}", worst < PULLBACK_TOLERANCE,
                                   worst, PULLBACK_TOLERANCE, f"{n_points} points"))

    for map_name, gen_map in maps.items():
        for op_name, op in operators.items():
            x_ref = apply_map(gen_map, CounterStream(seed + 7, purpose=Purpose.ORACLE).normal(0, gen_map.dim))
            lik = LikelihoodModel(op, synthesize_measurement(op, x_ref, 1.0, seed))
            stream = CounterStream(seed + 11, purpose=Purpose.ORACLE)
            worst, skipped = 0.0, 0
            for i in range(n_points):
                x1 = stream.normal(i, gen_map.dim)
                if _near_kink(op, apply_map(gen_map, x1)):
                    skipped += 1
                    continue
                fd = fd_noise_gradient(lik, gen_map, x1)
                worst = max(worst, relative_error(grad_noise_loss(lik, gen_map, x1), fd, floor=1e-12))
            results.append(CheckResult(
                "pullback", f"grad/{map_name}+{op_name}", worst < GRADIENT_TOLERANCE,
                worst, GRADIENT_TOLERANCE, f"{n_points - skipped} points, {skipped} near non-smooth loci",
            ))
    return results


def verify_adjoint(n_points: int = 100, seed: int = 0) -> List[CheckResult]:
    """Dot-product test for every linear operator."""
    results = []
    for name, op in image_operators(seed=seed).items():
        if not op.linear:
            continue
        stream = CounterStream(seed, purpose=Purpose.ORACLE)
        worst = 0.0
        for i in range(n_points):
            x = stream.normal(2 * i, op.in_dim)
            v = stream.normal(2 * i + 1, op.out_dim)
            lhs = float(op_apply(op, x) @ v)
            rhs = float(x @ op_pullback(op, x, v))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
        results.append(CheckResult("adjoint", name, worst < ADJOINT_TOLERANCE, worst, ADJOINT_TOLERANCE))
    return results


def equilibrium_config(scheme: str = "em", n_steps: int = 200_000, burn_in: int = 50_000,
                       seed: int = 0) -> SamplerConfig:
    return SamplerConfig(tau=1e-3, n_steps=n_steps, warm_steps=500, scheme=scheme, seed=seed,
                         burn_in=burn_in, thinning=1, record_noise=True)


def equilibrium_errors(noise_samples: np.ndarray, post: GaussianPosterior) -> Tuple[float, float]:
    """(max |mean error| in posterior stds, relative Frobenius covariance error)."""
    est = moment_estimate(noise_samples)
    mean_err = float(np.max(np.abs(est.mean - post.mean) / post.std))
    cov_err = float(np.linalg.norm(est.covariance - post.covariance) / np.linalg.norm(post.covariance))
    return mean_err, cov_err


def verify_equilibrium(n_steps: int = 200_000, burn_in: int = 50_000, seed: int = 0) -> List[CheckResult]:
    """EM and EI chains on the affine benchmark against the closed-form posterior."""
    gen_map, lik, post = affine_benchmark()
    results = []
    means = {}
    for scheme in ("em", "ei"):
        report = run_chain(gen_map, lik, equilibrium_config(scheme, n_steps, burn_in, seed))
        z = np.vstack(report.noise_trace)
        mean_err, cov_err = equilibrium_errors(z, post)
        means[scheme] = z.mean(axis=0)
        results.append(CheckResult("equilibrium", f"{scheme}/mean", mean_err < MEAN_TOLERANCE_STD,
                                   mean_err, MEAN_TOLERANCE_STD, "max error in posterior stds"))
        results.append(CheckResult("equilibrium", f"{scheme}/covariance", cov_err < COVARIANCE_TOLERANCE,
                                   cov_err, COVARIANCE_TOLERANCE, "relative Frobenius error"))
    gap = float(np.max(np.abs(means["em"] - means["ei"]) / post.std))
    results.append(CheckResult("equilibrium", "em_vs_ei", gap < MEAN_TOLERANCE_STD, gap, MEAN_TOLERANCE_STD,
                               "mean gap in posterior stds"))
    return results


def _mixture_pdf(weights, means, stds) -> Callable[[np.ndarray], np.ndarray]:
    def pdf(x):
        out = np.zeros_like(x, dtype=np.float64)
        for w, m, s in zip(weights, means, stds):
            out = out + w * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
        return out
    return pdf


def random_theorem_instance(index: int, seed: int = 0, spec: Optional[GridSpec] = None):
    """
    Random Gaussian-mixture priors and Gaussian likelihood on a 1-D grid.

    Returns:
        (p_data, model_prior, likelihood_fn)
    """
    spec = spec or GridSpec.cube(-12.0, 12.0)
    gen = CounterStream(seed, index, Purpose.ORACLE).generator(0)

    def mixture():
        k = int(gen.integers(1, 4))
        w = gen.dirichlet(np.ones(k))
        return _mixture_pdf(w, gen.uniform(-3.0, 3.0, k), gen.uniform(0.3, 1.5, k))

    p_data = DensityGrid.from_function(spec, mixture())
    model_prior = DensityGrid.from_function(spec, mixture())
    likelihood = gaussian_likelihood(gen.uniform(-3.0, 3.0), gen.uniform(0.2, 2.0))
    return p_data, model_prior, likelihood


def bimodal_instance(spec: Optional[GridSpec] = None):
    """
    p_data = 0.5 N(-2, 0.5^2) + 0.5 N(2, 0.5^2) against a single-mode model prior N(2, 0.5^2).
    """
    spec = spec or GridSpec.cube(-8.0, 8.0)
    p_data = DensityGrid.from_function(spec, _mixture_pdf([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5]))
    model_prior = DensityGrid.from_function(spec, _mixture_pdf([1.0], [2.0], [0.5]))
    return p_data, model_prior


def verify_theorem(n_instances: int = 50, seed: int = 0) -> List[CheckResult]:
    """TV guarantee on randomized instances plus well-/ill-conditioned bimodal cases."""
    results = []
    min_kappa, worst_ratio, failures = math.inf, 0.0, 0
    for i in range(n_instances):
        p_data, model_prior, likelihood = random_theorem_instance(i, seed)
        try:
            report = check_theorem_bound(p_data, model_prior, likelihood)
        except NoiseSpaceError as e:
            failures += 1
            logger.error(f"Theorem instance {i} failed: {e}")
            continue
        min_kappa = min(min_kappa, report.kappa_y)
        if report.bound_value > 0:
            worst_ratio = max(worst_ratio, report.tv_posteriors / report.bound_value)
    results.append(CheckResult("theorem", "randomized_bound", failures == 0, failures, 0,
                               f"{n_instances} instances, max tv/bound = {worst_ratio:.3g}"))
    results.append(CheckResult("theorem", "kappa_at_least_one", min_kappa >= 1.0 - 1e-12, min_kappa, 1.0))

    p_data, model_prior = bimodal_instance()
    well = check_theorem_bound(p_data, model_prior, gaussian_likelihood(2.0, 0.1))
    ill = condition_number(gaussian_likelihood(0.0, 0.1), p_data)
    ratio = ill.kappa_y / well.kappa_y
    results.append(CheckResult("theorem", "ill_conditioned_growth", ratio >= 10.0, ratio, 10.0,
                               f"kappa {well.kappa_y:.4g} -> {ill.kappa_y:.4g}"))
    return results


def _dpi_triples(seed: int = 0):
    spec = GridSpec.cube(-12.0, 12.0)
    yield "abs_symmetric", (
        DensityGrid.from_function(spec, _mixture_pdf([1.0], [1.0], [1.0])),
        DensityGrid.from_function(spec, _mixture_pdf([1.0], [-1.0], [1.0])),
        np.abs,
    )
    maps = [("identity", lambda x: x), ("abs", np.abs), ("tanh", np.tanh), ("square", np.square),
            ("affine", lambda x: 3.0 * x + 1.0), ("round", np.round)]
    gen = CounterStream(seed, purpose=Purpose.ORACLE).generator(1)
    for i in range(19):
        name, fn = maps[i % len(maps)]
        p = DensityGrid.from_function(spec, _mixture_pdf([1.0], [gen.uniform(-2, 2)], [gen.uniform(0.5, 1.5)]))
        q = DensityGrid.from_function(spec, _mixture_pdf([1.0], [gen.uniform(-2, 2)], [gen.uniform(0.5, 1.5)]))
        yield f"{name}_{i}", (p, q, fn)


def verify_dpi(n_samples: int = 40_000, seed: int = 0) -> List[CheckResult]:
    """TV_after <= TV_before + 5 / sqrt(n) on 20 (p, q, phi) triples."""
    results = []
    tol = dpi_tolerance(n_samples)
    for name, (p, q, fn) in _dpi_triples(seed):
        before, after = check_dpi(p, q, fn, n_samples=n_samples, seed=seed)
        excess = after - before
        results.append(CheckResult("dpi", name, excess <= tol, excess, tol,
                                   f"before={before:.4f} after={after:.4f}"))
    return results


def verify_nfe(seed: int = 0) -> List[CheckResult]:
    """Recompute eta * (K + N) for short chains and check the amortized curve."""
    results = []
    curve = nfe_curve(1, 800, [1, 10, 100])
    results.append(CheckResult("nfe", "curve_values", curve == [801.0, 81.0, 9.0],
                               float(np.max(np.abs(np.array(curve) - [801, 81, 9]))), 0.0))
    long_curve = nfe_curve(2, 800, [1, 10, 100, 1000, 10_000, 100_000])
    decreasing = all(a > b for a, b in zip(long_curve, long_curve[1:]))
    results.append(CheckResult("nfe", "curve_decreasing", decreasing and long_curve[-1] - 2 < 0.05,
                               long_curve[-1], 2.0, "approaches eta"))

    gen_map, lik, _ = affine_benchmark()
    two_step = make_two_step_map(gen_map, seed=seed, mix=0.5)
    for label, m in (("eta1", gen_map), ("eta2", two_step)):
        for k, n in ((0, 10), (5, 20), (25, 40)):
            cfg = SamplerConfig(tau=1e-3, warm_steps=k, n_steps=n, burn_in=0, thinning=1, seed=seed)
            report = run_chain(m, lik, cfg)
            expected = m.nfe_per_eval * (k + n)
            results.append(CheckResult("nfe", f"{label}/K={k},N={n}", report.nfe_total == expected,
                                       report.nfe_total, expected))
    return results


def verify_drift(seed: int = 0) -> List[CheckResult]:
    """Drift-score identity on 1-D affine and MLP instances."""
    results = []
    instances = {
        "affine": (AffineMap([[2.0]], [0.0]), Measurement([2.0], 1.0)),
        "mlp": (MLPMap.random(1, hidden=(4,), seed=seed, scale=1.5), Measurement([0.3], 0.2)),
    }
    for name, (gen_map, measurement) in instances.items():
        lik = LikelihoodModel(IdentityOperator(1), measurement)
        err = check_drift_score(lik, gen_map, GridSpec.cube(-8.0, 8.0))
        results.append(CheckResult("drift", name, err < DRIFT_TOLERANCE, err, DRIFT_TOLERANCE))
    return results


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "pullback": verify_pullback,
    "adjoint": verify_adjoint,
    "equilibrium": verify_equilibrium,
    "theorem": verify_theorem,
    "dpi": verify_dpi,
    "nfe": verify_nfe,
    "drift": verify_drift,
}


def verify(suite: str) -> List[CheckResult]:
    """
    Run one suite (or ``all``) and return its checks.

    Raises:
        ContractViolationError: unknown suite name
    """
    if suite == "all":
        names = list(SUITES)
    elif suite in SUITES:
        names = [suite]
    else:
        raise ContractViolationError(f"unknown suite '{suite}'; choose from {', '.join(SUITES)} or all")
    results = []
    for name in names:
        logger.info(f"Running verification suite '{name}'")
        results.extend(SUITES[name]())
    failed = sum(not r.passed for r in results)
    logger.info(f"Verification finished: {len(results) - failed} passed, {failed} failed")
    return results
