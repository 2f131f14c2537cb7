"""
Oracle Service - ground-truth posteriors and numerical checks of the theory

Provides:
- Closed-form Gaussian noise-space posterior for affine maps and linear operators
- Quadrature densities on uniform grids (1-3 dimensions, trapezoid rule)
- Total variation distance, condition number kappa_y
- Checks of the TV guarantee TV(p_post, p_model_post) <= 2 kappa_y eps, the data
  processing inequality, the composite sampling bound and the drift-score identity
- Moment estimates with autocorrelation-aware standard errors
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, stats

from noisespace.app.errors import (
    ContractViolationError,
    IllPosedInstanceError,
    SupportError,
    TheoremViolationError,
)
from noisespace.app.services.forward_operators import LikelihoodModel, loss_and_grad, neg_log_likelihood
from noisespace.app.services.generative_maps import GenerativeMap, apply_map, pullback_map
from noisespace.app.utils.rng import CounterStream, Purpose
from noisespace.app.utils.vectors import as_matrix, as_vector

logger = logging.getLogger(__name__)

# Quadrature defaults
POINTS_1D = 4001
POINTS_2D = 201
POINTS_3D = 101
BOUNDARY_RATIO = 1e-10
MAX_EXTENSIONS = 10
# Tolerance multiplier applied to the grid-refinement error estimate
QUADRATURE_SAFETY = 10.0


@dataclass(frozen=True)
class GridSpec:
    """Bounds and resolution of a uniform grid."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    n_points: Tuple[int, ...]

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int = 1, n_points: Optional[int] = None) -> "GridSpec":
        if n_points is None:
            n_points = {1: POINTS_1D, 2: POINTS_2D, 3: POINTS_3D}.get(dim, POINTS_3D)
        return cls((float(lo),) * dim, (float(hi),) * dim, (int(n_points),) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.n_points)]

    def extended(self, factor: float = 0.5) -> "GridSpec":
        """Grid widened by ``factor`` x width on every side, same resolution count."""
        lo = tuple(a - factor * (b - a) for a, b in zip(self.lo, self.hi))
        hi = tuple(b + factor * (b - a) for a, b in zip(self.lo, self.hi))
        return GridSpec(lo, hi, self.n_points)


class DensityGrid:
    """
    Unnormalized density tabulated on a uniform rectangular grid.

    Args:
        spec: grid bounds and resolution
        values: array of shape ``spec.n_points``
    """

    def __init__(self, spec: GridSpec, values: np.ndarray):
        if spec.dim not in (1, 2, 3):
            raise ContractViolationError(f"density grids support 1-3 dimensions, got {spec.dim}")
        values = np.array(values, dtype=np.float64)
        if values.shape != tuple(spec.n_points):
            raise ContractViolationError(
                f"grid values have shape {values.shape}, expected {tuple(spec.n_points)}"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ContractViolationError("density values must be finite and non-negative")
        if not np.any(values > 0):
            raise ContractViolationError("density must be strictly positive somewhere")
        self.spec = spec
        self.values = values
        self.values.setflags(write=False)

    @classmethod
    def from_function(cls, spec: GridSpec, fn: Callable[..., np.ndarray]) -> "DensityGrid":
        """Tabulate ``fn(*mesh)`` on the grid."""
        mesh = np.meshgrid(*spec.axes(), indexing="ij")
        return cls(spec, np.broadcast_to(fn(*mesh), tuple(spec.n_points)).copy())

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def axes(self) -> List[np.ndarray]:
        return self.spec.axes()

    def mesh(self) -> List[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def integrate(self, values: Optional[np.ndarray] = None) -> float:
        """Trapezoid integral of ``values`` (default: the density) over the grid."""
        out = self.values if values is None else values
        for axis in reversed(self.axes):
            out = integrate.trapezoid(out, axis, axis=-1)
        return float(out)

    def normalization(self) -> float:
        return self.integrate()

    def normalized(self) -> np.ndarray:
        """Density values divided by the trapezoid normalization constant."""
        return self.values / self.normalization()

    def mean(self) -> np.ndarray:
        p = self.normalized()
        return np.array([self.integrate(p * m) for m in self.mesh()])

    def covariance(self) -> np.ndarray:
        p = self.normalized()
        mesh = self.mesh()
        mu = self.mean()
        cov = np.empty((self.dim, self.dim))
        for i in range(self.dim):
            for j in range(i, self.dim):
                cov[i, j] = cov[j, i] = self.integrate(p * (mesh[i] - mu[i]) * (mesh[j] - mu[j]))
        return cov

    def same_grid(self, other: "DensityGrid") -> bool:
        return self.spec == other.spec

    def with_values(self, values: np.ndarray) -> "DensityGrid":
        return DensityGrid(self.spec, values)

    def coarsened(self) -> Optional["DensityGrid"]:
        """Every other node per axis; None when (n - 1) is odd on some axis."""
        if any((n - 1) % 2 for n in self.spec.n_points):
            return None
        spec = GridSpec(self.spec.lo, self.spec.hi, tuple((n - 1) // 2 + 1 for n in self.spec.n_points))
        slices = tuple(slice(None, None, 2) for _ in self.spec.n_points)
        values = self.values[slices]
        if not np.any(values > 0):
            return None
        return DensityGrid(spec, values)

    def boundary_ratio(self) -> float:
        """max density on the grid boundary / max density."""
        peak = self.values.max()
        edge = 0.0
        for axis in range(self.dim):
            edge = max(edge, np.take(self.values, 0, axis=axis).max(),
                       np.take(self.values, -1, axis=axis).max())
        return float(edge / peak)

    def __repr__(self) -> str:
        return f"DensityGrid(dim={self.dim}, lo={self.spec.lo}, hi={self.spec.hi}, n={self.spec.n_points})"


@dataclass(frozen=True)
class GaussianPosterior:
    """Gaussian with symmetric positive-definite covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def pdf(self, *coords) -> np.ndarray:
        pts = np.stack(coords, axis=-1)
        return stats.multivariate_normal(self.mean, self.covariance).pdf(pts)


@dataclass
class ConditionReport:
    """Condition number and, for bound checks, the quantities of the TV guarantee."""

    kappa_y: float
    sup_likelihood: float
    evidence: float
    eps_prior: Optional[float] = None
    bound_value: Optional[float] = None
    tv_posteriors: Optional[float] = None
    tolerance: Optional[float] = None

    @property
    def slack(self) -> Optional[float]:
        if self.bound_value is None or self.tv_posteriors is None:
            return None
        return self.bound_value - self.tv_posteriors

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorollaryReport:
    """Composite bound TV(p_post, chain) <= 2 kappa_y eps + eps_S."""

    tv_true: float
    eps_sampling: float
    kappa_y: float
    eps_prior: float
    bound_value: float
    tolerance: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MomentEstimate:
    """Sample moments with autocorrelation-aware standard errors."""

    mean: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    effective_sample_size: np.ndarray


def gaussian_posterior_closed_form(M, b, A, y, sigma: float) -> GaussianPosterior:
    """
    Noise-space posterior for Phi(z) = M z + b and linear A with Gaussian noise.

    Precision I + (AM)^T (AM) / sigma^2, mean Sigma (AM)^T (y - A b) / sigma^2.
    """
    if not sigma > 0:
        raise ContractViolationError(f"sigma must be positive, got {sigma}")
    M = as_matrix(np.atleast_2d(M), name="M")
    A = as_matrix(np.atleast_2d(A), name="A")
    b = as_vector(np.atleast_1d(b), M.shape[0], name="b")
    y = as_vector(np.atleast_1d(y), A.shape[0], name="y")
    if M.shape[0] != M.shape[1] or A.shape[1] != M.shape[0]:
        raise ContractViolationError(
            f"inconsistent shapes: M {M.shape}, A {A.shape}"
        )
    AM = A @ M
    precision = np.eye(M.shape[0]) + AM.T @ AM / sigma ** 2
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (AM.T @ (y - A @ b)) / sigma ** 2
    return GaussianPosterior(mean=mean, covariance=cov)


def _log_noise_density(lik: LikelihoodModel, map: GenerativeMap, spec: GridSpec) -> np.ndarray:
    mesh = np.meshgrid(*spec.axes(), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    logp = np.empty(pts.shape[0])
    for i, z in enumerate(pts):
        logp[i] = -0.5 * (z @ z) - neg_log_likelihood(lik, apply_map(map, z))
    return logp.reshape(tuple(spec.n_points))


def _noise_grid(lik: LikelihoodModel, map: GenerativeMap, spec: GridSpec) -> DensityGrid:
    for extension in range(MAX_EXTENSIONS + 1):
        logp = _log_noise_density(lik, map, spec)
        grid = DensityGrid(spec, np.exp(logp - logp.max()))
        ratio = grid.boundary_ratio()
        if ratio < BOUNDARY_RATIO:
            return grid
        if extension < MAX_EXTENSIONS:
            logger.warning(
                f"Boundary density ratio {ratio:.3g} exceeds {BOUNDARY_RATIO}; extending grid "
                f"(extension {extension + 1}/{MAX_EXTENSIONS})"
            )
            spec = spec.extended()
    raise SupportError(
        f"density still has boundary ratio {ratio:.3g} after {MAX_EXTENSIONS} extensions"
    )


def grid_posterior(
    lik: LikelihoodModel,
    map: GenerativeMap,
    grid_spec: GridSpec,
    space: str = "noise",
) -> DensityGrid:
    """
    Tabulate the noise-space posterior exp(-||z||^2/2 - L_y(Phi(z))).

    With ``space="data"`` (1-D, monotone Phi) the data-space density
    p(z) / |Phi'(z)| is returned on a uniform grid spanning Phi of the noise grid.

    Raises:
        SupportError: boundary mass check fails after all extensions
    """
    if grid_spec.dim != map.dim or grid_spec.dim > 3:
        raise ContractViolationError(
            f"grid dimension {grid_spec.dim} must equal map dimension {map.dim} and be <= 3"
        )
    noise = _noise_grid(lik, map, grid_spec)
    if space == "noise":
        return noise
    if space != "data":
        raise ContractViolationError(f"space must be 'noise' or 'data', got '{space}'")
    return pushforward_density_1d(noise, map)


def pushforward_density_1d(noise: DensityGrid, map: GenerativeMap) -> DensityGrid:
    """Change of variables x = Phi(z) for a strictly monotone 1-D map."""
    if noise.dim != 1 or map.dim != 1:
        raise ContractViolationError("data-space densities require a 1-D map")
    z = noise.axes[0]
    x = np.array([apply_map(map, [zi])[0] for zi in z])
    slope = np.array([pullback_map(map, [zi], [1.0])[0] for zi in z])
    if not (np.all(slope > 0) or np.all(slope < 0)):
        raise ContractViolationError("map is not strictly monotone on the grid")
    dens = noise.normalized() / np.abs(slope)
    order = np.argsort(x)
    x, dens = x[order], dens[order]
    spec = GridSpec((float(x[0]),), (float(x[-1]),), noise.spec.n_points)
    values = np.interp(spec.axes()[0], x, dens)
    return DensityGrid(spec, values)


def tv_distance_grid(p: DensityGrid, q: DensityGrid) -> float:
    """½ ∫ |p̂ - q̂| by the trapezoid rule after normalizing each density."""
    if not p.same_grid(q):
        raise ContractViolationError(f"grid mismatch: {p!r} vs {q!r}")
    return 0.5 * p.integrate(np.abs(p.normalized() - q.normalized()))


def gaussian_likelihood(y, sigma: float, forward: Callable[..., np.ndarray] = None) -> Callable:
    """
    Likelihood x -> N(y; forward(x), sigma^2) evaluated elementwise on grid meshes.

    For 1-D grids ``forward`` defaults to the identity.
    """
    if not sigma > 0:
        raise ContractViolationError(f"sigma must be positive, got {sigma}")
    y = float(y)

    def likelihood(*coords):
        mean = coords[0] if forward is None else forward(*coords)
        return np.exp(-0.5 * ((y - mean) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))

    return likelihood


def _tabulate(likelihood_fn: Callable, grid: DensityGrid) -> np.ndarray:
    lik = np.broadcast_to(likelihood_fn(*grid.mesh()), tuple(grid.spec.n_points)).astype(np.float64)
    if not np.all(np.isfinite(lik)) or np.any(lik < 0):
        raise ContractViolationError("likelihood must be finite and non-negative on the grid")
    return lik


def _condition(lik: np.ndarray, p_data: DensityGrid) -> ConditionReport:
    sup = float(lik.max())
    evidence = p_data.integrate(lik * p_data.normalized())
    if not evidence > 0:
        raise IllPosedInstanceError("evidence is zero at grid resolution")
    return ConditionReport(kappa_y=sup / evidence, sup_likelihood=sup, evidence=evidence)


def condition_number(likelihood_fn: Callable, p_data: DensityGrid) -> ConditionReport:
    """
    kappa_y = sup_x p(y|x) / ∫ p(y|x) p_data(x) dx on the grid of ``p_data``.

    Raises:
        IllPosedInstanceError: zero evidence
    """
    if p_data.dim > 2:
        raise ContractViolationError("condition_number supports 1-D or 2-D grids")
    return _condition(_tabulate(likelihood_fn, p_data), p_data)


def _posterior(prior: DensityGrid, lik: np.ndarray) -> DensityGrid:
    values = prior.normalized() * lik
    if not np.any(values > 0):
        raise IllPosedInstanceError("posterior vanishes on the grid")
    return prior.with_values(values)


def _theorem_quantities(p_data: DensityGrid, model_prior: DensityGrid, lik: np.ndarray):
    eps = tv_distance_grid(p_data, model_prior)
    cond = _condition(lik, p_data)
    tv_post = tv_distance_grid(_posterior(p_data, lik), _posterior(model_prior, lik))
    return eps, cond, tv_post


def check_theorem_bound(
    p_data: DensityGrid,
    model_prior: DensityGrid,
    likelihood_fn: Callable,
) -> ConditionReport:
    """
    Check TV(p_post, p_model_post) <= 2 kappa_y eps up to quadrature tolerance.

    The tolerance is QUADRATURE_SAFETY times the change of (bound - tv) between
    the grid and its every-other-node coarsening.

    Raises:
        TheoremViolationError: inequality fails beyond tolerance
    """
    if not p_data.same_grid(model_prior):
        raise ContractViolationError("p_data and model_prior must share a grid")
    lik = _tabulate(likelihood_fn, p_data)
    eps, cond, tv_post = _theorem_quantities(p_data, model_prior, lik)
    bound = 2.0 * cond.kappa_y * eps

    tolerance = 0.0
    coarse_p, coarse_q = p_data.coarsened(), model_prior.coarsened()
    if coarse_p is not None and coarse_q is not None:
        coarse_lik = lik[tuple(slice(None, None, 2) for _ in lik.shape)]
        try:
            c_eps, c_cond, c_tv = _theorem_quantities(coarse_p, coarse_q, coarse_lik)
            tolerance = QUADRATURE_SAFETY * (
                abs(tv_post - c_tv) + abs(bound - 2.0 * c_cond.kappa_y * c_eps)
            )
        except IllPosedInstanceError:
            logger.debug("Coarse grid too coarse for an error estimate")

    report = ConditionReport(
        kappa_y=cond.kappa_y,
        sup_likelihood=cond.sup_likelihood,
        evidence=cond.evidence,
        eps_prior=eps,
        bound_value=bound,
        tv_posteriors=tv_post,
        tolerance=tolerance,
    )
    if tv_post > bound + tolerance:
        raise TheoremViolationError(
            f"TV of posteriors {tv_post:.6g} exceeds 2*kappa*eps = {bound:.6g} "
            f"(tolerance {tolerance:.3g})"
        )
    logger.debug(f"Theorem bound holds: tv={tv_post:.4g} <= {bound:.4g}, kappa={cond.kappa_y:.4g}")
    return report


def sample_from_grid(p: DensityGrid, n: int, uniforms: np.ndarray = None, seed: int = 0) -> np.ndarray:
    """Inverse-CDF samples from a 1-D grid density."""
    if p.dim != 1:
        raise ContractViolationError("inverse-CDF sampling needs a 1-D grid")
    x = p.axes[0]
    cdf = integrate.cumulative_trapezoid(p.normalized(), x, initial=0.0)
    cdf = np.maximum.accumulate(cdf / cdf[-1])
    if uniforms is None:
        uniforms = CounterStream(seed, purpose=Purpose.ORACLE).uniform(0, n)
    # keep only strictly increasing CDF nodes so interpolation is well defined
    keep = np.concatenate(([True], np.diff(cdf) > 0))
    return np.interp(uniforms, cdf[keep], x[keep])


def dpi_tolerance(n_samples: int) -> float:
    """Histogram tolerance 5 / sqrt(n)."""
    return 5.0 / math.sqrt(n_samples)


def check_dpi(
    p: DensityGrid,
    q: DensityGrid,
    phi_fn: Callable[[np.ndarray], np.ndarray],
    n_bins: int = 30,
    n_samples: int = 40000,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Push matched samples of p and q through ``phi_fn`` and compare TV before/after.

    Returns:
        (TV_before from the grids, TV_after from histograms of the pushed samples).
        Data processing: TV_after <= TV_before + dpi_tolerance(n_samples).
    """
    if p.dim != 1:
        raise ContractViolationError("check_dpi needs 1-D densities")
    tv_before = tv_distance_grid(p, q)
    uniforms = CounterStream(seed, purpose=Purpose.ORACLE).uniform(0, n_samples)
    fp = np.asarray(phi_fn(sample_from_grid(p, n_samples, uniforms)), dtype=np.float64)
    fq = np.asarray(phi_fn(sample_from_grid(q, n_samples, uniforms)), dtype=np.float64)
    lo = min(fp.min(), fq.min())
    hi = max(fp.max(), fq.max())
    if hi <= lo:
        return tv_before, 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    hp, _ = np.histogram(fp, bins=edges)
    hq, _ = np.histogram(fq, bins=edges)
    tv_after = 0.5 * float(np.abs(hp / n_samples - hq / n_samples).sum())
    return tv_before, tv_after


def kde_on_grid(samples: np.ndarray, grid: DensityGrid) -> DensityGrid:
    """Gaussian KDE (Silverman bandwidth) of 1-D samples tabulated on ``grid``."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2 or np.ptp(samples) == 0:
        raise ContractViolationError("KDE needs at least two distinct samples")
    kde = stats.gaussian_kde(samples, bw_method="silverman")
    return grid.with_values(kde(grid.axes[0]))


def check_corollary_bound(
    p_data: DensityGrid,
    model_prior: DensityGrid,
    likelihood_fn: Callable,
    samples: np.ndarray,
) -> CorollaryReport:
    """
    Composite bound for chain output on a 1-D instance.

    TV(p_post, KDE) <= 2 kappa_y eps + eps_S with eps_S = TV(p_model_post, KDE).

    Raises:
        TheoremViolationError: bound fails beyond tolerance
    """
    if p_data.dim != 1:
        raise ContractViolationError("check_corollary_bound needs 1-D densities")
    theorem = check_theorem_bound(p_data, model_prior, likelihood_fn)
    lik = _tabulate(likelihood_fn, p_data)
    kde = kde_on_grid(samples, p_data)
    tv_true = tv_distance_grid(_posterior(p_data, lik), kde)
    eps_s = tv_distance_grid(_posterior(model_prior, lik), kde)
    bound = theorem.bound_value + eps_s
    report = CorollaryReport(
        tv_true=tv_true,
        eps_sampling=eps_s,
        kappa_y=theorem.kappa_y,
        eps_prior=theorem.eps_prior,
        bound_value=bound,
        tolerance=theorem.tolerance,
    )
    if tv_true > bound + theorem.tolerance:
        raise TheoremViolationError(
            f"chain TV {tv_true:.6g} exceeds 2*kappa*eps + eps_S = {bound:.6g}"
        )
    return report


def check_drift_score(
    lik: LikelihoodModel,
    map: GenerativeMap,
    grid_spec: GridSpec,
    n_points: int = 100,
    h: float = 1e-5,
) -> float:
    """
    Compare the Langevin drift -(z + grad L_y(Phi(z))) with the finite-difference
    derivative of the log of the quadrature-normalized target on a 1-D instance.

    Returns:
        max over ``n_points`` interior nodes of |drift - score| / max(|score|, 1e-3)
    """
    if map.dim != 1:
        raise ContractViolationError("drift-score check runs on 1-D instances")
    grid = grid_posterior(lik, map, grid_spec)
    z_axis = grid.axes[0]
    # log of the normalized target, with the same scaling used on the grid
    log_z = math.log(grid.normalization())
    log_shift = float(np.max(_log_noise_density(lik, map, grid.spec)))

    def log_target(z: float) -> float:
        return -0.5 * z * z - neg_log_likelihood(lik, apply_map(map, [z])) - log_shift - log_z

    peak = float(z_axis[np.argmax(grid.values)])
    sd = math.sqrt(grid.covariance()[0, 0])
    points = np.linspace(peak - 3.0 * sd, peak + 3.0 * sd, n_points)
    worst = 0.0
    for z in points:
        _, g, _ = loss_and_grad(lik, map, [z])
        drift = -(z + g[0])
        score = (log_target(z + h) - log_target(z - h)) / (2.0 * h)
        worst = max(worst, abs(drift - score) / max(abs(score), 1e-3))
    return worst


def _integrated_autocorrelation_time(x: np.ndarray) -> float:
    """Initial positive sequence estimator of the integrated autocorrelation time."""
    n = x.size
    centered = x - x.mean()
    var = centered @ centered / n
    if var == 0.0:
        return 1.0
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    rho = acov / acov[0]
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        total += pair
    return max(1.0, -1.0 + 2.0 * total)


def moment_estimate(samples: Union[Sequence[np.ndarray], np.ndarray]) -> MomentEstimate:
    """
    Mean, unbiased covariance and per-coordinate standard errors.

    Standard errors use an effective sample size n / tau_int per coordinate.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ContractViolationError(f"need at least 2 samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    tau = np.array([_integrated_autocorrelation_time(x[:, j]) for j in range(x.shape[1])])
    ess = x.shape[0] / tau
    std_errors = np.sqrt(np.diag(cov) / ess)
    return MomentEstimate(mean=mean, covariance=cov, std_errors=std_errors, effective_sample_size=ess)
