"""
Sampler Service - warm-started Langevin dynamics in noise space

Pipeline per chain:
1. z_init ~ N(0, I) from the chain's INIT stream
2. K Adam steps minimizing L_y(Phi(.)) (warm-start)
3. N steps of Euler-Maruyama or exponential-integrator Langevin dynamics,
   targeting p(z | y) ∝ exp(-||z||^2/2 - L_y(Phi(z)))
4. Retain x0 = Phi(z^i) after burn-in at the thinning stride

Every gradient evaluation also yields Phi(z), so each step costs exactly one
map evaluation (eta NFEs) and a run costs eta * (K + N).
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from noisespace.app.errors import ContractViolationError, DivergenceError
from noisespace.app.services.forward_operators import LikelihoodModel, loss_and_grad
from noisespace.app.services.generative_maps import GenerativeMap
from noisespace.app.utils.rng import CounterStream, Purpose
from noisespace.app.utils.vectors import NoiseVector, as_vector

logger = logging.getLogger(__name__)

# Log a DEBUG line every N Langevin steps
DEBUG_LOG_INTERVAL = 1000


class SamplerConfig(BaseModel):
    """Warm-start and Langevin hyper-parameters for one chain."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(1e-3, gt=0.0, lt=1.0)
    n_steps: int = Field(2000, gt=0)
    warm_steps: int = Field(500, ge=0)
    adam_lr: float = Field(5e-3, gt=0.0)
    adam_beta1: float = Field(0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    scheme: Literal["em", "ei"] = "em"
    seed: int = Field(0, ge=-(2 ** 63), lt=2 ** 64)
    burn_in: int = Field(500, ge=0)
    thinning: int = Field(10, gt=0)
    record_noise: bool = False

    @field_validator("scheme", mode="before")
    @classmethod
    def validate_scheme(cls, v):
        if isinstance(v, str):
            return v.lower()
        return v

    @model_validator(mode="after")
    def validate_burn_in(self):
        if self.burn_in >= self.n_steps:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be smaller than n_steps ({self.n_steps})"
            )
        return self


@dataclass(frozen=True)
class LangevinState:
    """
    Current noise-space iterate of a chain.

    ``g`` is the gradient at ``z`` whenever ``step > 0``; at step 0 it holds
    the last warm-start gradient (zeros without warm-start), so the chain
    never spends an extra evaluation on its starting point.
    """

    z: np.ndarray
    g: np.ndarray
    step: int
    stream: CounterStream
    x0: Optional[np.ndarray] = None
    loss: Optional[float] = None
    evaluations: int = 0


@dataclass
class WarmStartResult:
    """Output of the Adam warm-start."""

    z: np.ndarray
    last_gradient: Optional[np.ndarray]
    loss_trace: List[float]
    evaluations: int


@dataclass
class RunReport:
    """Record of one sampling chain."""

    samples: List[np.ndarray]
    sample_steps: List[int]
    nfe_total: int
    nfe_per_sample: float
    config: SamplerConfig
    wall_time_seconds: float
    dim: int
    chain_index: int = 0
    seed: int = 0
    nfe_per_eval: int = 1
    noise_trace: Optional[List[np.ndarray]] = None
    warm_start_loss: List[float] = field(default_factory=list)
    diverged: bool = False
    divergence_step: Optional[int] = None

    @property
    def sample_array(self) -> np.ndarray:
        """Samples as an (n, d) array."""
        if not self.samples:
            return np.empty((0, self.dim))
        return np.vstack(self.samples)


def _check_finite(state_step: int, loss: float, grad: np.ndarray, what: str):
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise DivergenceError(f"non-finite {what}", step=state_step, evaluated=True)


def _advance(
    state: LangevinState,
    lik: LikelihoodModel,
    map: GenerativeMap,
    z_next: np.ndarray,
) -> LangevinState:
    step = state.step + 1
    if not np.all(np.isfinite(z_next)):
        raise DivergenceError("non-finite iterate", step=step)
    loss, grad, x0 = loss_and_grad(lik, map, z_next)
    _check_finite(step, loss, grad, "gradient")
    return LangevinState(
        z=z_next,
        g=grad,
        step=step,
        stream=state.stream,
        x0=x0,
        loss=loss,
        evaluations=state.evaluations + 1,
    )


def _noise(state: LangevinState, noise) -> np.ndarray:
    if noise is None:
        return state.stream.normal(state.step, state.z.size)
    return as_vector(noise, state.z.size, name="forced noise")


def em_step(
    state: LangevinState,
    lik: LikelihoodModel,
    map: GenerativeMap,
    tau: float,
    noise: Optional[NoiseVector] = None,
) -> LangevinState:
    """
    Euler-Maruyama step: z' = (1 - tau) z - tau g + sqrt(2 tau) xi.

    Args:
        state: current state
        lik: likelihood model
        map: generative map
        tau: step size in (0, 1)
        noise: optional forced xi (drawn from the state's stream otherwise)

    Returns:
        New state with the gradient recomputed at z'

    Raises:
        DivergenceError: non-finite iterate or gradient
    """
    if not 0.0 < tau < 1.0:
        raise ContractViolationError(f"EM step size must lie in (0, 1), got {tau}")
    xi = _noise(state, noise)
    z_next = (1.0 - tau) * state.z - tau * state.g + math.sqrt(2.0 * tau) * xi
    return _advance(state, lik, map, z_next)


def ei_step(
    state: LangevinState,
    lik: LikelihoodModel,
    map: GenerativeMap,
    tau: float,
    noise: Optional[NoiseVector] = None,
) -> LangevinState:
    """
    Exponential-integrator step: the linear drift -z is integrated exactly and
    the gradient is frozen over the step.

    z' = e^{-tau} z - (1 - e^{-tau}) g + sqrt(1 - e^{-2 tau}) xi
    """
    if not tau > 0.0:
        raise ContractViolationError(f"EI step size must be positive, got {tau}")
    xi = _noise(state, noise)
    decay = math.exp(-tau)
    z_next = (
        decay * state.z
        - (-math.expm1(-tau)) * state.g
        + math.sqrt(-math.expm1(-2.0 * tau)) * xi
    )
    return _advance(state, lik, map, z_next)


STEP_FUNCTIONS = {"em": em_step, "ei": ei_step}


def _adam(
    z0: np.ndarray,
    lik: LikelihoodModel,
    map: GenerativeMap,
    cfg: SamplerConfig,
) -> WarmStartResult:
    z = np.array(z0, dtype=np.float64, copy=True)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    trace: List[float] = []
    grad = None

    for t in range(1, cfg.warm_steps + 1):
        loss, grad, _ = loss_and_grad(lik, map, z)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError("non-finite loss during warm-start", step=t, evaluated=True)
        trace.append(loss)

        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * (grad * grad)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        z = z - cfg.adam_lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    return WarmStartResult(z=z, last_gradient=grad, loss_trace=trace, evaluations=cfg.warm_steps)


def adam_warm_start(
    z0: NoiseVector,
    lik: LikelihoodModel,
    map: GenerativeMap,
    cfg: SamplerConfig,
) -> NoiseVector:
    """
    Run K = cfg.warm_steps bias-corrected Adam steps on L_y(Phi(.)) from z0.

    Consumes exactly K gradient evaluations; K = 0 returns z0 unchanged.

    Raises:
        DivergenceError: non-finite loss
    """
    z0 = as_vector(z0, map.dim, name="z0")
    return _adam(z0, lik, map, cfg).z


def _retain(step: int, cfg: SamplerConfig) -> bool:
    return step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0


def run_chain(
    map: GenerativeMap,
    lik: LikelihoodModel,
    cfg: SamplerConfig,
    chain_index: int = 0,
) -> RunReport:
    """
    Warm-start then simulate N Langevin steps (Posterior Sampling in Noise Space).

    Args:
        map: generative map Phi
        lik: likelihood model
        cfg: sampler configuration
        chain_index: index selecting the chain's disjoint random streams

    Returns:
        RunReport with nfe_total = eta * (K + N)

    Raises:
        DivergenceError: carries the partial report in ``report``
    """
    start = time.perf_counter()
    eta = map.nfe_per_eval
    z_init = CounterStream(cfg.seed, chain_index, Purpose.INIT).normal(0, map.dim)

    logger.info(
        f"Chain {chain_index}: seed={cfg.seed}, scheme={cfg.scheme}, tau={cfg.tau}, "
        f"K={cfg.warm_steps}, N={cfg.n_steps}"
    )

    samples: List[np.ndarray] = []
    sample_steps: List[int] = []
    noise_trace: Optional[List[np.ndarray]] = [] if cfg.record_noise else None
    step_fn = STEP_FUNCTIONS[cfg.scheme]

    def build_report(evaluations: int, warm_trace: List[float], diverged_at: Optional[int]) -> RunReport:
        nfe_total = eta * evaluations
        return RunReport(
            samples=samples,
            sample_steps=sample_steps,
            nfe_total=nfe_total,
            nfe_per_sample=nfe_total / len(samples) if samples else math.inf,
            config=cfg,
            wall_time_seconds=time.perf_counter() - start,
            dim=map.dim,
            chain_index=chain_index,
            seed=cfg.seed,
            nfe_per_eval=eta,
            noise_trace=noise_trace,
            warm_start_loss=warm_trace,
            diverged=diverged_at is not None,
            divergence_step=diverged_at,
        )

    try:
        warm = _adam(z_init, lik, map, cfg)
    except DivergenceError as e:
        logger.warning(f"Chain {chain_index} diverged during warm-start at step {e.step}")
        e.report = build_report(e.step, [], e.step)
        raise

    g0 = warm.last_gradient if warm.last_gradient is not None else np.zeros(map.dim)
    state = LangevinState(
        z=warm.z,
        g=g0,
        step=0,
        stream=CounterStream(cfg.seed, chain_index, Purpose.LANGEVIN),
    )

    try:
        for _ in range(cfg.n_steps):
            state = step_fn(state, lik, map, cfg.tau)
            if _retain(state.step, cfg):
                samples.append(state.x0)
                sample_steps.append(state.step)
                if noise_trace is not None:
                    noise_trace.append(state.z)
            if state.step % DEBUG_LOG_INTERVAL == 0:
                logger.debug(f"Chain {chain_index} step {state.step}: loss={state.loss:.6g}")
    except DivergenceError as e:
        logger.warning(f"Chain {chain_index} diverged at Langevin step {e.step}")
        evaluations = warm.evaluations + state.evaluations + int(e.evaluated)
        e.report = build_report(evaluations, warm.loss_trace, e.step)
        raise

    evaluations = warm.evaluations + state.evaluations
    if evaluations != cfg.warm_steps + cfg.n_steps:
        raise AssertionError(
            f"NFE accounting mismatch: {evaluations} evaluations for "
            f"K + N = {cfg.warm_steps + cfg.n_steps}"
        )

    report = build_report(evaluations, warm.loss_trace, None)
    logger.info(
        f"Chain {chain_index} finished: {len(samples)} samples, nfe_total={report.nfe_total}, "
        f"{report.wall_time_seconds:.2f}s"
    )
    return report


def nfe_curve(eta: int, K: int, n_values: Sequence[int]) -> List[float]:
    """
    Amortized NFEs per sample eta * (K + N) / N for each N.

    Strictly decreasing in N when K > 0 and approaching eta.
    """
    if eta < 1 or K < 0:
        raise ContractViolationError(f"need eta >= 1 and K >= 0, got eta={eta}, K={K}")
    curve = []
    for n in n_values:
        if n <= 0:
            raise ContractViolationError(f"chain lengths must be positive, got {n}")
        curve.append(eta * (K + n) / n)
    return curve


def initial_state(
    z: NoiseVector,
    lik: LikelihoodModel,
    map: GenerativeMap,
    seed: int = 0,
    chain_index: int = 0,
    gradient: Optional[NoiseVector] = None,
) -> LangevinState:
    """
    Build a step-0 state at ``z``.

    When ``gradient`` is omitted it is evaluated at ``z`` (one evaluation,
    recorded in ``evaluations``).
    """
    z = as_vector(z, map.dim, name="z")
    evaluations = 0
    loss = x0 = None
    if gradient is None:
        loss, gradient, x0 = loss_and_grad(lik, map, z)
        evaluations = 1
    return LangevinState(
        z=z,
        g=as_vector(gradient, map.dim, name="gradient"),
        step=0,
        stream=CounterStream(seed, chain_index, Purpose.LANGEVIN),
        x0=x0,
        loss=loss,
        evaluations=evaluations,
    )
