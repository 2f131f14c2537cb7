"""
Forward operators, the Gaussian likelihood and the noise-space loss gradient.

Operators act on flat data vectors; image operators interpret them as square
row-major images. Each operator provides ``apply`` and ``pullback`` (adjoint
for linear operators, (sub)gradient transpose otherwise).
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from noisespace.app.errors import ContractViolationError
from noisespace.app.services.generative_maps import GenerativeMap, apply_map, pullback_map
from noisespace.app.utils.rng import CounterStream, Purpose
from noisespace.app.utils.vectors import (
    Cotangent,
    DataVector,
    NoiseVector,
    as_matrix,
    as_vector,
    frozen,
)

logger = logging.getLogger(__name__)

# Default observation noise levels
DEFAULT_SIGMA = 0.1
PHASE_RETRIEVAL_SIGMA = 0.05


def _square_side(in_dim: int, kind: str) -> int:
    side = math.isqrt(in_dim)
    if side * side != in_dim:
        raise ContractViolationError(
            f"{kind} needs a square image, but in_dim={in_dim} is not a perfect square"
        )
    return side


class ForwardOperator:
    """
    Base class for measurement operators A: R^in_dim -> R^out_dim.

    Subclasses implement ``_forward`` and ``_pullback`` on validated inputs.
    """

    kind: str = ""
    linear: bool = False

    def __init__(self, in_dim: int, out_dim: int):
        if in_dim < 1 or out_dim < 1:
            raise ContractViolationError(
                f"operator dimensions must be positive, got in_dim={in_dim}, out_dim={out_dim}"
            )
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def apply(self, x0: DataVector) -> np.ndarray:
        x0 = as_vector(x0, self.in_dim, name="x0")
        return self._forward(x0)

    def pullback(self, x0: DataVector, v: Cotangent) -> DataVector:
        x0 = as_vector(x0, self.in_dim, name="x0")
        v = as_vector(v, self.out_dim, name="cotangent")
        return self._pullback(x0, v)

    def _forward(self, x0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pullback(self, x0: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_spec(self) -> Dict[str, Any]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(in_dim={self.in_dim}, out_dim={self.out_dim})"


class IdentityOperator(ForwardOperator):
    """A(x) = x."""

    kind = "identity"
    linear = True

    def __init__(self, dim: int):
        super().__init__(dim, dim)

    def _forward(self, x0):
        return x0.copy()

    def _pullback(self, x0, v):
        return v.copy()

    def to_spec(self):
        return {"kind": self.kind, "dim": self.in_dim}


class InpaintOperator(ForwardOperator):
    """Elementwise 0/1 mask; masked pixels are observed as zero."""

    kind = "inpaint"
    linear = True

    def __init__(self, mask: Sequence[int]):
        mask = np.asarray(mask)
        if mask.ndim != 1 or not np.all((mask == 0) | (mask == 1)):
            raise ContractViolationError("inpaint mask must be a 1-D sequence of 0/1 values")
        super().__init__(mask.size, mask.size)
        self.mask = frozen(mask.astype(np.float64))

    @classmethod
    def random(cls, dim: int, keep_fraction: float, seed: int) -> "InpaintOperator":
        """Mask keeping round(keep_fraction * dim) uniformly chosen pixels."""
        if not 0.0 <= keep_fraction <= 1.0:
            raise ContractViolationError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
        gen = CounterStream(seed, purpose=Purpose.PARAMETERS).generator(0)
        mask = np.zeros(dim, dtype=int)
        keep = gen.permutation(dim)[: int(round(keep_fraction * dim))]
        mask[keep] = 1
        return cls(mask)

    def _forward(self, x0):
        return self.mask * x0

    def _pullback(self, x0, v):
        return self.mask * v

    def to_spec(self):
        return {"kind": self.kind, "mask": self.mask.astype(int).tolist()}


class AvgPoolOperator(ForwardOperator):
    """Non-overlapping f x f average pooling on a square image."""

    kind = "avgpool"
    linear = True

    def __init__(self, in_dim: int, factor: int):
        side = _square_side(in_dim, self.kind)
        if factor < 1 or side % factor != 0:
            raise ContractViolationError(
                f"pooling factor {factor} must divide the image side {side}"
            )
        self.side = side
        self.factor = int(factor)
        self.out_side = side // factor
        super().__init__(in_dim, self.out_side * self.out_side)

    def _forward(self, x0):
        m, f = self.out_side, self.factor
        return x0.reshape(m, f, m, f).mean(axis=(1, 3)).ravel()

    def _pullback(self, x0, v):
        f = self.factor
        img = v.reshape(self.out_side, self.out_side) / (f * f)
        return np.repeat(np.repeat(img, f, axis=0), f, axis=1).ravel()

    def to_spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "factor": self.factor}


def gaussian_kernel(size: int, std: float) -> np.ndarray:
    """Normalized ``size`` x ``size`` Gaussian kernel (size odd)."""
    if size < 1 or size % 2 == 0:
        raise ContractViolationError(f"kernel size must be a positive odd integer, got {size}")
    if not std > 0:
        raise ContractViolationError(f"kernel std must be positive, got {std}")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / std) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


class ConvBlurOperator(ForwardOperator):
    """Circular 2-D convolution of a square image with an odd-sized kernel."""

    kind = "conv_blur"
    linear = True

    def __init__(self, in_dim: int, kernel):
        self.side = _square_side(in_dim, self.kind)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim == 1:
            k = math.isqrt(kernel.size)
            if k * k != kernel.size:
                raise ContractViolationError(
                    f"flat kernel of length {kernel.size} is not a square"
                )
            kernel = kernel.reshape(k, k)
        kernel = as_matrix(kernel, name="blur kernel")
        if kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ContractViolationError(f"blur kernel must be square with odd size, got {kernel.shape}")
        self.kernel = frozen(kernel)
        super().__init__(in_dim, in_dim)

    def _forward(self, x0):
        img = x0.reshape(self.side, self.side)
        return ndimage.convolve(img, self.kernel, mode="wrap").ravel()

    def _pullback(self, x0, v):
        img = v.reshape(self.side, self.side)
        return ndimage.correlate(img, self.kernel, mode="wrap").ravel()

    def to_spec(self):
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "kernel_size": int(self.kernel.shape[0]),
            "kernel": self.kernel.ravel().tolist(),
        }


class HDRClipOperator(ForwardOperator):
    """A(x) = clip(scale * x, -1, 1) elementwise."""

    kind = "hdr_clip"
    linear = False

    def __init__(self, dim: int, scale: float = 2.0):
        if not scale > 0:
            raise ContractViolationError(f"clip scale must be positive, got {scale}")
        super().__init__(dim, dim)
        self.scale = float(scale)

    def _forward(self, x0):
        return np.clip(self.scale * x0, -1.0, 1.0)

    def _pullback(self, x0, v):
        # subgradient 0 on saturated entries
        active = np.abs(self.scale * x0) < 1.0
        return np.where(active, self.scale * v, 0.0)

    def to_spec(self):
        return {"kind": self.kind, "dim": self.in_dim, "scale": self.scale}


class DFTMagnitudeOperator(ForwardOperator):
    """
    Fourier magnitude |F P x| of a 1-D or 2-D signal.

    P zero-pads ``pad`` samples on each side of every axis (pad = 0 gives
    oversampling ratio 1).
    """

    kind = "dft_magnitude"
    linear = False

    def __init__(self, shape: Sequence[int], pad: int = 0):
        shape = tuple(int(s) for s in shape)
        if len(shape) not in (1, 2) or any(s < 1 for s in shape):
            raise ContractViolationError(f"dft_magnitude shape must be 1-D or 2-D, got {shape}")
        if pad < 0:
            raise ContractViolationError(f"pad must be non-negative, got {pad}")
        self.shape = shape
        self.pad = int(pad)
        self.padded_shape = tuple(s + 2 * self.pad for s in shape)
        super().__init__(int(np.prod(shape)), int(np.prod(self.padded_shape)))

    def _spectrum(self, x0):
        img = np.pad(x0.reshape(self.shape), self.pad)
        return np.fft.fftn(img)

    def _forward(self, x0):
        return np.abs(self._spectrum(x0)).ravel()

    def _pullback(self, x0, v):
        spec = self._spectrum(x0)
        mod = np.abs(spec)
        # subgradient 0 at zero-modulus bins
        phase = np.divide(spec, mod, out=np.zeros_like(spec), where=mod > 0)
        u = v.reshape(self.padded_shape) * phase
        grad = np.real(np.fft.ifftn(u)) * u.size
        if self.pad:
            crop = tuple(slice(self.pad, self.pad + s) for s in self.shape)
            grad = grad[crop]
        return grad.ravel()

    def to_spec(self):
        return {"kind": self.kind, "shape": list(self.shape), "pad": self.pad}


class ToyNonlinearOperator(ForwardOperator):
    """
    Fixed seeded one-hidden-layer tanh network A(x) = W2 tanh(W1 x + b1) + b2.

    Plays the role of a differentiable black-box nonlinear degradation.
    """

    kind = "toy_nonlinear"
    linear = False

    def __init__(self, dim: int, hidden: int = 16, seed: int = 0, scale: float = 1.0):
        super().__init__(dim, dim)
        gen = CounterStream(seed, purpose=Purpose.PARAMETERS).generator(1)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.scale = float(scale)
        self.w1 = frozen(gen.standard_normal((hidden, dim)) * (scale / math.sqrt(dim)))
        self.b1 = frozen(0.1 * gen.standard_normal(hidden))
        self.w2 = frozen(gen.standard_normal((dim, hidden)) / math.sqrt(hidden))
        self.b2 = frozen(0.1 * gen.standard_normal(dim))

    def _forward(self, x0):
        return self.w2 @ np.tanh(self.w1 @ x0 + self.b1) + self.b2

    def _pullback(self, x0, v):
        t = np.tanh(self.w1 @ x0 + self.b1)
        return self.w1.T @ ((1.0 - t * t) * (self.w2.T @ v))

    def to_spec(self):
        return {
            "kind": self.kind,
            "dim": self.in_dim,
            "hidden": self.hidden,
            "seed": self.seed,
            "scale": self.scale,
        }


def operator_from_spec(spec: Dict[str, Any]) -> ForwardOperator:
    """Build an operator from its config-format dictionary."""
    kind = spec.get("kind")
    if kind == "identity":
        return IdentityOperator(int(spec["dim"]))
    if kind == "inpaint":
        if spec.get("mask") is not None:
            return InpaintOperator(spec["mask"])
        return InpaintOperator.random(
            int(spec["dim"]), float(spec.get("keep_fraction", 0.5)), int(spec.get("seed", 0))
        )
    if kind == "avgpool":
        return AvgPoolOperator(int(spec["in_dim"]), int(spec.get("factor", 2)))
    if kind == "conv_blur":
        if spec.get("kernel") is not None:
            kernel = spec["kernel"]
        else:
            kernel = gaussian_kernel(int(spec.get("kernel_size", 3)), float(spec.get("kernel_std", 1.0)))
        return ConvBlurOperator(int(spec["in_dim"]), kernel)
    if kind == "hdr_clip":
        return HDRClipOperator(int(spec["dim"]), float(spec.get("scale", 2.0)))
    if kind == "dft_magnitude":
        return DFTMagnitudeOperator(spec["shape"], int(spec.get("pad", 0)))
    if kind == "toy_nonlinear":
        return ToyNonlinearOperator(
            int(spec["dim"]),
            hidden=int(spec.get("hidden", 16)),
            seed=int(spec.get("seed", 0)),
            scale=float(spec.get("scale", 1.0)),
        )
    raise ContractViolationError(f"unknown operator kind '{kind}'")


@dataclass(frozen=True)
class Measurement:
    """Observation y with its noise level sigma."""

    values: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ContractViolationError(f"noise sigma must be positive, got {self.noise_sigma}")
        object.__setattr__(self, "values", frozen(as_vector(self.values, name="measurement")))


class LikelihoodModel:
    """
    Gaussian likelihood L_y(x0) = ||y - A(x0)||^2 / (2 sigma^2).

    The additive constant depending only on (sigma, d) is dropped.
    """

    def __init__(self, operator: ForwardOperator, measurement: Measurement):
        if operator.out_dim != measurement.values.size:
            raise ContractViolationError(
                f"operator out_dim ({operator.out_dim}) != measurement length "
                f"({measurement.values.size})"
            )
        self.operator = operator
        self.measurement = measurement

    @property
    def sigma(self) -> float:
        return self.measurement.noise_sigma

    def residual(self, x0: DataVector) -> np.ndarray:
        """A(x0) - y."""
        return self.operator.apply(x0) - self.measurement.values

    def __repr__(self) -> str:
        return f"LikelihoodModel({self.operator!r}, sigma={self.sigma})"


def op_apply(op: ForwardOperator, x0: DataVector) -> np.ndarray:
    """Evaluate A(x0)."""
    return op.apply(x0)


def op_pullback(op: ForwardOperator, x0: DataVector, v: Cotangent) -> DataVector:
    """Evaluate (dA/dx0)^T v (adjoint for linear operators)."""
    return op.pullback(x0, v)


def neg_log_likelihood(lik: LikelihoodModel, x0: DataVector) -> float:
    """||y - A(x0)||^2 / (2 sigma^2)."""
    r = lik.residual(x0)
    return float(r @ r) / (2.0 * lik.sigma ** 2)


def loss_and_grad(
    lik: LikelihoodModel,
    map: GenerativeMap,
    x1: NoiseVector,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    One noise-space evaluation: (L_y(Phi(x1)), grad_x1 L_y(Phi(x1)), Phi(x1)).

    The gradient is the chain rule realized by two pullbacks:
    pullback_map(x1, op_pullback(Phi(x1), (A(Phi(x1)) - y) / sigma^2)).
    """
    if lik.operator.in_dim != map.dim:
        raise ContractViolationError(
            f"operator in_dim ({lik.operator.in_dim}) != map dimension ({map.dim})"
        )
    x0 = apply_map(map, x1)
    r = lik.residual(x0)
    sigma2 = lik.sigma ** 2
    loss = float(r @ r) / (2.0 * sigma2)
    grad = pullback_map(map, x1, op_pullback(lik.operator, x0, r / sigma2))
    return loss, grad, x0


def grad_noise_loss(lik: LikelihoodModel, map: GenerativeMap, x1: NoiseVector) -> NoiseVector:
    """Gradient of L_y(Phi(x1)) with respect to the noise x1."""
    return loss_and_grad(lik, map, x1)[1]


def default_noise_sigma(kind: str) -> float:
    """Observation noise level used when a config leaves it unset."""
    return PHASE_RETRIEVAL_SIGMA if kind == DFTMagnitudeOperator.kind else DEFAULT_SIGMA


def synthesize_measurement(
    op: ForwardOperator,
    x_true: DataVector,
    sigma: float,
    noise_seed: int,
) -> Measurement:
    """
    y = A(x_true) + sigma * n with n ~ N(0, I) from a dedicated counter-based stream.
    """
    clean = op_apply(op, x_true)
    noise = CounterStream(noise_seed, purpose=Purpose.MEASUREMENT).normal(0, clean.size)
    logger.debug(f"Synthesized measurement of length {clean.size} with sigma={sigma}")
    return Measurement(clean + sigma * noise, sigma)
