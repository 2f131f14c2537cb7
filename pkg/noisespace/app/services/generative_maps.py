"""
Generative maps - deterministic noise-to-data maps with exact pullbacks.

Three built-in differentiable maps stand in for a distilled one- or two-step
generator:
- AffineMap: x0 = M x1 + b
- MLPMap: stacked tanh layers
- TwoStepMap: inner(mix * inner(x1) + sqrt(1 - mix^2) * z) with z fixed at construction

The noise prior is always the standard normal N(0, I).
"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from noisespace.app.errors import ContractViolationError
from noisespace.app.utils.rng import CounterStream, Purpose
from noisespace.app.utils.vectors import (
    Cotangent,
    DataVector,
    NoiseVector,
    as_matrix,
    as_vector,
    frozen,
    relative_error,
)

logger = logging.getLogger(__name__)


class GenerativeMap:
    """
    Base class for deterministic maps Phi: R^d -> R^d.

    Subclasses implement ``_forward`` and ``_pullback`` on validated inputs.
    Instances are immutable after construction.
    """

    kind: str = ""
    nfe_per_eval: int = 1

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractViolationError(f"map dimension must be >= 1, got {dim}")
        self.dim = int(dim)

    def apply(self, x1: NoiseVector) -> DataVector:
        """Evaluate Phi(x1)."""
        x1 = as_vector(x1, self.dim, name="x1")
        return self._forward(x1)

    def pullback(self, x1: NoiseVector, v: Cotangent) -> NoiseVector:
        """Evaluate J(x1)^T v."""
        x1 = as_vector(x1, self.dim, name="x1")
        v = as_vector(v, self.dim, name="cotangent")
        return self._pullback(x1, v)

    def _forward(self, x1: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pullback(self, x1: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_spec(self) -> Dict[str, Any]:
        """Serialize to the config format (kind tag + flat row-major arrays)."""
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, nfe_per_eval={self.nfe_per_eval})"


class AffineMap(GenerativeMap):
    """Affine map x0 = M x1 + b."""

    kind = "affine"
    nfe_per_eval = 1

    def __init__(self, matrix, offset=None):
        matrix = as_matrix(matrix, name="affine matrix")
        if matrix.shape[0] != matrix.shape[1]:
            raise ContractViolationError(
                f"affine matrix must be square (R^d -> R^d), got {matrix.shape}"
            )
        super().__init__(matrix.shape[0])
        if offset is None:
            offset = np.zeros(self.dim)
        self.matrix = frozen(matrix)
        self.offset = frozen(as_vector(offset, self.dim, name="affine offset"))

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        """Identity map on R^dim."""
        return cls(np.eye(dim), np.zeros(dim))

    def _forward(self, x1):
        return self.matrix @ x1 + self.offset

    def _pullback(self, x1, v):
        return self.matrix.T @ v

    def to_spec(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "matrix": self.matrix.ravel().tolist(),
            "offset": self.offset.tolist(),
        }


class MLPMap(GenerativeMap):
    """
    Multilayer perceptron with tanh after every layer.

    Layers are (W, b) pairs; the first layer consumes R^d and the last layer
    produces R^d. Hidden widths are free.
    """

    kind = "mlp"
    nfe_per_eval = 1
    ACTIVATION = "tanh"

    def __init__(self, layers: Sequence[Tuple[Any, Any]], activation: str = "tanh"):
        if activation != self.ACTIVATION:
            raise ContractViolationError(
                f"only tanh activations are supported, got '{activation}'"
            )
        if len(layers) == 0:
            raise ContractViolationError("mlp needs at least one layer")

        weights: List[np.ndarray] = []
        biases: List[np.ndarray] = []
        for i, (w, b) in enumerate(layers):
            w = as_matrix(w, name=f"layer {i} weight")
            b = as_vector(b, w.shape[0], name=f"layer {i} bias")
            if weights and w.shape[1] != weights[-1].shape[0]:
                raise ContractViolationError(
                    f"layer {i} expects input width {w.shape[1]}, "
                    f"previous layer outputs {weights[-1].shape[0]}"
                )
            weights.append(frozen(w))
            biases.append(frozen(b))

        dim = weights[0].shape[1]
        if weights[-1].shape[0] != dim:
            raise ContractViolationError(
                f"mlp must map R^{dim} to R^{dim}, last layer outputs {weights[-1].shape[0]}"
            )
        super().__init__(dim)
        self.weights = tuple(weights)
        self.biases = tuple(biases)

    @classmethod
    def random(
        cls,
        dim: int,
        hidden: Sequence[int] = (),
        seed: int = 0,
        scale: float = 1.0,
    ) -> "MLPMap":
        """
        Seeded MLP with N(0, scale^2 / fan_in) weights and N(0, 0.1^2) biases.

        Args:
            dim: input/output dimension d
            hidden: hidden layer widths
            seed: parameter seed
            scale: weight scale
        """
        widths = [dim, *hidden, dim]
        gen = CounterStream(seed, purpose=Purpose.PARAMETERS).generator(0)
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = gen.standard_normal((fan_out, fan_in)) * (scale / math.sqrt(fan_in))
            b = 0.1 * gen.standard_normal(fan_out)
            layers.append((w, b))
        return cls(layers)

    def _activations(self, x1: np.ndarray) -> List[np.ndarray]:
        outs = [x1]
        h = x1
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(w @ h + b)
            outs.append(h)
        return outs

    def _forward(self, x1):
        return self._activations(x1)[-1]

    def _pullback(self, x1, v):
        outs = self._activations(x1)
        grad = v
        for layer in range(len(self.weights) - 1, -1, -1):
            t = outs[layer + 1]
            grad = self.weights[layer].T @ (grad * (1.0 - t * t))
        return grad

    def to_spec(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "activation": self.ACTIVATION,
            "layers": [
                {
                    "rows": int(w.shape[0]),
                    "cols": int(w.shape[1]),
                    "weight": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
                for w, b in zip(self.weights, self.biases)
            ],
        }


class TwoStepMap(GenerativeMap):
    """
    Deterministic two-step map with a fixed intermediate noise vector.

    Phi2(x1) = inner(mix * inner(x1) + sqrt(1 - mix^2) * z)
    """

    kind = "two_step"
    nfe_per_eval = 2

    def __init__(self, inner: GenerativeMap, noise, mix: float, seed: Optional[int] = None):
        if not isinstance(inner, (AffineMap, MLPMap)):
            raise ContractViolationError(
                f"two_step inner map must be affine or mlp, got {type(inner).__name__}"
            )
        if not 0.0 < mix < 1.0:
            raise ContractViolationError(f"mix must lie in (0, 1), got {mix}")
        super().__init__(inner.dim)
        self.inner = inner
        self.noise = frozen(as_vector(noise, inner.dim, name="intermediate noise"))
        self.mix = float(mix)
        self.noise_scale = math.sqrt(1.0 - self.mix * self.mix)
        self.seed = seed

    def _intermediate(self, x1):
        return self.mix * self.inner._forward(x1) + self.noise_scale * self.noise

    def _forward(self, x1):
        return self.inner._forward(self._intermediate(x1))

    def _pullback(self, x1, v):
        u = self._intermediate(x1)
        return self.inner._pullback(x1, self.mix * self.inner._pullback(u, v))

    def to_spec(self):
        spec = {
            "kind": self.kind,
            "inner": self.inner.to_spec(),
            "mix": self.mix,
        }
        if self.seed is not None:
            spec["seed"] = self.seed
        else:
            spec["noise"] = self.noise.tolist()
        return spec


def apply_map(map: GenerativeMap, x1: NoiseVector) -> DataVector:
    """
    Evaluate x0 = Phi(x1).

    Pure and deterministic; NFE accounting is the caller's job via
    ``map.nfe_per_eval``.
    """
    return map.apply(x1)


def pullback_map(map: GenerativeMap, x1: NoiseVector, v: Cotangent) -> NoiseVector:
    """Evaluate the vector-Jacobian product J(x1)^T v."""
    return map.pullback(x1, v)


def apply_batch(map: GenerativeMap, noise: np.ndarray) -> np.ndarray:
    """Evaluate Phi row by row on an (n, d) array of noise vectors."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != map.dim:
        raise ContractViolationError(
            f"batch must have shape (n, {map.dim}), got {noise.shape}"
        )
    return np.vstack([map.apply(x1) for x1 in noise]) if len(noise) else np.empty((0, map.dim))


def check_pullback_fd(
    map: GenerativeMap,
    x1: NoiseVector,
    v: Cotangent,
    h: float = 1e-5,
) -> float:
    """
    Relative error between ``pullback_map`` and central finite differences.

    Component j of J^T v is estimated as
    (<v, Phi(x1 + h e_j)> - <v, Phi(x1 - h e_j)>) / (2h).

    Args:
        map: generative map
        x1: evaluation point
        v: cotangent
        h: finite-difference step (> 0)

    Returns:
        ||analytic - fd|| / ||fd||
    """
    if not h > 0:
        raise ContractViolationError(f"finite-difference step must be positive, got {h}")
    x1 = as_vector(x1, map.dim, name="x1")
    v = as_vector(v, map.dim, name="cotangent")

    analytic = pullback_map(map, x1, v)
    fd = np.empty(map.dim)
    for j in range(map.dim):
        e = np.zeros(map.dim)
        e[j] = h
        fd[j] = (v @ apply_map(map, x1 + e) - v @ apply_map(map, x1 - e)) / (2.0 * h)
    return relative_error(analytic, fd)


def make_two_step_map(inner: GenerativeMap, seed: int, mix: float) -> TwoStepMap:
    """
    Build a two-step map whose intermediate noise z ~ N(0, I) is drawn once from ``seed``.

    Args:
        inner: affine or mlp map
        seed: seed of the intermediate noise
        mix: mixing scalar in (0, 1)

    Returns:
        TwoStepMap with nfe_per_eval = 2
    """
    if not isinstance(inner, (AffineMap, MLPMap)):
        raise ContractViolationError(
            f"two_step inner map must be affine or mlp, got {type(inner).__name__}"
        )
    z = CounterStream(seed, purpose=Purpose.TWO_STEP).normal(0, inner.dim)
    logger.debug(f"Drew fixed two-step noise from seed {seed} (dim {inner.dim})")
    return TwoStepMap(inner, z, mix, seed=seed)


def map_from_spec(spec: Dict[str, Any]) -> GenerativeMap:
    """
    Build a map from its config-format dictionary.

    Supported kinds: identity, affine, mlp (explicit layers or seeded), two_step.
    """
    kind = spec.get("kind")
    if kind == "identity":
        return AffineMap.identity(int(spec["dim"]))
    if kind == "affine":
        dim = int(spec["dim"])
        return AffineMap(as_matrix(spec["matrix"], (dim, dim), name="affine matrix"),
                         spec.get("offset"))
    if kind == "mlp":
        if spec.get("layers"):
            layers = [
                (as_matrix(layer["weight"], (layer["rows"], layer["cols"]),
                           name=f"layer {i} weight"), layer["bias"])
                for i, layer in enumerate(spec["layers"])
            ]
            return MLPMap(layers, activation=spec.get("activation", "tanh"))
        return MLPMap.random(
            int(spec["dim"]),
            hidden=spec.get("hidden") or (),
            seed=int(spec.get("seed", 0)),
            scale=float(spec.get("scale", 1.0)),
        )
    if kind == "two_step":
        inner = map_from_spec(spec["inner"])
        if spec.get("noise") is not None:
            return TwoStepMap(inner, spec["noise"], float(spec["mix"]))
        return make_two_step_map(inner, int(spec.get("seed", 0)), float(spec["mix"]))
    raise ContractViolationError(f"unknown map kind '{kind}'")
