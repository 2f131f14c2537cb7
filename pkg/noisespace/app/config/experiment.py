"""
Experiment configuration - strict JSON schema for ``sample`` runs.

Map and operator specs are tagged on ``kind`` and carry flat row-major arrays.
Unknown keys are rejected with a close-match suggestion, and cross-field
consistency (dimensions, image shape) is checked before anything is computed.
"""

import difflib
import json
import logging
import typing
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from noisespace.app.config.config import get_settings
from noisespace.app.errors import ConfigError, ContractViolationError
from noisespace.app.services.forward_operators import (
    ForwardOperator,
    default_noise_sigma,
    operator_from_spec,
)
from noisespace.app.services.generative_maps import GenerativeMap, map_from_spec
from noisespace.app.services.sampler_service import SamplerConfig

logger = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- generative maps -------------------------------------------------------

class IdentityMapSpec(_Strict):
    kind: Literal["identity"] = "identity"
    dim: int = Field(..., ge=1)


class AffineMapSpec(_Strict):
    kind: Literal["affine"] = "affine"
    dim: int = Field(..., ge=1)
    matrix: List[float]
    offset: Optional[List[float]] = None

    @model_validator(mode="after")
    def validate_shapes(self):
        if len(self.matrix) != self.dim * self.dim:
            raise ValueError(f"matrix has {len(self.matrix)} entries, expected dim*dim = {self.dim ** 2}")
        if self.offset is not None and len(self.offset) != self.dim:
            raise ValueError(f"offset has length {len(self.offset)}, expected dim = {self.dim}")
        return self


class MLPLayerSpec(_Strict):
    rows: int = Field(..., ge=1)
    cols: int = Field(..., ge=1)
    weight: List[float]
    bias: List[float]

    @model_validator(mode="after")
    def validate_shapes(self):
        if len(self.weight) != self.rows * self.cols:
            raise ValueError(f"weight has {len(self.weight)} entries, expected rows*cols = {self.rows * self.cols}")
        if len(self.bias) != self.rows:
            raise ValueError(f"bias has length {len(self.bias)}, expected rows = {self.rows}")
        return self


class MLPMapSpec(_Strict):
    kind: Literal["mlp"] = "mlp"
    dim: Optional[int] = Field(None, ge=1)
    activation: Literal["tanh"] = "tanh"
    layers: Optional[List[MLPLayerSpec]] = None
    hidden: List[int] = Field(default_factory=list)
    seed: int = 0
    scale: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def validate_source(self):
        if not self.layers and self.dim is None:
            raise ValueError("mlp needs either explicit layers or a dim for seeded construction")
        if self.layers:
            first, last = self.layers[0].cols, self.layers[-1].rows
            if self.dim is not None and self.dim != first:
                raise ValueError(f"dim ({self.dim}) does not match first layer cols ({first})")
            if first != last:
                raise ValueError(f"mlp must map R^d to R^d, got {first} -> {last}")
        return self

    @property
    def resolved_dim(self) -> int:
        return self.dim if self.dim is not None else self.layers[0].cols


class TwoStepMapSpec(_Strict):
    kind: Literal["two_step"] = "two_step"
    inner: Annotated[Union[IdentityMapSpec, AffineMapSpec, MLPMapSpec], Field(discriminator="kind")]
    mix: float = Field(..., gt=0.0, lt=1.0)
    seed: int = 0
    noise: Optional[List[float]] = None


MapSpec = Annotated[
    Union[IdentityMapSpec, AffineMapSpec, MLPMapSpec, TwoStepMapSpec],
    Field(discriminator="kind"),
]


# --- forward operators -----------------------------------------------------

class IdentityOperatorSpec(_Strict):
    kind: Literal["identity"] = "identity"
    dim: int = Field(..., ge=1)


class InpaintOperatorSpec(_Strict):
    kind: Literal["inpaint"] = "inpaint"
    mask: Optional[List[int]] = None
    dim: Optional[int] = Field(None, ge=1)
    keep_fraction: float = Field(0.5, gt=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_source(self):
        if self.mask is None and self.dim is None:
            raise ValueError("inpaint needs either a mask or a dim for a random mask")
        if self.mask is not None and self.dim is not None and len(self.mask) != self.dim:
            raise ValueError(f"mask has length {len(self.mask)}, expected dim = {self.dim}")
        return self


class AvgPoolOperatorSpec(_Strict):
    kind: Literal["avgpool"] = "avgpool"
    in_dim: int = Field(..., ge=1)
    factor: int = Field(2, ge=1)


class ConvBlurOperatorSpec(_Strict):
    kind: Literal["conv_blur"] = "conv_blur"
    in_dim: int = Field(..., ge=1)
    kernel: Optional[List[float]] = None
    kernel_size: int = Field(3, ge=1)
    kernel_std: float = Field(1.0, gt=0.0)


class HDRClipOperatorSpec(_Strict):
    kind: Literal["hdr_clip"] = "hdr_clip"
    dim: int = Field(..., ge=1)
    scale: float = Field(2.0, gt=0.0)


class DFTMagnitudeOperatorSpec(_Strict):
    kind: Literal["dft_magnitude"] = "dft_magnitude"
    shape: List[int] = Field(..., min_length=1, max_length=2)
    pad: int = Field(0, ge=0)


class ToyNonlinearOperatorSpec(_Strict):
    kind: Literal["toy_nonlinear"] = "toy_nonlinear"
    dim: int = Field(..., ge=1)
    hidden: int = Field(16, ge=1)
    seed: int = 0
    scale: float = Field(1.0, gt=0.0)


OperatorSpec = Annotated[
    Union[
        IdentityOperatorSpec,
        InpaintOperatorSpec,
        AvgPoolOperatorSpec,
        ConvBlurOperatorSpec,
        HDRClipOperatorSpec,
        DFTMagnitudeOperatorSpec,
        ToyNonlinearOperatorSpec,
    ],
    Field(discriminator="kind"),
]


# --- measurement, metrics, experiment --------------------------------------

class MeasurementSpec(_Strict):
    """
    Where y comes from.

    - synthesize: y = A(x_true) + sigma * n; x_true is ``ground_truth`` or, when
      omitted, Phi(z_true) with z_true drawn from ``noise_seed``
    - inline: y given by ``values``
    - file: y read from ``path`` (JSON list or whitespace/comma separated text)

    ``noise_sigma`` defaults to 0.05 for dft_magnitude operators and 0.1 otherwise.
    """

    source: Literal["synthesize", "inline", "file"] = "synthesize"
    noise_sigma: Optional[float] = Field(None, gt=0.0)
    noise_seed: int = 0
    ground_truth: Optional[List[float]] = None
    values: Optional[List[float]] = None
    path: Optional[Path] = None

    @model_validator(mode="after")
    def validate_source(self):
        if self.source == "inline" and self.values is None:
            raise ValueError("source 'inline' requires 'values'")
        if self.source == "file" and self.path is None:
            raise ValueError("source 'file' requires 'path'")
        if self.source == "synthesize" and (self.values is not None or self.path is not None):
            raise ValueError("source 'synthesize' does not accept 'values' or 'path'")
        return self

    def load_values(self) -> Optional[np.ndarray]:
        """Observed y for inline/file sources; None when synthesized."""
        if self.source == "inline":
            return np.asarray(self.values, dtype=np.float64)
        if self.source == "file":
            if not self.path.exists():
                raise ConfigError(f"measurement file not found: {self.path}", keys=("measurement.path",))
            if self.path.suffix.lower() == ".json":
                data = json.loads(self.path.read_text(encoding="utf-8"))
                if isinstance(data, dict):
                    data = data.get("values")
                return np.asarray(data, dtype=np.float64).ravel()
            delimiter = "," if self.path.suffix.lower() == ".csv" else None
            return np.loadtxt(self.path, delimiter=delimiter, ndmin=1).ravel()
        return None


class MetricsSpec(_Strict):
    psnr: bool = True
    diversity: bool = True
    cosine: bool = True
    diversity_k: Optional[int] = Field(None, ge=2)

    def toggles(self) -> Tuple[str, ...]:
        return tuple(name for name in ("psnr", "diversity", "cosine") if getattr(self, name))


class ExperimentConfig(_Strict):
    """Full description of a ``sample`` run."""

    name: str = "run"
    map: MapSpec
    operator: OperatorSpec
    measurement: MeasurementSpec = Field(default_factory=MeasurementSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    chains: int = Field(1, ge=1)
    output_dir: Optional[Path] = None
    image_shape: Optional[Tuple[int, int]] = None
    write_images: bool = True
    metrics: MetricsSpec = Field(default_factory=MetricsSpec)

    @model_validator(mode="after")
    def resolve_noise_sigma(self):
        if self.measurement.noise_sigma is None:
            sigma = default_noise_sigma(self.operator.kind)
            self.measurement = self.measurement.model_copy(update={"noise_sigma": sigma})
        return self

    def build_map(self) -> GenerativeMap:
        return map_from_spec(self.map.model_dump(exclude_none=True))

    def build_operator(self) -> ForwardOperator:
        return operator_from_spec(self.operator.model_dump(exclude_none=True))

    def run_dir(self) -> Path:
        """Directory receiving every output of the run."""
        if self.output_dir is not None:
            return self.output_dir
        return get_settings().OUTPUT_ROOT / self.name

    def check_consistency(self) -> Tuple[GenerativeMap, ForwardOperator, Optional[np.ndarray]]:
        """
        Build the map and operator and check that all dimensions agree.

        Returns:
            (map, operator, observed y or None when synthesized)

        Raises:
            ConfigError: naming the inconsistent keys
        """
        try:
            gen_map = self.build_map()
        except ContractViolationError as e:
            raise ConfigError(f"invalid map: {e}", keys=("map",)) from e
        try:
            op = self.build_operator()
        except ContractViolationError as e:
            raise ConfigError(f"invalid operator: {e}", keys=("operator",)) from e

        if op.in_dim != gen_map.dim:
            raise ConfigError(
                f"'operator' input dimension ({op.in_dim}) does not match 'map.dim' ({gen_map.dim})",
                keys=("operator.in_dim", "map.dim"),
            )
        y = self.measurement.load_values()
        if y is not None and y.size != op.out_dim:
            raise ConfigError(
                f"'measurement.values' has length {y.size} but 'operator' out_dim is {op.out_dim}",
                keys=("measurement.values", "operator.out_dim"),
            )
        gt = self.measurement.ground_truth
        if gt is not None and len(gt) != gen_map.dim:
            raise ConfigError(
                f"'measurement.ground_truth' has length {len(gt)} but 'map.dim' is {gen_map.dim}",
                keys=("measurement.ground_truth", "map.dim"),
            )
        if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != gen_map.dim:
            raise ConfigError(
                f"'image_shape' {tuple(self.image_shape)} has {self.image_shape[0] * self.image_shape[1]} "
                f"pixels but 'map.dim' is {gen_map.dim}",
                keys=("image_shape", "map.dim"),
            )
        return gen_map, op, y


def _model_of(annotation: Any) -> Union[type, Dict[str, type], None]:
    """Model class behind a field annotation, or a kind->model table for tagged unions."""
    origin = typing.get_origin(annotation)
    if origin is Annotated:
        return _model_of(typing.get_args(annotation)[0])
    if origin in (list, List, tuple, Tuple):
        args = typing.get_args(annotation)
        return _model_of(args[0]) if args else None
    if origin is Union:
        models = [a for a in typing.get_args(annotation) if isinstance(a, type) and issubclass(a, BaseModel)]
        if len(models) == 1:
            return models[0]
        if models:
            return {m.model_fields["kind"].default: m for m in models}
        return None
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    return None


def allowed_keys(loc: Tuple[Any, ...]) -> List[str]:
    """Field names accepted at the parent of error location ``loc``."""
    target: Any = ExperimentConfig
    for part in loc[:-1]:
        if isinstance(target, dict):
            target = target.get(part)
            continue
        if isinstance(part, int) or target is None:
            continue
        field = target.model_fields.get(part)
        if field is None:
            return []
        target = _model_of(field.annotation)
    if isinstance(target, type):
        return list(target.model_fields)
    return []


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _dotted(loc: Tuple[Any, ...]) -> str:
    return ".".join(str(p) for p in loc)


def _config_error(error: ValidationError, path: Path, text: str) -> ConfigError:
    first = error.errors()[0]
    loc = tuple(first["loc"])
    key = str(loc[-1]) if loc else ""
    line = _line_of(text, key) if key else None
    where = f"{path}:{line}" if line else str(path)
    if first["type"] == "extra_forbidden":
        message = f"{where}: unknown key '{_dotted(loc)}'"
        match = difflib.get_close_matches(key, allowed_keys(loc), n=1, cutoff=0.6)
        if match:
            message += f" (did you mean '{match[0]}'?)"
    else:
        message = f"{where}: invalid value for '{_dotted(loc)}': {first['msg']}"
    extra = len(error.errors()) - 1
    if extra:
        message += f" (+{extra} more error{'s' if extra > 1 else ''})"
    return ConfigError(message, keys=(_dotted(loc),), line=line)


def parse_config(path) -> ExperimentConfig:
    """
    Load and fully validate an experiment JSON file.

    Relative measurement and output paths are resolved against the config's directory.

    Args:
        path: path to the JSON config

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line:column),
            schema violation or inconsistent dimensions
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}", line=e.lineno) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e, path, text) from e

    base = path.parent
    updates = {}
    if cfg.output_dir is not None and not cfg.output_dir.is_absolute():
        updates["output_dir"] = base / cfg.output_dir
    if cfg.measurement.path is not None and not cfg.measurement.path.is_absolute():
        updates["measurement"] = cfg.measurement.model_copy(update={"path": base / cfg.measurement.path})
    if updates:
        cfg = cfg.model_copy(update=updates)

    cfg.check_consistency()
    logger.info(f"Loaded config '{cfg.name}' from {path}")
    return cfg
