"""
Output helpers: atomic file writes, sample CSVs, PGM images and JSON summaries.

Every writer goes through ``atomic_write_bytes`` so an interrupted run never
leaves a partially written file at its final path.
"""

import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Union

import numpy as np
import pandas as pd
from PIL import Image

from noisespace.app.errors import ContractViolationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 17 significant digits round-trip every IEEE double
FLOAT_FORMAT = "%.17g"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write ``data`` to a temporary file next to ``path`` and rename it into place.

    Raises:
        OSError: with the destination path in the message
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"Failed to write {path}: {e}") from e
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def samples_frame(reports: Iterable[Any]) -> pd.DataFrame:
    """
    Build the sample table with columns chain, step, x0_0, ..., x0_{d-1}.

    Args:
        reports: RunReport objects (anything with samples, sample_steps, chain_index, dim)
    """
    reports = list(reports)
    if not reports:
        raise ContractViolationError("need at least one report")
    dim = reports[0].dim
    columns = ["chain", "step"] + [f"x0_{j}" for j in range(dim)]
    frames: List[pd.DataFrame] = []
    for report in reports:
        if report.dim != dim:
            raise ContractViolationError(
                f"chain {report.chain_index} has dimension {report.dim}, expected {dim}"
            )
        values = report.sample_array
        df = pd.DataFrame(values, columns=columns[2:])
        df.insert(0, "step", np.asarray(report.sample_steps, dtype=np.int64))
        df.insert(0, "chain", np.full(len(values), report.chain_index, dtype=np.int64))
        frames.append(df)
    return pd.concat(frames, ignore_index=True)[columns]


def write_samples(reports: Union[Any, Iterable[Any]], path: PathLike) -> Path:
    """
    Write retained samples as CSV with 17 significant digits per value.

    A single report or a collection of reports (merged, in order) is accepted.
    An empty retained set produces a header-only file.
    """
    if hasattr(reports, "samples"):
        reports = [reports]
    df = samples_frame(reports)
    text = df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    out = atomic_write_text(path, text)
    logger.info(f"Wrote {len(df)} samples to {out}")
    return out


def read_samples(path: PathLike) -> pd.DataFrame:
    """Read a sample CSV back with exact float parsing."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Sample file not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


def sample_matrix(df: pd.DataFrame) -> np.ndarray:
    """The x0_* columns of a sample table as an (n, d) array."""
    cols = [c for c in df.columns if c.startswith("x0_")]
    if not cols:
        raise ContractViolationError("sample table has no x0_* columns")
    return df[cols].to_numpy(dtype=np.float64)


def pixel_bytes(image) -> np.ndarray:
    """Map values in [-1, 1] to bytes: floor((v + 1) / 2 * 255 + 0.5), clamped."""
    v = np.asarray(image, dtype=np.float64)
    scaled = np.floor((v + 1.0) / 2.0 * 255.0 + 0.5)
    return np.clip(np.nan_to_num(scaled, nan=0.0), 0, 255).astype(np.uint8)


def write_pgm(image, width: int, height: int, path: PathLike) -> Path:
    """
    Write an 8-bit binary grayscale PGM (P5), rows of length ``width``.

    Raises:
        ContractViolationError: width * height != len(image)
    """
    flat = np.asarray(image, dtype=np.float64).ravel()
    if width < 1 or height < 1 or width * height != flat.size:
        raise ContractViolationError(
            f"image of {flat.size} pixels does not fit {width}x{height}"
        )
    img = Image.fromarray(pixel_bytes(flat).reshape(height, width), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PPM")
    return atomic_write_bytes(path, buf.getvalue())


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(data: dict, path: PathLike) -> Path:
    """Write ``data`` as sorted, indented JSON; non-finite floats become strings."""
    text = json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n"
    return atomic_write_text(path, text)
