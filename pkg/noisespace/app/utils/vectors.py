"""
Vector helpers shared by maps, operators and samplers.

NoiseVector, DataVector and Cotangent are all plain 1-D float64 numpy arrays;
the aliases below only document intent at call sites.
"""

import numpy as np

from noisespace.app.errors import ContractViolationError

NoiseVector = np.ndarray
DataVector = np.ndarray
Cotangent = np.ndarray


def as_vector(values, dim: int = None, name: str = "vector") -> np.ndarray:
    """
    Convert ``values`` to a finite 1-D float64 array.

    Args:
        values: sequence or array
        dim: expected length (optional)
        name: label used in error messages

    Returns:
        1-D float64 array

    Raises:
        ContractViolationError: wrong shape, wrong length or non-finite entries
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise ContractViolationError(f"{name} must have length >= 1")
    if dim is not None and arr.size != dim:
        raise ContractViolationError(f"{name} has length {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError(f"{name} contains non-finite entries")
    return arr


def as_matrix(values, shape=None, name: str = "matrix") -> np.ndarray:
    """Convert ``values`` to a finite 2-D float64 array, optionally reshaping a flat row-major list."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        if arr.size != shape[0] * shape[1]:
            raise ContractViolationError(
                f"{name} has {arr.size} entries, expected {shape[0]}x{shape[1]}"
            )
        arr = arr.reshape(shape)
    if arr.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError(f"{name} contains non-finite entries")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Return a read-only copy of ``arr``."""
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def relative_error(estimate: np.ndarray, reference: np.ndarray, floor: float = 1e-300) -> float:
    """||estimate - reference|| / max(||reference||, floor)."""
    diff = np.linalg.norm(np.asarray(estimate) - np.asarray(reference))
    return float(diff / max(np.linalg.norm(reference), floor))
