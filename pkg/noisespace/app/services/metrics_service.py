"""
Metrics Service - fidelity and diversity of posterior sample sets.

Features are the raw sample vectors; no pretrained embedding networks are used.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from noisespace.app.errors import ContractViolationError, DegenerateSampleSetError
from noisespace.app.utils.vectors import as_vector

logger = logging.getLogger(__name__)

# Pixels live in [-1, 1]
DEFAULT_DATA_RANGE = 2.0
MAX_CLUSTERS = 6
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class SampleSet:
    """
    Collection of posterior samples with an optional ground truth.

    Args:
        samples: (n, d) array or sequence of equal-length vectors, n >= 1
        reference: optional ground-truth vector of length d
    """

    samples: np.ndarray
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractViolationError(
                f"sample set must be a non-empty (n, d) collection, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("sample set contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        if self.reference is not None:
            ref = as_vector(self.reference, arr.shape[1], name="reference")
            object.__setattr__(self, "reference", ref)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def psnr(x, ref, data_range: float = DEFAULT_DATA_RANGE) -> float:
    """
    Peak signal-to-noise ratio 10 log10(range^2 / MSE) in dB.

    Returns ``math.inf`` when the vectors are identical.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if x.size != ref.size:
        raise ContractViolationError(f"psnr length mismatch: {x.size} vs {ref.size}")
    if not data_range > 0:
        raise ContractViolationError(f"data range must be positive, got {data_range}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def default_cluster_count(n: int) -> int:
    """k = min(6, floor(n / 2))."""
    return min(MAX_CLUSTERS, n // 2)


def diversity_score(sample_set: SampleSet, k: Optional[int] = None, seed: int = 0) -> float:
    """
    Ratio of mean pairwise inter-centroid distance to mean point-to-centroid distance.

    Samples are clustered with seeded k-means (10 restarts, best inertia kept).

    Args:
        sample_set: samples to score
        k: number of clusters, defaults to ``default_cluster_count(n)``
        seed: k-means seed

    Raises:
        ContractViolationError: fewer than k + 1 samples or k < 2
        DegenerateSampleSetError: no spread among samples
    """
    x = sample_set.samples
    if k is None:
        k = default_cluster_count(sample_set.n)
    if k < 2:
        raise ContractViolationError(f"diversity score needs k >= 2, got {k}")
    if sample_set.n < k + 1:
        raise ContractViolationError(f"need at least k + 1 = {k + 1} samples, got {sample_set.n}")
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < 2:
        raise DegenerateSampleSetError("all samples are identical; intra-cluster distance is zero")
    if distinct < k:
        logger.warning(f"Only {distinct} distinct samples for k={k}; reducing k")
        k = distinct

    km = KMeans(n_clusters=k, n_init=KMEANS_RESTARTS, random_state=seed)
    labels = km.fit_predict(x)
    centroids = km.cluster_centers_

    intra = float(np.mean(np.linalg.norm(x - centroids[labels], axis=1)))
    if intra == 0.0:
        raise DegenerateSampleSetError("intra-cluster distance is zero")
    iu = np.triu_indices(k, 1)
    pair = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)[iu]
    inter = float(np.mean(pair))
    return inter / intra


def avg_pairwise_cosine(sample_set: SampleSet) -> float:
    """Mean cosine similarity over all unordered pairs of samples."""
    x = sample_set.samples
    if sample_set.n < 2:
        raise ContractViolationError(f"need at least 2 samples, got {sample_set.n}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ContractViolationError("cosine similarity undefined for zero-norm samples")
    unit = x / norms[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(sample_set.n, 1)
    return float(np.clip(sim[iu].mean(), -1.0, 1.0))


def summarize(sample_set: SampleSet, toggles: Sequence[str] = ("psnr", "diversity", "cosine"),
              k: Optional[int] = None, seed: int = 0) -> dict:
    """
    Compute enabled metrics, skipping those the set cannot support.

    PSNR is reported for the posterior mean and averaged over individual samples.
    """
    out = {"n_samples": sample_set.n}
    if "psnr" in toggles and sample_set.reference is not None:
        out["psnr_mean_sample"] = psnr(sample_set.mean(), sample_set.reference)
        out["psnr_avg"] = float(np.mean([psnr(s, sample_set.reference) for s in sample_set.samples]))
    if "diversity" in toggles:
        try:
            out["diversity_score"] = diversity_score(sample_set, k=k, seed=seed)
        except (ContractViolationError, DegenerateSampleSetError) as e:
            logger.warning(f"Diversity score skipped: {e}")
            out["diversity_score"] = None
    if "cosine" in toggles:
        try:
            out["avg_pairwise_cosine"] = avg_pairwise_cosine(sample_set)
        except ContractViolationError as e:
            logger.warning(f"Pairwise cosine skipped: {e}")
            out["avg_pairwise_cosine"] = None
    return out
