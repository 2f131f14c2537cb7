"""
ExperimentService - runs a configured posterior-sampling experiment end to end.

Resolves the measurement (synthesized or loaded), runs the chains on a thread
pool with disjoint random streams, computes metrics over the pooled samples and
writes the run directory:

    config.json             validated config echo
    samples.csv             merged samples of every chain
    samples_chain{i}.csv    per-chain samples
    summary.json            seeds, NFE totals, wall time, metrics, divergence flags
    *.pgm                   posterior mean / last sample per chain and ground truth
                            (only when image_shape is configured)
"""

import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from noisespace.app.config.config import Settings, get_settings
from noisespace.app.config.experiment import ExperimentConfig
from noisespace.app.errors import DivergenceError
from noisespace.app.services.forward_operators import (
    ForwardOperator,
    LikelihoodModel,
    Measurement,
    synthesize_measurement,
)
from noisespace.app.services.generative_maps import GenerativeMap, apply_map
from noisespace.app.services.metrics_service import SampleSet, summarize
from noisespace.app.services.sampler_service import RunReport, run_chain
from noisespace.app.utils.io_utils import write_json, write_pgm, write_samples
from noisespace.app.utils.rng import CounterStream, Purpose

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    """Reports of every chain (ordered by chain index) plus the written summary."""

    reports: List[RunReport]
    summary: Dict[str, Any]
    run_dir: Path
    ground_truth: Optional[np.ndarray] = None
    files: List[Path] = field(default_factory=list)

    @property
    def all_diverged(self) -> bool:
        return all(r.diverged for r in self.reports)

    def __iter__(self) -> Iterator[RunReport]:
        return iter(self.reports)

    def __len__(self) -> int:
        return len(self.reports)


class ExperimentService:
    """
    Orchestrates multi-chain sampling runs.

    Args:
        settings: environment settings (defaults to ``get_settings()``)
    """

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_settings()

    def resolve_measurement(
        self,
        cfg: ExperimentConfig,
        gen_map: GenerativeMap,
        op: ForwardOperator,
        observed: Optional[np.ndarray],
    ) -> Tuple[Measurement, Optional[np.ndarray]]:
        """
        Measurement y and, when synthesized, the ground truth x_true.

        Without an explicit ground truth, x_true = Phi(z_true) with z_true drawn
        from the measurement stream of ``noise_seed``.
        """
        spec = cfg.measurement
        if observed is not None:
            return Measurement(observed, spec.noise_sigma), None
        if spec.ground_truth is not None:
            x_true = np.asarray(spec.ground_truth, dtype=np.float64)
        else:
            z_true = CounterStream(spec.noise_seed, purpose=Purpose.MEASUREMENT).normal(1, gen_map.dim)
            x_true = apply_map(gen_map, z_true)
        return synthesize_measurement(op, x_true, spec.noise_sigma, spec.noise_seed), x_true

    def _run_one(self, gen_map, lik, cfg: ExperimentConfig, index: int) -> RunReport:
        sampler_cfg = cfg.sampler.model_copy(update={"seed": cfg.sampler.seed + index})
        try:
            return run_chain(gen_map, lik, sampler_cfg, chain_index=index)
        except DivergenceError as e:
            logger.warning(f"Chain {index} diverged at step {e.step}; continuing with remaining chains")
            return e.report

    def run_chains(self, gen_map: GenerativeMap, lik: LikelihoodModel, cfg: ExperimentConfig) -> List[RunReport]:
        """Run ``cfg.chains`` chains concurrently; chain i uses seed + i and stream index i."""
        reports: List[Optional[RunReport]] = [None] * cfg.chains
        workers = max(1, min(self.settings.MAX_WORKERS, cfg.chains))
        show = self.settings.PROGRESS and sys.stderr.isatty()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(self._run_one, gen_map, lik, cfg, i): i for i in range(cfg.chains)}
            for future in tqdm(as_completed(futures), total=cfg.chains, desc="chains", disable=not show):
                reports[futures[future]] = future.result()
        return reports

    def _write_images(self, cfg: ExperimentConfig, run_dir: Path, reports: List[RunReport],
                      x_true: Optional[np.ndarray]) -> List[Path]:
        height, width = cfg.image_shape
        written = []
        if x_true is not None:
            written.append(write_pgm(x_true, width, height, run_dir / "ground_truth.pgm"))
        for r in reports:
            if not r.samples:
                continue
            arr = r.sample_array
            written.append(write_pgm(arr.mean(axis=0), width, height, run_dir / f"mean_chain{r.chain_index}.pgm"))
            written.append(write_pgm(arr[-1], width, height, run_dir / f"last_chain{r.chain_index}.pgm"))
        return written

    def compute_metrics(self, cfg: ExperimentConfig, reports: List[RunReport],
                        x_true: Optional[np.ndarray]) -> Dict[str, Any]:
        """Enabled metrics over the samples pooled from all chains."""
        pooled = [r.sample_array for r in reports if r.samples]
        if not pooled:
            return {"n_samples": 0}
        sample_set = SampleSet(np.vstack(pooled), reference=x_true)
        return summarize(sample_set, cfg.metrics.toggles(), k=cfg.metrics.diversity_k, seed=cfg.sampler.seed)

    def build_summary(self, cfg: ExperimentConfig, reports: List[RunReport], metrics: Dict[str, Any],
                      wall_time: float) -> Dict[str, Any]:
        nfe_total = sum(r.nfe_total for r in reports)
        n_samples = sum(len(r.samples) for r in reports)
        return {
            "config": cfg.model_dump(mode="json"),
            "seeds": [r.seed for r in reports],
            "nfe_total": nfe_total,
            "nfe_per_sample": nfe_total / n_samples if n_samples else math.inf,
            "nfe_per_eval": reports[0].nfe_per_eval,
            "n_samples": n_samples,
            "wall_time_seconds": wall_time,
            "metrics": metrics,
            "diverged": [r.diverged for r in reports],
            "chains": [
                {
                    "chain_index": r.chain_index,
                    "seed": r.seed,
                    "n_samples": len(r.samples),
                    "nfe_total": r.nfe_total,
                    "nfe_per_sample": r.nfe_per_sample,
                    "diverged": r.diverged,
                    "divergence_step": r.divergence_step,
                    "final_warm_start_loss": r.warm_start_loss[-1] if r.warm_start_loss else None,
                    "wall_time_seconds": r.wall_time_seconds,
                }
                for r in reports
            ],
        }

    def run(self, cfg: ExperimentConfig) -> ExperimentResult:
        """
        Execute the experiment described by ``cfg`` and write its outputs.

        Divergent chains are recorded in the summary; the remaining chains still run.
        """
        start = time.perf_counter()
        gen_map, op, observed = cfg.check_consistency()
        measurement, x_true = self.resolve_measurement(cfg, gen_map, op, observed)
        lik = LikelihoodModel(op, measurement)
        run_dir = cfg.run_dir()
        logger.info(
            f"Starting run '{cfg.name}': {cfg.chains} chain(s), map={gen_map!r}, operator={op!r}, "
            f"output={run_dir}"
        )

        reports = self.run_chains(gen_map, lik, cfg)
        metrics = self.compute_metrics(cfg, reports, x_true)
        summary = self.build_summary(cfg, reports, metrics, time.perf_counter() - start)

        files = [write_json(cfg.model_dump(mode="json"), run_dir / "config.json")]
        files.append(write_samples(reports, run_dir / "samples.csv"))
        for r in reports:
            files.append(write_samples(r, run_dir / f"samples_chain{r.chain_index}.csv"))
        if cfg.image_shape is not None and cfg.write_images:
            files.extend(self._write_images(cfg, run_dir, reports, x_true))
        files.append(write_json(summary, run_dir / "summary.json"))

        diverged = sum(r.diverged for r in reports)
        logger.info(
            f"Run '{cfg.name}' finished: nfe_total={summary['nfe_total']}, "
            f"{summary['n_samples']} samples, {diverged} diverged chain(s), "
            f"{summary['wall_time_seconds']:.2f}s"
        )
        return ExperimentResult(reports=reports, summary=summary, run_dir=run_dir,
                                ground_truth=x_true, files=files)


def run_experiment(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> ExperimentResult:
    """Run ``cfg`` with a fresh ExperimentService."""
    return ExperimentService(settings).run(cfg)
