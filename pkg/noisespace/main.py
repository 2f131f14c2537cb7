"""
Command-line entry point.

    python -m noisespace.main sample <config.json>
    python -m noisespace.main verify <suite>
    python -m noisespace.main metrics <samples.csv> [--reference <file>]
    python -m noisespace.main nfe --eta 1 --warm 800 --steps 1 10 100

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 all chains diverged.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from noisespace.app.config.config import get_settings
from noisespace.app.config.experiment import parse_config
from noisespace.app.errors import ConfigError, ContractViolationError, NoiseSpaceError
from noisespace.app.services.experiment_service import run_experiment
from noisespace.app.services.metrics_service import SampleSet, summarize
from noisespace.app.services.sampler_service import nfe_curve
from noisespace.app.services.verification_service import SUITES, verify
from noisespace.app.utils.io_utils import read_samples, sample_matrix

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_ALL_DIVERGED = 3


def _load_reference(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data.get("values")
        return np.asarray(data, dtype=np.float64).ravel()
    delimiter = "," if path.suffix.lower() == ".csv" else None
    return np.loadtxt(path, delimiter=delimiter, ndmin=1).ravel()


def cmd_sample(args) -> int:
    cfg = parse_config(args.config)
    result = run_experiment(cfg)
    print(f"✓ Run written to {result.run_dir}")
    print(f"  nfe_total={result.summary['nfe_total']}  samples={result.summary['n_samples']}")
    if result.all_diverged:
        print("✗ All chains diverged")
        return EXIT_ALL_DIVERGED
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_metrics(args) -> int:
    df = read_samples(args.samples)
    reference = _load_reference(Path(args.reference)) if args.reference else None
    sample_set = SampleSet(sample_matrix(df), reference=reference)
    values = summarize(sample_set, k=args.k, seed=args.seed)
    print(json.dumps(values, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def cmd_nfe(args) -> int:
    curve = nfe_curve(args.eta, args.warm, args.steps)
    print("N,nfe_total,nfe_per_sample")
    for n, per_sample in zip(args.steps, curve):
        print(f"{n},{args.eta * (args.warm + n)},{per_sample:.17g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisespace",
        description="Posterior sampling in the noise space of a deterministic generative map",
    )
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    sample_parser = subparsers.add_parser("sample", help="Run the experiment described by a JSON config")
    sample_parser.add_argument("config", help="Path to the experiment config (JSON)")
    sample_parser.set_defaults(handler=cmd_sample)

    verify_parser = subparsers.add_parser("verify", help="Run a numerical verification suite")
    verify_parser.add_argument("suite", choices=[*SUITES, "all"], help="Suite name")
    verify_parser.set_defaults(handler=cmd_verify)

    metrics_parser = subparsers.add_parser("metrics", help="Compute metrics of a samples CSV")
    metrics_parser.add_argument("samples", help="samples.csv written by 'sample'")
    metrics_parser.add_argument("--reference", help="Ground truth (JSON list or text/CSV values)")
    metrics_parser.add_argument("--k", type=int, default=None, help="Number of clusters for the diversity score")
    metrics_parser.add_argument("--seed", type=int, default=0, help="k-means seed")
    metrics_parser.set_defaults(handler=cmd_metrics)

    nfe_parser = subparsers.add_parser("nfe", help="Tabulate amortized NFEs per sample")
    nfe_parser.add_argument("--eta", type=int, required=True, help="Map evaluations per gradient")
    nfe_parser.add_argument("--warm", type=int, required=True, help="Warm-start steps K")
    nfe_parser.add_argument("--steps", type=int, nargs="+", required=True, help="Chain lengths N")
    nfe_parser.set_defaults(handler=cmd_nfe)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(**settings.get_logging_config())

    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return EXIT_USAGE

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolationError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NoiseSpaceError as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
