"""
Tests for output helpers: sample CSVs, PGM images, JSON and atomic writes.
"""

import json

import numpy as np
import pytest

from noisespace.app.errors import ContractViolationError
from noisespace.app.services.sampler_service import RunReport, SamplerConfig
from noisespace.app.utils.io_utils import (
    atomic_write_text,
    pixel_bytes,
    read_samples,
    sample_matrix,
    write_json,
    write_pgm,
    write_samples,
)


def _report(samples, steps, chain_index=0):
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    dim = len(samples[0]) if samples else 2
    return RunReport(
        samples=samples,
        sample_steps=list(steps),
        nfe_total=10,
        nfe_per_sample=10.0 / max(1, len(samples)),
        config=SamplerConfig(n_steps=10, burn_in=0, thinning=1),
        wall_time_seconds=0.0,
        dim=dim,
        chain_index=chain_index,
    )


def test_sample_csv_layout(tmp_path):
    """Header then one row per retained sample."""
    print("Testing sample CSV layout...")

    path = write_samples(_report([[0.5, -1.0]], [10]), tmp_path / "samples.csv")
    lines = path.read_text().splitlines()
    assert lines == ["chain,step,x0_0,x0_1", "0,10,0.5,-1"]

    print("✓ Sample CSV layout test passed")


def test_empty_sample_set_writes_header_only(tmp_path):
    path = write_samples(_report([], []), tmp_path / "empty.csv")
    assert path.read_text() == "chain,step,x0_0,x0_1\n"


def test_csv_values_round_trip_exactly(tmp_path):
    values = [[0.1, 1.0 / 3.0, -2.5e-300], [np.pi, -np.e, 1e17 + 8.0]]
    reports = [_report(values, [1, 2]), _report(values[::-1], [1, 2], chain_index=1)]
    path = write_samples(reports, tmp_path / "merged.csv")

    df = read_samples(path)
    assert list(df["chain"]) == [0, 0, 1, 1]
    assert list(df["step"]) == [1, 2, 1, 2]
    np.testing.assert_array_equal(sample_matrix(df), np.array(values + values[::-1]))


def test_mixed_dimensions_rejected(tmp_path):
    with pytest.raises(ContractViolationError):
        write_samples([_report([[0.0, 1.0]], [1]), _report([[0.0]], [1], chain_index=1)], tmp_path / "x.csv")


def test_read_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_samples(tmp_path / "nope.csv")


def test_pixel_mapping():
    """-1 -> 0, 1 -> 255, 0 -> 128, out of range clamped."""
    np.testing.assert_array_equal(pixel_bytes([-1.0, 1.0, 0.0, 1.5, -3.0]), [0, 255, 128, 255, 0])


def test_pgm_bytes(tmp_path):
    print("\nTesting PGM output...")

    path = write_pgm([-1.0, 1.0, 0.0, 1.5, 0.0, -1.0], 3, 2, tmp_path / "img.pgm")
    data = path.read_bytes()
    header = b"P5\n3 2\n255\n"
    assert data.startswith(b"P5")
    assert data[-6:] == bytes([0, 255, 128, 255, 128, 0])
    assert len(data) == len(header) + 6

    with pytest.raises(ContractViolationError):
        write_pgm([0.0] * 5, 3, 2, tmp_path / "bad.pgm")

    print("✓ PGM output test passed")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_text(tmp_path / "a.txt", "first")
    atomic_write_text(tmp_path / "a.txt", "second")
    assert (tmp_path / "a.txt").read_text() == "second"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.txt"]


def test_json_non_finite_values(tmp_path):
    path = write_json(
        {"b": float("inf"), "a": float("nan"), "c": [np.float64(-np.inf), np.int64(3)], "d": np.array([1.5])},
        tmp_path / "summary.json",
    )
    data = json.loads(path.read_text())
    assert data == {"a": "nan", "b": "inf", "c": ["-inf", 3], "d": [1.5]}
    assert path.read_text().index('"a"') < path.read_text().index('"b"')


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
