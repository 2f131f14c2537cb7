"""
Test experiment config parsing, validation messages and path resolution.
"""

import json
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

from noisespace.app.config.experiment import ExperimentConfig, allowed_keys, parse_config
from noisespace.app.errors import ConfigError
from noisespace.app.services.generative_maps import AffineMap


def _minimal():
    return {
        "map": {"kind": "identity", "dim": 4},
        "operator": {"kind": "avgpool", "in_dim": 4, "factor": 2},
    }


class ConfigTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = TemporaryDirectory()
        self.dir = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, data, name="config.json"):
        path = self.dir / name
        text = data if isinstance(data, str) else json.dumps(data, indent=2)
        path.write_text(text)
        return path


class TestParseConfig(ConfigTestCase):
    """Loading valid configs"""

    def test_minimal_config_uses_defaults(self):
        cfg = parse_config(self.write(_minimal()))
        self.assertEqual(cfg.name, "run")
        self.assertEqual(cfg.chains, 1)
        self.assertEqual(cfg.sampler.tau, 1e-3)
        self.assertEqual(cfg.sampler.scheme, "em")
        self.assertEqual(cfg.measurement.source, "synthesize")
        self.assertEqual(cfg.metrics.toggles(), ("psnr", "diversity", "cosine"))
        self.assertIsInstance(cfg.build_map(), AffineMap)

    def test_scheme_is_case_insensitive(self):
        data = _minimal()
        data["sampler"] = {"scheme": "EI"}
        self.assertEqual(parse_config(self.write(data)).sampler.scheme, "ei")

    def test_relative_paths_resolve_against_config_dir(self):
        (self.dir / "y.json").write_text("[0.5]")
        data = _minimal()
        data["measurement"] = {"source": "file", "path": "y.json"}
        data["output_dir"] = "out"
        cfg = parse_config(self.write(data))
        self.assertEqual(cfg.output_dir, self.dir / "out")
        self.assertEqual(cfg.measurement.path, self.dir / "y.json")
        self.assertEqual(cfg.run_dir(), self.dir / "out")
        self.assertEqual(list(cfg.measurement.load_values()), [0.5])

    def test_text_measurement_file(self):
        (self.dir / "y.txt").write_text("0.25\n")
        data = _minimal()
        data["measurement"] = {"source": "file", "path": "y.txt", "noise_sigma": 0.2}
        cfg = parse_config(self.write(data))
        self.assertEqual(list(cfg.measurement.load_values()), [0.25])

    def test_noise_sigma_defaults_follow_operator(self):
        """Phase retrieval defaults to sigma 0.05, every other operator to 0.1"""
        self.assertEqual(parse_config(self.write(_minimal())).measurement.noise_sigma, 0.1)

        data = _minimal()
        data["operator"] = {"kind": "dft_magnitude", "shape": [2, 2]}
        cfg = parse_config(self.write(data))
        self.assertEqual(cfg.measurement.noise_sigma, 0.05)
        self.assertEqual(cfg.model_dump()["measurement"]["noise_sigma"], 0.05)

        data["measurement"] = {"noise_sigma": 0.2}
        self.assertEqual(parse_config(self.write(data)).measurement.noise_sigma, 0.2)


class TestConfigErrors(ConfigTestCase):
    """Errors name the offending keys"""

    def test_measurement_length_mismatch(self):
        data = _minimal()
        data["measurement"] = {"source": "inline", "values": [0.1, 0.2]}
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(data))
        self.assertIn("measurement.values", ctx.exception.keys)
        self.assertIn("operator.out_dim", ctx.exception.keys)
        self.assertIn("measurement.values", str(ctx.exception))

    def test_operator_map_dimension_mismatch(self):
        data = _minimal()
        data["map"]["dim"] = 9
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(data))
        self.assertEqual(ctx.exception.keys, ("operator.in_dim", "map.dim"))

    def test_unknown_key_suggests_closest(self):
        data = _minimal()
        data["sampler"] = {"taus": 0.01}
        path = self.write(data)
        with self.assertRaises(ConfigError) as ctx:
            parse_config(path)
        message = str(ctx.exception)
        self.assertIn("sampler.taus", message)
        self.assertIn("did you mean 'tau'?", message)
        self.assertEqual(ctx.exception.line, path.read_text().splitlines().index('    "taus": 0.01') + 1)

    def test_json_syntax_error_reports_line_and_column(self):
        path = self.write('{\n  "map": {"kind": "identity", "dim": 4},\n  "operator": \n}\n')
        with self.assertRaises(ConfigError) as ctx:
            parse_config(path)
        self.assertIn(f"{path}:4:1", str(ctx.exception))
        self.assertEqual(ctx.exception.line, 4)

    def test_image_shape_mismatch(self):
        data = _minimal()
        data["image_shape"] = [3, 3]
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(data))
        self.assertEqual(ctx.exception.keys, ("image_shape", "map.dim"))

    def test_burn_in_must_be_below_steps(self):
        data = _minimal()
        data["sampler"] = {"n_steps": 100, "burn_in": 100}
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(data))
        self.assertIn("sampler", str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            parse_config(self.dir / "absent.json")

    def test_top_level_must_be_object(self):
        with self.assertRaises(ConfigError):
            parse_config(self.write("[1, 2, 3]"))

    def test_allowed_keys_follow_tagged_unions(self):
        self.assertIn("tau", allowed_keys(("sampler", "taus")))
        self.assertIn("chains", allowed_keys(("chainz",)))


def test_two_step_map_config():
    cfg = ExperimentConfig.model_validate({
        "map": {"kind": "two_step", "inner": {"kind": "mlp", "dim": 3, "hidden": [4]}, "mix": 0.5, "seed": 1},
        "operator": {"kind": "identity", "dim": 3},
    })
    gen_map, op, y = cfg.check_consistency()
    assert gen_map.nfe_per_eval == 2
    assert op.out_dim == 3
    assert y is None


if __name__ == "__main__":
    unittest.main()
