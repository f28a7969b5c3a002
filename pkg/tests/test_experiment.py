#!/usr/bin/env python3
"""
End-to-end tests for the experiment harness on small configurations
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli.run_experiment import main as cli_main
from cmlrain.diffusion import GaussianDenoiser
from cmlrain.experiment import (ConfigError, Experiment, ExperimentConfig, derive_seed, parse_method,
                                synthesize_topology)
from cmlrain.forward import ConstantLikelihood
from cmlrain.geometry import GridSpec, segment_length_inside
from cmlrain.samplers import SamplerConfig

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SAMPLER_DIR = os.path.join(PROJECT_ROOT, "configs", "samplers")


def gp1d_config(out, **extra):
    raw = {
        "name": "gp1d-test",
        "scenario": "gp1d",
        "params": {"grid_n": 20, "n_intervals": 4, "n_oracle_draws": 200, "n_sw_reference": 50,
                   "n_projections": 16},
        "methods": [{"name": "DPS", "params": {"n_steps": 10}},
                    {"name": "RedDiff", "params": {"n_steps": 20}}],
        "n_samples": 25,
        "seed": 3,
        "output_dir": str(out),
        "sampler_config_dir": SAMPLER_DIR,
    }
    raw.update(extra)
    return raw


def cml_config(out, **extra):
    raw = {
        "name": "cml-test",
        "scenario": "cml-synthetic",
        "params": {"n_fields": 2},
        "grid": {"height": 8, "width": 10},
        "topology": {"source": "random", "n_links": 12, "length_range": [2.0, 6.0]},
        "prior": {"source": "gaussian-analytic", "mean": 1.0, "variance": 1.0, "lengthscale": 3.0},
        "methods": [{"name": "DPS", "params": {"n_steps": 8}},
                    {"name": "TDS", "params": {"n_steps": 8, "n_particles": 2}},
                    "IDW",
                    {"name": "GMZ", "params": {"n_iters": 3}},
                    "OK",
                    "MGPS"],
        "n_samples": 3,
        "seed": 7,
        "output_dir": str(out),
        "sampler_config_dir": SAMPLER_DIR,
    }
    raw.update(extra)
    return raw


class ExperimentTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()


class TestGp1dPipeline(ExperimentTestCase):
    """simulate -> oracle -> reconstruct -> evaluate on the 1-D benchmark"""

    def test_full_run(self):
        out = self.dir / "gp"
        exp = Experiment(ExperimentConfig.from_dict(gp1d_config(out)))
        exp.simulate()
        self.assertTrue((out / "intervals.csv").exists())
        self.assertEqual(len(exp.reference_files()), 1)

        posterior = exp.oracle()
        cov = np.load(out / "oracle" / "cov.npy")
        np.testing.assert_array_equal(cov, cov.T)
        self.assertEqual(np.load(out / "oracle" / "draws.npy").shape, (200, 20))
        self.assertEqual(posterior.mean.shape, (20,))

        outcomes = exp.reconstruct()
        self.assertTrue(all(o.ok for o in outcomes), [o.error for o in outcomes])
        self.assertEqual(np.load(out / "ensembles" / "DPS" / "field_000.npy").shape, (25, 20))

        summary = exp.evaluate()
        self.assertEqual(set(summary.index), {"DPS", "RedDiff"})
        self.assertIn("sliced_wasserstein", summary.columns)
        self.assertIn("q95_l2_ci95", summary.columns)
        self.assertTrue((out / "plots" / "oracle.csv").exists())
        self.assertTrue((out / "plots" / "DPS.csv").exists())

        manifest = json.loads((out / "manifest.json").read_text())
        self.assertIn("ensembles/DPS/field_000.npy", manifest["files"])
        self.assertNotIn("manifest.json", manifest["files"])
        self.assertEqual(manifest["seeds"]["DPS"], [derive_seed(3, 0, "DPS")])

    def test_oracle_rejects_cml(self):
        exp = Experiment(ExperimentConfig.from_dict(cml_config(self.dir / "cml")))
        with self.assertRaises(ConfigError):
            exp.oracle()


class TestCmlPipeline(ExperimentTestCase):
    """simulate -> reconstruct -> evaluate on a small synthetic network"""

    def test_full_run_isolates_failures(self):
        out = self.dir / "cml"
        exp = Experiment(ExperimentConfig.from_dict(cml_config(out)))
        audit = exp.simulate()
        self.assertTrue(audit["simulate"]["sigma_within_bound"])
        topo = pd.read_csv(out / "topology.csv")
        self.assertEqual(len(topo), 12)
        self.assertIn("sigma", topo.columns)

        outcomes = {o.name: o for o in exp.reconstruct()}
        self.assertFalse(outcomes["MGPS"].ok)
        self.assertEqual(outcomes["MGPS"].error_type, "ExternalAlgorithmError")
        for name in ("DPS", "TDS", "IDW", "GMZ", "OK"):
            self.assertTrue(outcomes[name].ok, outcomes[name].error)
        self.assertEqual(np.load(out / "ensembles" / "TDS" / "field_001.npy").shape, (3, 8, 10))
        self.assertTrue((out / "recon" / "OK" / "field_000_variance.npy").exists())

        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["failures"]["MGPS"]["type"], "ExternalAlgorithmError")

        summary = exp.evaluate()
        self.assertEqual(set(summary.index), {"DPS", "TDS", "IDW", "GMZ", "OK"})
        self.assertTrue((summary["n_fields"] == 2).all())
        self.assertTrue((out / "plots" / "reference" / "field_001.csv").exists())
        report = json.loads((out / "metrics.json").read_text())
        self.assertIn("synthetic", report["note"])

    def test_parallel_methods_match_serial(self):
        methods = [{"name": "DPS", "params": {"n_steps": 6}}, "IDW", {"name": "GMZ", "params": {"n_iters": 2}}]
        hashes = []
        for parallel in (False, True):
            out = self.dir / f"run_{parallel}"
            exp = Experiment(ExperimentConfig.from_dict(cml_config(out, methods=methods)), parallel_methods=parallel)
            exp.simulate()
            exp.reconstruct()
            files = json.loads((out / "manifest.json").read_text())["files"]
            hashes.append({k: v for k, v in files.items() if k.startswith(("ensembles/", "recon/", "fields/"))})
        self.assertTrue(any(k.startswith("ensembles/DPS/") for k in hashes[0]))
        self.assertEqual(hashes[0], hashes[1])

    def test_baselines_only_and_linear_operator(self):
        out = self.dir / "lin"
        raw = cml_config(out, methods=["IDW", "kriging"], assume_linear_operator=True)
        exp = Experiment(ExperimentConfig.from_dict(raw))
        exp.simulate()
        outcomes = exp.reconstruct()
        self.assertEqual([o.name for o in outcomes], ["IDW", "OK"])
        self.assertTrue(all(o.ok for o in outcomes))

    def test_heteroscedastic_no_worse_than_isotropic(self):
        """Length-dependent noise never exceeds the matched isotropic sigma, so errors do not grow"""
        rmse = {}
        for kind in ("isotropic", "heteroscedastic"):
            out = self.dir / kind
            raw = cml_config(out, methods=["IDW", {"name": "GMZ", "params": {"n_iters": 3}}],
                             noise={"kind": kind, "sigma": 0.5}, params={"n_fields": 8})
            exp = Experiment(ExperimentConfig.from_dict(raw))
            exp.simulate()
            exp.reconstruct()
            rmse[kind] = exp.evaluate()["rmse"]
        for method in ("IDW", "GMZ"):
            self.assertLessEqual(rmse["heteroscedastic"][method], rmse["isotropic"][method] + 1e-9, method)


    def test_evaluate_rejects_misaligned_outputs(self):
        out = self.dir / "mis"
        exp = Experiment(ExperimentConfig.from_dict(cml_config(out, methods=["IDW"])))
        exp.simulate()
        exp.reconstruct()
        (out / "recon" / "IDW" / "field_001.rfld").unlink()
        with self.assertRaises(ValueError):
            exp.evaluate()

    def test_em_fit(self):
        out = self.dir / "em"
        raw = cml_config(out, methods=["IDW"], grid={"height": 6, "width": 6},
                         prior={"source": "censored-gp", "mu": 0.3, "lengthscales": [2.0, 2.0], "variance": 1.0},
                         params={"n_fields": 3, "em": {"beta_grid": [1.0], "em_iters": 1, "gibbs_sweeps": 4}})
        exp = Experiment(ExperimentConfig.from_dict(raw))
        exp.simulate()
        params, report = exp.em_fit()
        self.assertEqual(report.selected_beta, 1.0)
        saved = json.loads((out / "em_fit.json").read_text())
        self.assertEqual(saved["n_fields"], 3)
        self.assertAlmostEqual(saved["params"]["mu"], params.mu)


class TestRuntimeCap(unittest.TestCase):

    def test_tds_particles_are_reduced_first(self):
        config = ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["TDS"], "runtime_cap_seconds": 1e-9})
        exp = Experiment(config)
        cfg = SamplerConfig("TDS", n_steps=8, n_particles=4)
        den = GaussianDenoiser(np.zeros(3), np.eye(3))
        with self.assertLogs("cmlrain.experiment", level="WARNING"):
            reduced, reductions = exp.fit_runtime_cap(cfg, den, ConstantLikelihood(3))
        self.assertEqual([r["parameter"] for r in reductions[:2]], ["n_particles", "n_particles"])
        self.assertEqual(reductions[2]["parameter"], "n_steps")
        self.assertEqual((reduced.n_particles, reduced.n_steps), (1, 1))


class TestConfig(ExperimentTestCase):
    """Test cases for configuration parsing and topology synthesis"""

    def test_defaults(self):
        config = ExperimentConfig.from_dict({"scenario": "cml-synthetic", "methods": ["IDW"]})
        self.assertEqual(config.grid, {"height": 36, "width": 48})
        self.assertEqual(config.topology["source"], "random")
        self.assertEqual(config.schedule["sigma_max"], 80.0)
        self.assertEqual(config.task, "cml")
        gp = ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["DPS"]})
        self.assertEqual(gp.params["lengthscale"], 0.6)
        self.assertEqual(gp.schedule["sigma_max"], 100.0)
        self.assertEqual(gp.n_samples, 500)

    def test_errors(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "radar", "methods": ["IDW"]})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["DPS"], "colour": "red"})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["IDW"]})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["Langevin"]})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "gp1d", "methods": []})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "cml-synthetic", "methods": ["IDW"],
                                        "topology": {"source": "file"}})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_file(self.dir / "missing.yaml")

    def test_parse_method(self):
        self.assertEqual(parse_method("reddiff").name, "RedDiff")
        self.assertEqual(parse_method("Kriging").name, "OK")
        self.assertEqual(parse_method({"name": "gmz", "params": {"n_iters": 2}}).params, {"n_iters": 2})
        self.assertEqual(parse_method("crepe").kind, "external")

    def test_output_dir_resolution(self):
        config = ExperimentConfig.from_dict({"scenario": "gp1d", "methods": ["DPS"], "name": "abc"})
        old = os.environ.get("CMLRAIN_OUTPUT_ROOT")
        os.environ["CMLRAIN_OUTPUT_ROOT"] = str(self.dir)
        try:
            self.assertEqual(config.resolve_output_dir(), self.dir / "abc")
            self.assertEqual(config.with_overrides(output_dir="x").resolve_output_dir(), Path("x"))
        finally:
            if old is None:
                os.environ.pop("CMLRAIN_OUTPUT_ROOT")
            else:
                os.environ["CMLRAIN_OUTPUT_ROOT"] = old

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 0, "DPS"), derive_seed(1, 0, "DPS"))
        self.assertNotEqual(derive_seed(1, 0, "DPS"), derive_seed(1, 0, "TDS"))
        self.assertNotEqual(derive_seed(1, 0, "DPS"), derive_seed(1, 1, "DPS"))

    def test_ablation_topologies(self):
        grid = GridSpec(20, 20)
        few = synthesize_topology("few-long", grid, 0)
        self.assertEqual(len(few), 25)
        for seg in few.segments:
            self.assertGreaterEqual(segment_length_inside(grid, seg), 0.6 * grid.diagonal())
        short = synthesize_topology("many-short", grid, 0)
        self.assertEqual(len(short), 100)
        np.testing.assert_array_equal(short.b, 1.0)
        for seg in short.segments:
            self.assertAlmostEqual(segment_length_inside(grid, seg), seg.length)
            self.assertTrue(2.0 - 1e-9 <= seg.length <= 4.0 + 1e-9)
        a = synthesize_topology("random", grid, 5, n_links=10)
        b = synthesize_topology("random", grid, 5, n_links=10)
        self.assertEqual(a.segments, b.segments)


class TestCommandLine(ExperimentTestCase):

    def test_simulate_and_reconstruct(self):
        cfg_path = self.dir / "exp.yaml"
        out = self.dir / "cli"
        with open(cfg_path, "w") as fh:
            yaml.safe_dump(cml_config(out, methods=["IDW"]), fh)
        self.assertEqual(cli_main(["simulate", "--config", str(cfg_path), "--seed", "11", "--log-level", "WARNING"]), 0)
        self.assertEqual(cli_main(["reconstruct", "--config", str(cfg_path), "--log-level", "WARNING"]), 0)
        self.assertEqual(cli_main(["evaluate", "--config", str(cfg_path), "--log-level", "WARNING"]), 0)
        self.assertTrue((out / "summary.csv").exists())
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["config"]["seed"], 7)

    def test_config_errors_exit_with_code_two(self):
        self.assertEqual(cli_main(["simulate", "--config", str(self.dir / "nope.yaml")]), 2)


if __name__ == "__main__":
    unittest.main()
