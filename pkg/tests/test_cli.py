"""Unit tests for the command-line front end."""

import io
import json
import os
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import mock

import numpy as np
import pandas as pd

from moelab.cli import (
    EXIT_CONFIG,
    EXIT_CONSTRUCTION,
    EXIT_DIVERGENCE,
    EXIT_OK,
    build_parser,
    main,
)


def run_cli(argv: list[str]) -> tuple[int, str]:
    """Runs `moe-lab argv` and returns the exit code and the printed text."""
    output = io.StringIO()
    with redirect_stdout(output):
        code = main(argv)
    return code, output.getvalue()


def read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as file:
        return json.load(file)


class TestParser(unittest.TestCase):
    """Test cases for the argument parser."""

    def test_flags_default_to_none(self):
        args = build_parser().parse_args(["sweep"])
        self.assertIsNone(args.seed)
        self.assertIsNone(args.quick)
        self.assertEqual(args.experiment, "sweep")

    def test_check_k_destination(self):
        args = build_parser().parse_args(["check", "--k", "3"])
        self.assertEqual(args.check_k, 3)

    def test_unknown_command(self):
        with self.assertRaises(SystemExit):
            with redirect_stdout(io.StringIO()), mock.patch("sys.stderr", io.StringIO()):
                build_parser().parse_args(["train"])


class TestCommands(unittest.TestCase):
    """Test cases for the four commands."""

    def setUp(self):
        self.tmp = TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, data: dict) -> str:
        path = self.out / "config.json"
        with open(path, "w", encoding="utf-8") as file:
            json.dump(data, file)
        return str(path)

    def test_fit(self):
        code, text = run_cli(["fit", "-q", "--family", "linear", "--n", "300",
                              "--seed", "7", "--out", str(self.out)])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("D3 = ", text)
        for name in ("measure.json", "trace.csv", "summary.json"):
            self.assertTrue((self.out / name).exists(), name)
        summary = read_json(self.out / "summary.json")
        self.assertEqual(summary["config"]["seed"], 7)
        trace = pd.read_csv(self.out / "trace.csv")
        self.assertEqual(len(trace), 201)
        self.assertEqual(list(trace["stage"].iloc[-2:]), ["sgd", "polish"])
        self.assertEqual(trace["epoch"].iloc[-1], 200)

    def test_fit_under_specified(self):
        code, _ = run_cli(["fit", "-q", "--family", "linear", "--n", "200", "--k", "1",
                           "--out", str(self.out)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(read_json(self.out / "measure.json")["atoms"]), 1)

    def test_check_identifiability(self):
        code, text = run_cli(["check", "-q", "--family", "ridge-sigmoid",
                              "--mode", "identifiability", "--out", str(self.out)])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("dependent", text)
        verdict = read_json(self.out / "verdict.json")
        self.assertFalse(verdict["independent"])
        self.assertEqual(verdict["regime"], 1)
        self.assertEqual(verdict["equation"], "∂h/∂a [atom 1] = x·∂h/∂b [atom 1]")

    def test_check_independence(self):
        code, _ = run_cli(["check", "-q", "--activation", "poly2", "--mode", "independence",
                           "--out", str(self.out)])
        self.assertEqual(code, EXIT_OK)
        self.assertFalse(read_json(self.out / "verdict.json")["independent"])

    def test_adversarial_linear(self):
        code, _ = run_cli(["adversarial", "-q", "--family", "linear", "--r", "2",
                           "--out", str(self.out)])
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(self.out / "ratio.csv")
        self.assertEqual(list(frame["n"]), [10, 100, 1000])
        self.assertTrue((frame["ratio"].diff().dropna() < 0).all())
        self.assertTrue(read_json(self.out / "summary.json")["strictly_decreasing"])
        self.assertTrue((self.out / "ratio.svg").exists())

    def test_adversarial_ridge(self):
        with self.assertLogs("moelab.cli", level="ERROR") as logs:
            code, _ = run_cli(["adversarial", "-q", "--family", "ridge-sigmoid", "--r", "3",
                               "--b1", "0", "--n-grid", "10", "100", "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONSTRUCTION)
        self.assertIn("does not decrease", logs.output[-1])
        summary = read_json(self.out / "summary.json")
        self.assertEqual(summary["coefficient_convention"], "n^alpha")
        np.testing.assert_allclose(summary["roots"], [20.0, 200.0], rtol=1e-9)
        np.testing.assert_allclose(summary["offsets"], [2.0, 2.0], rtol=1e-9)
        self.assertFalse(summary["strictly_decreasing"])
        self.assertTrue((self.out / "ratio.csv").exists())

    def test_adversarial_ridge_out_of_range(self):
        code, _ = run_cli(["adversarial", "-q", "--family", "ridge-sigmoid", "--r", "3",
                           "--b1", "0", "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONSTRUCTION)

    def test_adversarial_without_root(self):
        code, _ = run_cli(["adversarial", "-q", "--family", "ridge-sigmoid", "--r", "3",
                           "--b1", "2.0", "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONSTRUCTION)

    def test_adversarial_unsupported_family(self):
        code, _ = run_cli(["adversarial", "-q", "--family", "polynomial-2",
                           "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONFIG)

    def test_malformed_config(self):
        path = self.write_config({"fit": {"x": 1}})
        with self.assertLogs("moelab.cli", level="ERROR") as logs:
            code, _ = run_cli(["sweep", "-q", "--config", path])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("[fit.x]", logs.output[0])

    def test_negative_seed(self):
        with self.assertLogs("moelab.cli", level="ERROR") as logs:
            code, _ = run_cli(["fit", "-q", "--seed", "-1", "--out", str(self.out)])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("[seed]", logs.output[0])

    def test_missing_config(self):
        code, _ = run_cli(["sweep", "-q", "--config", str(self.out / "missing.json")])
        self.assertEqual(code, EXIT_CONFIG)

    @mock.patch.dict(os.environ, {"MOE_LAB_THREADS": "1"})
    def test_sweep(self):
        path = self.write_config({"family": "linear", "n_grid": [200, 400],
                                  "replications": 2, "out": str(self.out / "sweep"),
                                  "fit": {"epochs": 3, "batch_size": 64}})
        code, text = run_cli(["sweep", "-q", "--config", path])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("slope", text)
        for name in ("sweep.csv", "summary.json", "loglog.svg"):
            self.assertTrue((self.out / "sweep" / name).exists(), name)
        summary = read_json(self.out / "sweep" / "summary.json")
        self.assertEqual(summary["run_config"]["fit"]["epochs"], 3)

    @mock.patch.dict(os.environ, {"MOE_LAB_THREADS": "1"})
    def test_sweep_divergence(self):
        path = self.write_config({"family": "linear", "n_grid": [200], "replications": 2,
                                  "fit": {"learning_rate": 1000.0, "batch_size": 200,
                                          "epochs": 10},
                                  "out": str(self.out)})
        code, _ = run_cli(["sweep", "-q", "--config", path])
        self.assertEqual(code, EXIT_DIVERGENCE)


if __name__ == "__main__":
    unittest.main()
