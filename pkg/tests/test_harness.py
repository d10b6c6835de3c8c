"""Unit tests for the simulation harness."""

import json
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pandas as pd

from moelab.estimate import FitConfig
from moelab.exceptions import InputError, SweepError
from moelab.harness import (
    FULL_GRID,
    QUICK_GRID,
    STAGE_TAGS,
    Setting,
    SweepConfig,
    SweepReport,
    default_loss,
    derive_seed,
    emit_report,
    fit_loglog_slope,
    generate_dataset,
    l2_rate_sweep,
    run_sweep,
)
from moelab.model import (
    Activation,
    ExpertSpec,
    InputDistribution,
    reference_truth,
    regression_eval,
)


def small_sweep(**kwargs) -> SweepConfig:
    """A sweep that runs in a few seconds on one process."""
    options = {
        "expert": ExpertSpec.linear(),
        "n_grid": (200, 400, 800),
        "replications": 2,
        "loss": "D3",
        "fit": FitConfig(batch_size=64, epochs=3),
        "master_seed": 17,
        "workers": 1,
    }
    options.update(kwargs)
    return SweepConfig(**options)


class TestGenerateDataset(unittest.TestCase):
    """Test cases for the data generation."""

    def setUp(self):
        self.truth = reference_truth(ExpertSpec.ridge(Activation.SIGMOID))

    def test_noiseless(self):
        data = generate_dataset(self.truth, 50, 0.0, seed=3)
        np.testing.assert_array_equal(data.Y, regression_eval(self.truth, data.X))
        self.assertEqual(data.n, 50)

    def test_noise_is_centered(self):
        n = 10_000
        data = generate_dataset(self.truth, n, 1.0, seed=4)
        noise = data.Y - regression_eval(self.truth, data.X)
        self.assertLess(abs(noise.mean()), 4 / np.sqrt(n))
        self.assertAlmostEqual(noise.var(), 1.0, delta=0.1)

    def test_inputs_in_unit_interval(self):
        data = generate_dataset(self.truth, 1000, 1.0, seed=4)
        self.assertTrue(np.all((data.X >= 0) & (data.X <= 1)))

    def test_sample_distribution(self):
        mu = InputDistribution.from_samples([[0.25], [0.75]])
        data = generate_dataset(self.truth, 100, 0.0, mu, seed=1)
        self.assertEqual(set(data.X.ravel()), {0.25, 0.75})

    def test_deterministic(self):
        first = generate_dataset(self.truth, 100, 1.0, seed=5)
        second = generate_dataset(self.truth, 100, 1.0, seed=5)
        np.testing.assert_array_equal(first.X, second.X)
        np.testing.assert_array_equal(first.Y, second.Y)

    def test_invalid_arguments(self):
        with self.assertRaises(InputError):
            generate_dataset(self.truth, 0, 1.0)
        with self.assertRaises(InputError):
            generate_dataset(self.truth, 10, -1.0)


class TestSeedsAndDefaults(unittest.TestCase):
    """Test cases for seed derivation, grids and default losses."""

    def test_seeds_distinct_on_grid(self):
        seeds = {derive_seed(0, n, rep, stage)
                 for n in FULL_GRID for rep in range(20) for stage in STAGE_TAGS}
        self.assertEqual(len(seeds), len(FULL_GRID) * 20 * len(STAGE_TAGS))

    def test_seed_is_stable(self):
        self.assertEqual(derive_seed(3, 1000, 2, "fit"), derive_seed(3, 1000, 2, "fit"))
        self.assertNotEqual(derive_seed(3, 1000, 2, "fit"), derive_seed(4, 1000, 2, "fit"))

    def test_grids(self):
        self.assertEqual(len(FULL_GRID), 20)
        self.assertEqual((FULL_GRID[0], FULL_GRID[-1]), (10_000, 100_000))
        self.assertEqual(len(QUICK_GRID), 10)
        self.assertEqual((QUICK_GRID[0], QUICK_GRID[-1]), (1000, 10_000))

    def test_default_loss(self):
        self.assertEqual(default_loss(ExpertSpec.linear())[0], "D3")
        self.assertEqual(default_loss(ExpertSpec.ridge(Activation.TANH))[0], "D2")
        self.assertEqual(default_loss(
            ExpertSpec.normalized_ridge(Activation.SIGMOID, norm_eps=1.0))[0], "D1")

    def test_invalid_sweep_config(self):
        for kwargs in ({"n_grid": ()}, {"n_grid": (400, 200)}, {"replications": 0},
                       {"metric": "l1"}):
            with self.subTest(**kwargs):
                with self.assertRaises(InputError):
                    small_sweep(**kwargs)


class TestFitLoglogSlope(unittest.TestCase):
    """Test cases for the log-log regression."""

    def test_exact_line(self):
        points = [(n, 2 * n ** -0.5) for n in (10, 100, 1000, 10_000)]
        slope, intercept, r_squared = fit_loglog_slope(points)
        self.assertAlmostEqual(slope, -0.5, delta=1e-12)
        self.assertAlmostEqual(intercept, np.log(2), delta=1e-12)
        self.assertAlmostEqual(r_squared, 1.0, delta=1e-12)

    def test_constant_and_identity(self):
        self.assertAlmostEqual(fit_loglog_slope([(10, 3.0), (100, 3.0)])[0], 0.0, places=12)
        self.assertAlmostEqual(fit_loglog_slope([(10, 10.0), (1000, 1000.0)])[0], 1.0,
                               places=12)

    def test_invalid_points(self):
        for points in ([(10, 1.0)], [(10, 1.0), (10, 2.0)], [(10, 1.0), (100, 0.0)],
                       [(10, 1.0), (100, -1.0)]):
            with self.subTest(points=points):
                with self.assertRaises(InputError):
                    fit_loglog_slope(points)


class TestRunSweep(unittest.TestCase):
    """Test cases for sweeps and their reports."""

    def setUp(self):
        self.report = run_sweep(small_sweep())

    def test_shape(self):
        self.assertEqual(len(self.report.records), 6)
        np.testing.assert_array_equal(self.report.counts, [2, 2, 2])
        self.assertTrue(self.report.slope_defined)
        self.assertEqual(len(self.report.replication_slopes), 2)
        values = [record.value for record in self.report.records]
        self.assertTrue(np.all(np.isfinite(values)) and min(values) >= 0)

    def test_means(self):
        for i, n in enumerate(self.report.n_grid):
            values = [r.value for r in self.report.records if r.n == n]
            with self.subTest(n=n):
                self.assertEqual(self.report.means[i], np.mean(values))

    def test_over_specified(self):
        cfg = small_sweep(setting=Setting.OVER, n_grid=(300,), replications=1)
        self.assertEqual(cfg.k, 3)
        self.assertEqual(len(run_sweep(cfg).records), 1)

    def test_single_point_has_no_slope(self):
        report = run_sweep(small_sweep(n_grid=(1000,), replications=1))
        self.assertEqual(len(report.records), 1)
        self.assertFalse(report.slope_defined)

    def test_deterministic(self):
        second = run_sweep(small_sweep())
        np.testing.assert_array_equal(self.report.means, second.means)

    def test_l2_noiseless_at_truth(self):
        fit = FitConfig(batch_size=64, epochs=2, init_spread=0.0)
        report = l2_rate_sweep(small_sweep(noise_var=0.0, fit=fit))
        self.assertEqual(report.config["metric"], "l2")
        self.assertLess(max(record.value for record in report.records), 1e-10)

    def test_too_many_divergent(self):
        fit = FitConfig(learning_rate=1e3, batch_size=200, epochs=10)
        with self.assertRaises(SweepError):
            run_sweep(small_sweep(fit=fit, n_grid=(200,)))

    def test_emit_report(self):
        with TemporaryDirectory() as tmp:
            paths = emit_report(self.report, tmp)
            for name in ("sweep.csv", "summary.json", "loglog.svg"):
                self.assertTrue((Path(tmp) / name).exists())
            frame = pd.read_csv(paths["csv"])
            self.assertEqual(list(frame.columns), ["n", "rep", "loss", "seed", "diverged"])
            with open(paths["json"], encoding="utf-8") as file:
                summary = json.load(file)

        means = [np.mean(frame.loc[frame["n"] == n, "loss"].to_numpy())
                 for n in self.report.n_grid]
        slope = fit_loglog_slope(zip(self.report.n_grid, means))[0]
        self.assertAlmostEqual(slope, summary["slope"], delta=1e-12)
        self.assertEqual(summary["divergent_total"], 0)
        self.assertEqual(len(summary["per_n"]), 3)

    def test_emit_report_is_byte_identical(self):
        second = run_sweep(small_sweep())
        with TemporaryDirectory() as first_dir, TemporaryDirectory() as second_dir:
            emit_report(self.report, first_dir)
            emit_report(second, second_dir)
            for name in ("sweep.csv", "summary.json"):
                with self.subTest(name=name):
                    self.assertEqual((Path(first_dir) / name).read_bytes(),
                                     (Path(second_dir) / name).read_bytes())

    def test_empty_report(self):
        empty = SweepReport({}, np.array([]), np.array([]), np.array([]),
                            np.array([], dtype=np.int64), np.array([], dtype=np.int64),
                            [], None, None, None, [])
        with TemporaryDirectory() as tmp:
            with self.assertRaises(SweepError):
                emit_report(empty, tmp)
            self.assertEqual(list(Path(tmp).iterdir()), [])


class TestDefaultProtocol(unittest.TestCase):
    """The default fit on the sigmoid simulation truth at n = 10^4 and 10^5."""

    @classmethod
    def setUpClass(cls):
        cls.report = run_sweep(SweepConfig(ExpertSpec.ridge(Activation.SIGMOID),
                                           n_grid=(10_000, 100_000), replications=6,
                                           loss="D2", workers=1))

    def test_no_divergence(self):
        np.testing.assert_array_equal(self.report.counts, [6, 6])

    def test_loss_at_smallest_size(self):
        self.assertLess(self.report.means[0], 2.0)

    def test_loss_decreases_with_n(self):
        self.assertLess(self.report.means[1], self.report.means[0])
        self.assertLess(self.report.slope, 0.0)


if __name__ == "__main__":
    unittest.main()
