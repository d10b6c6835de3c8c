"""Simulation study of parameter estimation rates.

This module includes functions to:
- Generate synthetic regression data from a true mixing measure.
- Run sweeps over sample sizes and replications, fitting a measure each time.
- Fit the slope of a log-log convergence plot.
- Write sweep reports as CSV, JSON and SVG files.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from moelab.estimate import FitConfig, fit_sgd, gauge_fix, init_near_truth
from moelab.exceptions import DivergenceError, InputError, SweepError
from moelab.losses import l2_distance, voronoi_loss
from moelab.model import (
    ExpertSpec,
    Family,
    InputDistribution,
    MixingMeasure,
    reference_truth,
    regression_eval,
)
from moelab.utils import plot_loglog, worker_count, write_csv, write_json

logger = logging.getLogger(__name__)

MAX_DIVERGENT_FRACTION = 0.2
STAGE_TAGS = {"data": 0, "init": 1, "fit": 2}

FULL_GRID = tuple(int(n) for n in np.unique(np.round(np.logspace(4, 5, 20))))
QUICK_GRID = tuple(int(n) for n in np.unique(np.round(np.logspace(3, 4, 10))))
FULL_REPLICATIONS = 20
QUICK_REPLICATIONS = 10


class Setting(Enum):
    """Fitted component budget relative to the truth."""

    EXACT = "exact"
    OVER = "over"


@dataclass(eq=False)
class Dataset:
    """Samples (X_i, Y_i) with Y_i = f_G*(X_i) + eps_i, eps_i ~ N(0, noise_var).

    Attributes:
        X: (n, d) inputs.
        Y: (n,) responses.
        noise_var: Variance of the noise.
        seed: Seed the data was generated with.
    """

    X: np.ndarray
    Y: np.ndarray
    noise_var: float
    seed: int

    @property
    def n(self) -> int:
        return self.Y.shape[0]


def generate_dataset(
        Gstar: MixingMeasure,
        n: int,
        noise_var: float,
        input_dist: InputDistribution | None = None,
        seed: int = 0,
) -> Dataset:
    """Draws n i.i.d. samples of the regression model.

    Args:
        Gstar: True mixing measure.
        n: Number of samples.
        noise_var: Variance of the Gaussian noise.
        input_dist: Distribution of X, Uniform[0, 1]^d when omitted.
        seed: Seed of the generator; equal seeds give identical data.

    Raises:
        InputError: If n < 1 or the noise variance is negative.
    """
    if n < 1:
        raise InputError(f"Sample size must be >= 1, got {n}.")
    if noise_var < 0:
        raise InputError(f"Noise variance must be >= 0, got {noise_var}.")
    if input_dist is None:
        input_dist = InputDistribution.uniform(Gstar.dim)

    rng = np.random.default_rng(seed)
    X = input_dist.sample(n, rng)
    Y = regression_eval(Gstar, X)
    if noise_var > 0:
        Y = Y + rng.normal(0.0, np.sqrt(noise_var), size=n)
    return Dataset(X, Y, noise_var, seed)


def derive_seed(master_seed: int, n: int, rep: int, stage: str) -> int:
    """64-bit seed of one (n, replication, stage) cell of a sweep."""
    sequence = np.random.SeedSequence(master_seed, spawn_key=(n, rep, STAGE_TAGS[stage]))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def default_loss(expert: ExpertSpec) -> tuple[str, float]:
    """Voronoi loss (name, r) suited to an expert family.

    D3 with r = 1 for linear and polynomial experts, D2 for ridge experts
    and D1 for normalized ridge experts.
    """
    if expert.family in (Family.LINEAR, Family.POLYNOMIAL):
        return "D3", 1.0
    if expert.family is Family.RIDGE:
        return "D2", 1.0
    return "D1", 1.0


@dataclass(eq=False)
class SweepConfig:
    """One convergence-rate experiment.

    Attributes:
        expert: Expert family of truth and fit.
        truth: True measure, the two-atom simulation ground truth if omitted.
        setting: EXACT fits k* atoms, OVER fits k* + 1.
        n_grid: Strictly increasing sample sizes.
        replications: Fits per sample size.
        loss: Voronoi loss name (D1, D2, D3).
        r: Exponent of D3.
        metric: "voronoi" records the loss, "l2" the L2(mu) distance.
        fit: Template of the SGD hyperparameters.
        master_seed: Seed every replication seed derives from.
        noise_var: Noise variance of the data.
        input_dist: Distribution of the inputs.
        workers: Parallel worker processes, from MOE_LAB_THREADS if None.
    """

    expert: ExpertSpec
    truth: MixingMeasure | None = None
    setting: Setting = Setting.EXACT
    n_grid: tuple[int, ...] = FULL_GRID
    replications: int = FULL_REPLICATIONS
    loss: str = "D2"
    r: float = 1.0
    metric: str = "voronoi"
    fit: FitConfig = field(default_factory=FitConfig)
    master_seed: int = 0
    noise_var: float = 1.0
    input_dist: InputDistribution | None = None
    workers: int | None = None

    def __post_init__(self):
        if isinstance(self.setting, str):
            self.setting = Setting(self.setting)
        if self.truth is None:
            self.truth = reference_truth(self.expert)
        if self.input_dist is None:
            self.input_dist = InputDistribution.uniform(self.truth.dim)
        self.n_grid = tuple(int(n) for n in self.n_grid)
        if not self.n_grid:
            raise InputError("The sample-size grid is empty.")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise InputError(f"The sample-size grid must be strictly increasing: {self.n_grid}.")
        if self.replications < 1:
            raise InputError(f"replications must be >= 1, got {self.replications}.")
        if self.metric not in ("voronoi", "l2"):
            raise InputError(f"Unknown metric '{self.metric}'.")

    @property
    def k(self) -> int:
        """Number of fitted atoms."""
        return self.truth.k + (1 if self.setting is Setting.OVER else 0)

    def to_dict(self) -> dict:
        return {
            "expert": self.expert.to_dict(),
            "truth": self.truth.to_dict(),
            "setting": self.setting.value,
            "k": self.k,
            "n_grid": list(self.n_grid),
            "replications": self.replications,
            "loss": self.loss,
            "r": self.r,
            "metric": self.metric,
            "fit": {key: value for key, value in self.fit.to_dict().items()
                    if key not in ("k", "seed")},
            "master_seed": self.master_seed,
            "noise_var": self.noise_var,
            "input_dist": self.input_dist.to_dict(),
        }


@dataclass
class ReplicationResult:
    """Recorded quantity of one (n, replication) fit."""

    n: int
    rep: int
    seed: int
    value: float
    diverged: bool = False
    error: str = ""


@dataclass(eq=False)
class SweepReport:
    """Aggregated sweep results.

    Attributes:
        config: Echo of the sweep configuration.
        n_grid: Sample sizes.
        means: Mean recorded value per size over non-divergent replications.
        stds: Standard deviation per size.
        counts: Number of non-divergent replications per size.
        divergent: Number of divergent replications per size.
        records: Every replication in (n, rep) order.
        slope: Slope of log(mean) against log(n), None when undefined.
        intercept: Intercept of the same fit.
        r_squared: Coefficient of determination of the same fit.
        replication_slopes: Slope of every replication across sizes.
        wall_time: Seconds the sweep took.
    """

    config: dict
    n_grid: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    counts: np.ndarray
    divergent: np.ndarray
    records: list[ReplicationResult]
    slope: float | None
    intercept: float | None
    r_squared: float | None
    replication_slopes: list[float | None]
    wall_time: float = 0.0

    @property
    def slope_defined(self) -> bool:
        return self.slope is not None


def fit_loglog_slope(points) -> tuple[float, float, float]:
    """Ordinary least squares of log(value) on log(n).

    Args:
        points: Iterable of (n, value) pairs with value > 0.

    Returns:
        (slope, intercept, r_squared) in natural logarithms.

    Raises:
        InputError: For nonpositive values or fewer than two distinct n.
    """
    pairs = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    if np.unique(pairs[:, 0]).size < 2:
        raise InputError("A log-log slope needs at least two distinct sample sizes.")
    if np.any(pairs <= 0) or not np.all(np.isfinite(pairs)):
        raise InputError("Log-log points must be finite and positive.")

    log_n = np.log(pairs[:, 0])
    log_value = np.log(pairs[:, 1])
    design = np.vstack([log_n, np.ones_like(log_n)]).T
    (slope, intercept), *_ = np.linalg.lstsq(design, log_value, rcond=None)

    residual = log_value - design @ np.array([slope, intercept])
    total = np.sum((log_value - log_value.mean()) ** 2)
    r_squared = 1.0 if total == 0 else 1.0 - np.sum(residual ** 2) / total
    return float(slope), float(intercept), float(r_squared)


def _measure(cfg: SweepConfig, G_hat: MixingMeasure) -> float:
    if cfg.metric == "l2":
        return l2_distance(G_hat, cfg.truth, cfg.input_dist)
    return voronoi_loss(G_hat, cfg.truth, cfg.loss, cfg.r).total


def run_replication(cfg: SweepConfig, n: int, rep: int) -> ReplicationResult:
    """Generates data, initializes, fits and measures one replication."""
    data_seed = derive_seed(cfg.master_seed, n, rep, "data")
    data = generate_dataset(cfg.truth, n, cfg.noise_var, cfg.input_dist, data_seed)
    init = init_near_truth(cfg.truth, cfg.k, cfg.fit.init_spread,
                           derive_seed(cfg.master_seed, n, rep, "init"))
    fit_cfg = replace(cfg.fit, k=cfg.k, seed=derive_seed(cfg.master_seed, n, rep, "fit"),
                      batch_size=min(cfg.fit.batch_size, n))
    try:
        result = fit_sgd(data, init, fit_cfg, reference=cfg.truth)
    except DivergenceError as exc:
        return ReplicationResult(n, rep, data_seed, float("nan"), True, str(exc))
    G_hat = gauge_fix(result.G_hat, cfg.truth, fit_cfg.gauge)
    return ReplicationResult(n, rep, data_seed, _measure(cfg, G_hat))


def _run_task(task: tuple[SweepConfig, int, int]) -> ReplicationResult:
    return run_replication(*task)


def _execute(cfg: SweepConfig) -> list[ReplicationResult]:
    tasks = [(cfg, n, rep) for n in cfg.n_grid for rep in range(cfg.replications)]
    workers = cfg.workers if cfg.workers is not None else worker_count()
    if workers <= 1:
        return [_run_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map keeps task order, so results do not depend on the schedule.
        return list(pool.map(_run_task, tasks, chunksize=1))


def _aggregate(cfg: SweepConfig, records: list[ReplicationResult]) -> SweepReport:
    sizes = np.array(cfg.n_grid)
    means = np.full(sizes.size, np.nan)
    stds = np.full(sizes.size, np.nan)
    counts = np.zeros(sizes.size, dtype=np.int64)
    divergent = np.zeros(sizes.size, dtype=np.int64)
    table = np.full((sizes.size, cfg.replications), np.nan)

    for record in records:
        i = cfg.n_grid.index(record.n)
        if record.diverged:
            divergent[i] += 1
            logger.warning("n=%d rep=%d excluded: %s", record.n, record.rep, record.error)
        else:
            table[i, record.rep] = record.value

    for i in range(sizes.size):
        values = table[i][~np.isnan(table[i])]
        counts[i] = values.size
        if values.size:
            means[i] = values.mean()
            stds[i] = values.std(ddof=1) if values.size > 1 else 0.0

    slope = intercept = r_squared = None
    usable = (counts > 0) & (means > 0)
    if np.unique(sizes[usable]).size >= 2:
        slope, intercept, r_squared = fit_loglog_slope(zip(sizes[usable], means[usable]))
    else:
        logger.warning("Slope undefined: fewer than two sizes with a positive mean.")

    replication_slopes = []
    for rep in range(cfg.replications):
        column = table[:, rep]
        keep = np.isfinite(column) & (column > 0)
        if np.unique(sizes[keep]).size >= 2:
            replication_slopes.append(fit_loglog_slope(zip(sizes[keep], column[keep]))[0])
        else:
            replication_slopes.append(None)

    return SweepReport(cfg.to_dict(), sizes, means, stds, counts, divergent, records,
                       slope, intercept, r_squared, replication_slopes)


def run_sweep(cfg: SweepConfig) -> SweepReport:
    """Fits `cfg.replications` measures per sample size and fits the rate.

    Every (n, replication) cell derives its own data, initialization and
    SGD seeds from the master seed, and draws a fresh random partition of
    the fitted atoms into Voronoi cells.

    Raises:
        SweepError: If more than 20% of the replications diverge.
    """
    start = time.perf_counter()
    logger.info("Sweep: %s experts, %s setting, %d sizes x %d replications, metric %s",
                cfg.expert.label, cfg.setting.value, len(cfg.n_grid),
                cfg.replications, cfg.metric if cfg.metric == "l2" else cfg.loss)
    records = _execute(cfg)

    diverged = sum(record.diverged for record in records)
    if diverged > MAX_DIVERGENT_FRACTION * len(records):
        raise SweepError(
            f"{diverged} of {len(records)} replications diverged "
            f"(more than {MAX_DIVERGENT_FRACTION:.0%})."
        )

    report = _aggregate(cfg, records)
    report.wall_time = time.perf_counter() - start
    for n, mean, std in zip(report.n_grid, report.means, report.stds):
        logger.info("n=%d: mean %.6g, std %.3g", n, mean, std)
    logger.info("Slope %s, wall time %.1fs",
                "undefined" if report.slope is None else f"{report.slope:.4f}",
                report.wall_time)
    return report


def l2_rate_sweep(cfg: SweepConfig) -> SweepReport:
    """`run_sweep` recording the L2(mu) distance of the regression functions."""
    return run_sweep(replace(cfg, metric="l2"))


def _json_float(value) -> float | None:
    return None if value is None or not np.isfinite(value) else float(value)


def report_summary(report: SweepReport) -> dict:
    """The content of `summary.json`."""
    return {
        "config": report.config,
        "per_n": [
            {
                "n": int(n),
                "mean": _json_float(mean),
                "std": _json_float(std),
                "count": int(count),
                "divergent": int(divergent),
            }
            for n, mean, std, count, divergent in zip(
                report.n_grid, report.means, report.stds, report.counts, report.divergent)
        ],
        "slope_defined": report.slope_defined,
        "slope": _json_float(report.slope),
        "intercept": _json_float(report.intercept),
        "r_squared": _json_float(report.r_squared),
        "replication_slopes": [_json_float(value) for value in report.replication_slopes],
        "divergent_total": int(report.divergent.sum()),
        "seeds": {"master_seed": report.config["master_seed"]},
    }


def emit_report(report: SweepReport, directory, extra: dict | None = None) -> dict[str, Path]:
    """Writes `sweep.csv`, `summary.json` and `loglog.svg` into `directory`.

    Args:
        report: The sweep report.
        directory: Output directory, created if missing.
        extra: Additional entries merged into `summary.json`.

    Returns:
        Paths of the written files by name.

    Raises:
        SweepError: If the report holds no usable replication.
        OSError: If a file cannot be written, with its path in the message.
    """
    if not report.records or not np.any(report.counts > 0):
        raise SweepError("Refusing to write a report without any usable replication.")

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": directory / "sweep.csv",
        "json": directory / "summary.json",
        "svg": directory / "loglog.svg",
    }

    frame = pd.DataFrame({
        "n": [record.n for record in report.records],
        "rep": [record.rep for record in report.records],
        # repr gives the shortest decimal that round-trips.
        "loss": ["" if record.diverged else repr(float(record.value))
                 for record in report.records],
        "seed": [record.seed for record in report.records],
        "diverged": [str(record.diverged).lower() for record in report.records],
    })
    write_csv(paths["csv"], frame)

    summary = report_summary(report)
    if extra:
        summary.update(extra)
    write_json(paths["json"], summary)

    usable = report.counts > 0
    plot_loglog(
        paths["svg"],
        report.n_grid[usable],
        report.means[usable],
        report.stds[usable],
        report.slope,
        report.intercept,
        title=f"{report.config['expert']['family']} experts, {report.config['setting']}",
        ylabel=report.config["metric"] if report.config["metric"] == "l2"
        else report.config["loss"],
    )
    return paths
