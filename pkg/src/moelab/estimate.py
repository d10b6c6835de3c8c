"""Least squares estimation of mixing measures.

This module includes functions to:
- Evaluate the mean squared error objective of a mixing measure.
- Initialize a fitted measure around the truth, one Voronoi cell per true atom.
- Fit a measure with mini-batch stochastic gradient descent.
- Fix the softmax translation gauge of a fitted measure.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import logsumexp

from moelab.exceptions import DivergenceError, InputError
from moelab.losses import voronoi_assign
from moelab.model import MixingMeasure, regression_eval, regression_grad

if TYPE_CHECKING:
    from moelab.harness import Dataset

logger = logging.getLogger(__name__)


class Gauge(Enum):
    """Rules fixing the translation (beta0, beta1) -> (beta0 + c, beta1 + v)."""

    PIN_LAST = "pin-last"
    POST_HOC_TRANSLATE = "post-hoc-translate"


@dataclass
class FitConfig:
    """Hyperparameters of the SGD fit.

    An epoch is `steps_per_epoch` mini-batch steps, drawn from a seed-derived
    permutation of the data that is reshuffled once used up; with
    `steps_per_epoch=None` an epoch is one full pass. The learning rate is
    multiplied by `decay_factor` every `decay_every` epochs. After the last
    epoch, `polish_steps` full-batch gradient steps at the initial learning
    rate are taken. The fit aborts when the objective exceeds
    `divergence_factor` times its initial value.
    """

    k: int = 2
    learning_rate: float = 0.5
    batch_size: int = 256
    epochs: int = 200
    steps_per_epoch: int | None = 40
    decay_every: int = 50
    decay_factor: float = 0.5
    polish_steps: int = 100
    init_spread: float = 0.02
    seed: int = 0
    gauge: Gauge = Gauge.POST_HOC_TRANSLATE
    divergence_factor: float = 1e6

    def __post_init__(self):
        if isinstance(self.gauge, str):
            self.gauge = Gauge(self.gauge)
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k}.")
        if self.learning_rate < 0:
            raise InputError(f"learning_rate must be >= 0, got {self.learning_rate}.")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}.")
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}.")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InputError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}.")
        if self.decay_every < 1:
            raise InputError(f"decay_every must be >= 1, got {self.decay_every}.")
        if self.polish_steps < 0:
            raise InputError(f"polish_steps must be >= 0, got {self.polish_steps}.")
        if self.init_spread < 0:
            raise InputError(f"init_spread must be >= 0, got {self.init_spread}.")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["gauge"] = self.gauge.value
        return data


@dataclass(eq=False)
class FitResult:
    """Outcome of `fit_sgd`.

    Attributes:
        G_hat: The fitted, gauge-fixed measure.
        final_objective: Last entry of `objective_trace`.
        objective_trace: Full-data objective after every epoch, followed by
            one entry after the polish when `polish_steps > 0`.
        iterations: Number of parameter updates, SGD and polish steps.
    """

    G_hat: MixingMeasure
    final_objective: float
    objective_trace: np.ndarray = field(repr=False)
    iterations: int


def objective(G: MixingMeasure, data: "Dataset") -> float:
    """Mean squared error (1/n) sum_i (Y_i - f_G(X_i))^2.

    Raises:
        InputError: If the data set is empty.
    """
    if data.Y.shape[0] == 0:
        raise InputError("Cannot evaluate the objective on an empty data set.")
    residual = data.Y - regression_eval(G, data.X)
    return float(np.mean(residual * residual))


def init_partition(k: int, k_true: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly distributes k fitted indices into k_true nonempty cells.

    Returns:
        (k,) array with the cell of every fitted index.
    """
    order = rng.permutation(k)
    cell_of = np.empty(k, dtype=np.int64)
    # One index per cell first, the rest anywhere.
    cell_of[order[:k_true]] = np.arange(k_true)
    cell_of[order[k_true:]] = rng.integers(0, k_true, size=k - k_true)
    return cell_of


def init_near_truth(
        Gstar: MixingMeasure,
        k: int,
        spread: float,
        seed: int,
) -> MixingMeasure:
    """Initial measure with k atoms scattered around the true atoms.

    Every fitted atom copies the parameters of the true atom of its cell
    plus independent Gaussian noise of standard deviation `spread`. The
    atoms of a cell share its mass: beta0 is lowered by log of the cell
    size, so with spread = 0 the initial regression function is f_G*.

    Raises:
        InputError: If k is smaller than the number of true atoms.
    """
    if k < Gstar.k:
        raise InputError(
            f"Cannot distribute {k} fitted atoms into {Gstar.k} nonempty cells."
        )
    rng = np.random.default_rng(seed)
    cell_of = init_partition(k, Gstar.k, rng)
    sizes = np.bincount(cell_of, minlength=Gstar.k)

    def perturb(values: np.ndarray) -> np.ndarray:
        return values + spread * rng.standard_normal(values.shape)

    return MixingMeasure(
        perturb(Gstar.beta0[cell_of] - np.log(sizes[cell_of])),
        perturb(Gstar.beta1[cell_of]),
        perturb(Gstar.eta[cell_of]),
        Gstar.expert,
    )


def init_from_truth(
        Gstar: MixingMeasure,
        k: int,
        spread: float,
        seed: int,
) -> MixingMeasure:
    """`init_near_truth`, extended to fewer atoms than the truth.

    With k < k* the initial atoms perturb k distinct true atoms chosen at
    random, and the remaining true atoms are left without a fitted atom.
    """
    if k >= Gstar.k:
        return init_near_truth(Gstar, k, spread, seed)
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}.")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(Gstar.k, size=k, replace=False))
    return MixingMeasure(
        Gstar.beta0[chosen] + spread * rng.standard_normal(k),
        Gstar.beta1[chosen] + spread * rng.standard_normal(Gstar.beta1[chosen].shape),
        Gstar.eta[chosen] + spread * rng.standard_normal(Gstar.eta[chosen].shape),
        Gstar.expert,
    )


def gauge_fix(
        G: MixingMeasure,
        Gstar: MixingMeasure | None,
        rule: Gauge,
) -> MixingMeasure:
    """Translates the gating parameters of G without changing f_G.

    PIN_LAST subtracts (beta0, beta1) of the last fitted atom from every atom.
    POST_HOC_TRANSLATE subtracts beta1 of the heaviest fitted atom in the
    cell of the last true atom, and the log of the cell's total mass from
    beta0; for a singleton cell that is the atom's own (beta0, beta1). When
    the cell is empty, the fitted atom nearest to the last true atom is used.

    Raises:
        InputError: If POST_HOC_TRANSLATE is requested without a reference.
    """
    if rule is Gauge.PIN_LAST:
        return G.translated(G.beta0[-1], G.beta1[-1])

    if Gstar is None:
        raise InputError("The post-hoc gauge needs the true measure as reference.")
    last = Gstar.k - 1
    cell = voronoi_assign(G, Gstar).cells[last]
    if not cell:
        anchor = int(np.argmin(np.linalg.norm(G.omega - Gstar.omega[last], axis=1)))
        return G.translated(G.beta0[anchor], G.beta1[anchor])
    anchor = cell[int(np.argmax(G.beta0[cell]))]
    return G.translated(float(logsumexp(G.beta0[cell])), G.beta1[anchor])


class BatchStream:
    """Mini-batches of a seed-derived permutation, reshuffled once used up."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def take(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        batch = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return batch


def _descend(G: MixingMeasure, X: np.ndarray, Y: np.ndarray, rate: float,
             epoch: int) -> MixingMeasure:
    """One gradient step on the mean squared error over (X, Y)."""
    grad = regression_grad(G, X)
    residual = Y - grad.value
    # d/dtheta of mean (Y - f)^2 is -2 mean((Y - f) df/dtheta).
    theta = G.flat() + rate * (2.0 / Y.shape[0]) * (residual @ grad.flat())
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"Parameters became non-finite at epoch {epoch}.", epoch)
    return G.with_flat(theta)


def fit_sgd(
        data: "Dataset",
        init: MixingMeasure,
        cfg: FitConfig,
        reference: MixingMeasure | None = None,
) -> FitResult:
    """Fits a mixing measure by mini-batch SGD on the mean squared error.

    Every epoch takes its mini-batch steps, then applies the gauge rule and
    records the full-data objective. A full-batch polish follows the last
    epoch; it counts as part of that epoch in divergence reports.

    Args:
        data: Training data.
        init: Initial measure; its number of atoms is the fitted budget.
        cfg: Hyperparameters.
        reference: True measure, needed by the post-hoc gauge.

    Returns:
        A `FitResult`.

    Raises:
        InputError: If the batch size exceeds the number of samples or the
            dimensions of data and measure disagree.
        DivergenceError: If the objective becomes non-finite or explodes.
    """
    n = data.Y.shape[0]
    if cfg.batch_size > n:
        raise InputError(f"batch_size {cfg.batch_size} exceeds the {n} samples.")
    if data.X.shape[1] != init.dim:
        raise InputError(
            f"Data has dimension {data.X.shape[1]}, the measure has {init.dim}."
        )

    rule = cfg.gauge
    if rule is Gauge.POST_HOC_TRANSLATE and reference is None:
        logger.warning("No reference measure given, falling back to the pin-last gauge.")
        rule = Gauge.PIN_LAST

    rng = np.random.default_rng(cfg.seed)
    stream = BatchStream(n, cfg.batch_size, rng)
    G = gauge_fix(init, reference, rule)
    initial = objective(G, data)
    ceiling = cfg.divergence_factor * max(initial, np.finfo(np.float64).tiny)
    trace = []
    learning_rate = cfg.learning_rate
    iterations = 0

    def record(epoch: int) -> None:
        value = objective(G, data)
        if not np.isfinite(value) or value > ceiling:
            raise DivergenceError(
                f"Objective {value} diverged at epoch {epoch} "
                f"(initial value {initial}).", epoch
            )
        trace.append(value)
        logger.debug("epoch %d: objective %.6g, learning rate %.4g",
                     epoch, value, learning_rate)

    for epoch in range(1, cfg.epochs + 1):
        if epoch > 1 and (epoch - 1) % cfg.decay_every == 0:
            learning_rate *= cfg.decay_factor

        if cfg.steps_per_epoch is None:
            order = rng.permutation(n)
            batches = [order[start:start + cfg.batch_size]
                       for start in range(0, n, cfg.batch_size)]
        else:
            batches = [stream.take() for _ in range(cfg.steps_per_epoch)]
        for batch in batches:
            G = _descend(G, data.X[batch], data.Y[batch], learning_rate, epoch)
            iterations += 1

        G = gauge_fix(G, reference, rule)
        record(epoch)

    if cfg.polish_steps:
        learning_rate = cfg.learning_rate
        for _ in range(cfg.polish_steps):
            G = _descend(G, data.X, data.Y, learning_rate, cfg.epochs)
            iterations += 1
        G = gauge_fix(G, reference, rule)
        record(cfg.epochs)

    trace = np.array(trace)
    return FitResult(G, float(trace[-1]), trace, iterations)
