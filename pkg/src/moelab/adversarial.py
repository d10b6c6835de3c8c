"""Adversarial sequences showing slow parameter estimation.

This module includes functions to:
- Build mixing measures G_n that approach the truth in Voronoi loss while
  their regression functions approach it much faster, for linear experts
  and for ridge experts with a vanishing true slope.
- Find the offset constant c of the ridge construction as a real root of
  a Taylor polynomial.
- Trace the ratio ||f_Gn - f_G*||_L2 / D3,r(G_n, G*) along a grid of n.
"""

import logging
from dataclasses import dataclass
from math import factorial
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import bisect

from moelab.exceptions import ConstructionError, InputError
from moelab.losses import l2_distance, loss_d3
from moelab.model import (
    Activation,
    Family,
    InputDistribution,
    MixingMeasure,
    activation_derivative,
    activation_label,
)

logger = logging.getLogger(__name__)

ROOT_GRID_LOW = 1e-6
ROOT_GRID_HIGH = 1e3
ROOT_GRID_POINTS = 2048
ROOT_RESIDUAL = 1e-9
RATIO_RTOL = 1e-12


@dataclass(eq=False)
class RatioCurve:
    """Ratio of the L2 distance to the Voronoi loss along n.

    Attributes:
        n_grid: Increasing values of n.
        ratios: ||f_Gn - f_G*|| / D3,r(G_n, G*).
        losses: D3,r(G_n, G*).
        distances: ||f_Gn - f_G*||_L2(mu).
        r: Exponent of the loss.
    """

    n_grid: np.ndarray
    ratios: np.ndarray
    losses: np.ndarray
    distances: np.ndarray
    r: float

    @property
    def strictly_decreasing(self) -> bool:
        """Each ratio lies below its predecessor by more than rounding."""
        return bool(np.all(np.diff(self.ratios) < -RATIO_RTOL * np.abs(self.ratios[:-1])))


def _check_n(n: int) -> None:
    if n < 2:
        raise InputError(f"n must be >= 2, got {n}.")


def construct_gn_polynomial(Gstar: MixingMeasure, n: int, r: float) -> MixingMeasure:
    """Splits the first true atom of a linear-expert truth in two.

    Both halves keep beta1*_1 and a*_1, carry the weight
    exp(beta0*_1)/2 + 1/(2 n^(r+1)) each and move the bias to b*_1 +- 1/n.
    The remaining atoms copy true atoms 2..k*. Then
    D3,r(G_n, G*) = 1/n^(r+1) + (exp(beta0*_1) + 1/n^(r+1)) / n^r.

    Raises:
        InputError: If the truth is not linear or n < 2.
    """
    if Gstar.expert.family is not Family.LINEAR:
        raise InputError(f"Needs linear experts, got {Gstar.expert.label}.")
    _check_n(n)
    if not r >= 1:
        raise InputError(f"The exponent r must be >= 1, got {r}.")

    d = Gstar.dim
    weight = 0.5 * np.exp(Gstar.beta0[0]) + 0.5 / n ** (r + 1)
    split_eta = np.repeat(Gstar.eta[:1], 2, axis=0)
    split_eta[0, d] += 1.0 / n
    split_eta[1, d] -= 1.0 / n
    return MixingMeasure(
        np.concatenate([[np.log(weight)] * 2, Gstar.beta0[1:]]),
        np.vstack([np.repeat(Gstar.beta1[:1], 2, axis=0), Gstar.beta1[1:]]),
        np.vstack([split_eta, Gstar.eta[1:]]),
        Gstar.expert,
    )


def taylor_order(r: int) -> int:
    """Order R of the expansion: r when odd, r + 1 when even."""
    return r if r % 2 else r + 1


def ridge_root_polynomial(
        activation: Activation,
        degree: int,
        b: float,
        r: int,
        n: int,
) -> np.ndarray:
    """Coefficients of q(c)/c in increasing powers of c.

    q(c) = sum_{alpha=1}^{R} (1 + 2^alpha) sigma^(alpha)(b) c^alpha / (alpha! n^alpha)
    is the Taylor expansion of the two shifted copies sigma(b + c/n) and
    sigma(b + 2c/n) minus 2 sigma(b); R = `taylor_order(r)` is odd.

    Raises:
        CapabilityError: If sigma lacks a derivative of order R.
    """
    order = taylor_order(r)
    return np.array([
        (1 + 2 ** alpha) * float(activation_derivative(activation, alpha, b, degree))
        / (factorial(alpha) * float(n) ** alpha)
        for alpha in range(1, order + 1)
    ])


def _brackets(function: Callable[[float], float]) -> list[tuple[float, float]]:
    grid = np.geomspace(ROOT_GRID_LOW, ROOT_GRID_HIGH, ROOT_GRID_POINTS)
    brackets = []
    for points in (grid, -grid):
        values = np.array([function(c) for c in points])
        for i in np.flatnonzero(values[:-1] * values[1:] <= 0):
            brackets.append((points[i], points[i + 1]))
    return brackets


def find_ridge_root(
        activation: Activation,
        degree: int,
        b: float,
        r: int,
        n: int,
) -> tuple[float, float]:
    """Smallest-magnitude nonzero real root c of q(c)/c with |c| <= 1e3.

    A sign-change scan of q(c)/c over +-[1e-6, 1e3] brackets the roots and
    bisection refines the one closest to zero.

    Returns:
        (c, relative residual of q at c).

    Raises:
        ConstructionError: If no real root lies in the scanned range or the
            residual is too large.
    """
    coefficients = ridge_root_polynomial(activation, degree, b, r, n)
    scale = np.max(np.abs(coefficients))
    name = activation_label(activation, degree)
    if scale == 0:
        raise ConstructionError(
            f"All derivatives of {name} vanish at b*_1 = {b}; no root for r = {r}, n = {n}."
        )
    normalized = coefficients / scale

    def reduced(c: float) -> float:
        return float(P.polyval(c, normalized))

    brackets = _brackets(reduced)
    if not brackets:
        raise ConstructionError(
            f"q(c)/c has no real root with |c| in [{ROOT_GRID_LOW}, {ROOT_GRID_HIGH}] "
            f"for {name}, b*_1 = {b}, r = {r}, n = {n}."
        )
    low, high = min(brackets, key=lambda pair: (min(abs(pair[0]), abs(pair[1])), pair[0] < 0))
    if reduced(low) == 0:
        c = low
    elif reduced(high) == 0:
        c = high
    else:
        c = bisect(reduced, min(low, high), max(low, high), xtol=1e-300,
                   rtol=4 * np.finfo(float).eps, maxiter=2000)
    logger.info("%s, b*_1 = %g, r = %d, n = %d: root c = %.12g", name, b, r, n, c)

    terms = coefficients * c ** np.arange(1, coefficients.size + 1)
    residual = abs(terms.sum()) / np.max(np.abs(terms))
    if residual > ROOT_RESIDUAL:
        raise ConstructionError(
            f"Root c = {c} of {name} (b*_1 = {b}, r = {r}, n = {n}) leaves the "
            f"relative residual {residual:.3e}."
        )
    return float(c), float(residual)


def construct_gn_ridge(
        Gstar: MixingMeasure,
        n: int,
        r: int,
        activation: Activation | None = None,
) -> MixingMeasure:
    """Splits the first true atom of a ridge truth with a*_1 = 0 in two.

    Both halves carry half of the true weight, keep beta1*_1 and a = 0, and
    move the bias to b*_1 + c/n and b*_1 + 2c/n, where c is the real root
    from `find_ridge_root`. The remaining atoms copy true atoms 2..k*.

    Raises:
        InputError: If the truth is not ridge, a*_1 != 0, r is not an
            integer, n < 2 or `activation` differs from the truth's.
        ConstructionError: If no real root c exists.
        CapabilityError: If the activation lacks the needed derivatives.
    """
    if Gstar.expert.family is not Family.RIDGE:
        raise InputError(f"Needs ridge experts, got {Gstar.expert.label}.")
    if np.any(Gstar.a[0] != 0):
        raise InputError(f"Needs a*_1 = 0, got {Gstar.a[0].tolist()}.")
    _check_n(n)
    if r < 1 or r != int(r):
        raise InputError(f"The order r must be a positive integer, got {r}.")
    link, degree = Gstar.expert.link
    if activation is not None and activation is not link:
        raise InputError(
            f"Activation {activation.value} differs from the truth's {link.value}."
        )

    d = Gstar.dim
    b = float(Gstar.b[0])
    c, residual = find_ridge_root(link, degree, b, int(r), n)
    logger.debug("n=%d: relative residual %.2e", n, residual)

    split_eta = np.repeat(Gstar.eta[:1], 2, axis=0)
    split_eta[:, :d] = 0.0
    split_eta[0, d] = b + c / n
    split_eta[1, d] = b + 2 * c / n
    beta0 = Gstar.beta0[0] - np.log(2.0)
    return MixingMeasure(
        np.concatenate([[beta0, beta0], Gstar.beta0[1:]]),
        np.vstack([np.repeat(Gstar.beta1[:1], 2, axis=0), Gstar.beta1[1:]]),
        np.vstack([split_eta, Gstar.eta[1:]]),
        Gstar.expert,
    )


def ratio_curve(
        Gstar: MixingMeasure,
        r: float,
        n_grid,
        constructor: Callable[[MixingMeasure, int, float], MixingMeasure],
        mu: InputDistribution | None = None,
) -> RatioCurve:
    """Evaluates ||f_Gn - f_G*|| / D3,r(G_n, G*) for every n of the grid.

    Args:
        Gstar: True measure.
        r: Exponent of the loss.
        n_grid: Strictly increasing values of n.
        constructor: `construct_gn_polynomial`, `construct_gn_ridge` or any
            callable (Gstar, n, r) -> G_n.
        mu: Input distribution of the L2 norm.

    Raises:
        InputError: If the grid is empty or not increasing.
    """
    n_grid = np.asarray(n_grid, dtype=np.int64)
    if n_grid.size == 0 or np.any(np.diff(n_grid) <= 0):
        raise InputError(f"The grid of n must be nonempty and increasing: {n_grid.tolist()}.")

    losses = np.empty(n_grid.size)
    distances = np.empty(n_grid.size)
    for i, n in enumerate(n_grid):
        G_n = constructor(Gstar, int(n), r)
        losses[i] = loss_d3(G_n, Gstar, r).total
        distances[i] = l2_distance(G_n, Gstar, mu)
        logger.debug("n=%d: D3 %.6e, L2 %.6e", n, losses[i], distances[i])

    curve = RatioCurve(n_grid, distances / losses, losses, distances, r)
    if not curve.strictly_decreasing:
        logger.warning("The ratio curve of %s is not strictly decreasing: %s",
                       Gstar.expert.label, np.array2string(curve.ratios, precision=4))
    return curve
