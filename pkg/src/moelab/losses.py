"""Voronoi losses between a fitted and a true mixing measure.

This module includes functions to:
- Assign fitted atoms to the Voronoi cells generated by the true atoms.
- Compute the Voronoi losses D1, D2 and D3,r with their per-cell breakdown.
- Compute the L2(mu) distance between two regression functions.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist

from moelab.exceptions import InputError
from moelab.model import InputDistribution, MixingMeasure, regression_eval

DEFAULT_QUADRATURE_NODES = 256
DEFAULT_MONTE_CARLO_DRAWS = 65536


@dataclass(eq=False)
class VoronoiAssignment:
    """Fitted atoms grouped by their nearest true atom.

    Attributes:
        cell_of: (k',) index of the true atom each fitted atom belongs to.
        cells: For each true atom j, the fitted indices of cell A_j.
    """

    cell_of: np.ndarray
    cells: list[list[int]]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(cell) for cell in self.cells])


@dataclass(eq=False)
class LossBreakdown:
    """Value of a Voronoi loss split into its terms.

    Attributes:
        weight_term: sum_j |sum_{i in A_j} exp(beta0_i) - exp(beta0*_j)|.
        per_cell_terms: (k*,) parameter discrepancy of each cell.
        total: weight_term + sum(per_cell_terms).
    """

    weight_term: float
    per_cell_terms: np.ndarray
    total: float

    @classmethod
    def from_terms(cls, weight_term: float, per_cell_terms: np.ndarray):
        per_cell_terms = np.asarray(per_cell_terms, dtype=np.float64)
        return cls(float(weight_term), per_cell_terms,
                   float(weight_term + np.sum(per_cell_terms)))


def _check_compatible(G: MixingMeasure, Gstar: MixingMeasure) -> None:
    if G.dim != Gstar.dim or G.param_dim != Gstar.param_dim:
        raise InputError(
            f"Measures have dimensions (d={G.dim}, q={G.param_dim}) and "
            f"(d={Gstar.dim}, q={Gstar.param_dim})."
        )
    if G.expert.label != Gstar.expert.label:
        raise InputError(
            f"Expert families differ: {G.expert.label} != {Gstar.expert.label}."
        )


def voronoi_assign(G: MixingMeasure, Gstar: MixingMeasure) -> VoronoiAssignment:
    """Assigns every fitted atom to the nearest true atom.

    Distances are Euclidean on the concatenated (beta1, eta) vectors.
    Ties go to the lowest true index, and cells may be empty.

    Raises:
        InputError: If the measures have different families or dimensions.
    """
    _check_compatible(G, Gstar)
    distances = cdist(G.omega, Gstar.omega)
    # argmin returns the first minimum, which is the lowest true index.
    cell_of = np.argmin(distances, axis=1)
    cells = [np.flatnonzero(cell_of == j).tolist() for j in range(Gstar.k)]
    return VoronoiAssignment(cell_of, cells)


def _weight_term(G: MixingMeasure, Gstar: MixingMeasure,
                 assignment: VoronoiAssignment) -> float:
    fitted = np.bincount(assignment.cell_of, weights=G.weights, minlength=Gstar.k)
    return float(np.sum(np.abs(fitted - Gstar.weights)))


def _gaps(G: MixingMeasure, Gstar: MixingMeasure, assignment: VoronoiAssignment):
    """Per fitted atom: |d beta1|, |d eta|, |d a|, |d b| to its true atom."""
    match = assignment.cell_of
    d = G.dim
    delta_beta1 = np.linalg.norm(G.beta1 - Gstar.beta1[match], axis=1)
    delta_eta = G.eta - Gstar.eta[match]
    return (
        delta_beta1,
        np.linalg.norm(delta_eta, axis=1),
        np.linalg.norm(delta_eta[:, :d], axis=1),
        np.abs(delta_eta[:, d]),
    )


def _cell_sums(values: np.ndarray, assignment: VoronoiAssignment, k_true: int):
    return np.bincount(assignment.cell_of, weights=values, minlength=k_true)


def _split_loss(G, Gstar, assignment, squared_terms, linear_terms) -> LossBreakdown:
    """Squared gaps for cells with more than one atom, first powers otherwise."""
    crowded = assignment.sizes[assignment.cell_of] > 1
    per_atom = G.weights * np.where(crowded, squared_terms, linear_terms)
    return LossBreakdown.from_terms(
        _weight_term(G, Gstar, assignment),
        _cell_sums(per_atom, assignment, Gstar.k),
    )


def loss_d1(G: MixingMeasure, Gstar: MixingMeasure) -> LossBreakdown:
    """Voronoi loss for strongly identifiable experts, on (beta1, eta)."""
    assignment = voronoi_assign(G, Gstar)
    delta_beta1, delta_eta, _, _ = _gaps(G, Gstar, assignment)
    return _split_loss(
        G, Gstar, assignment,
        delta_beta1 ** 2 + delta_eta ** 2,
        delta_beta1 + delta_eta,
    )


def _require_ab_layout(G: MixingMeasure) -> None:
    if G.param_dim != G.dim + 1:
        raise InputError(
            f"{G.expert.label} experts do not have the (a, b) parameter layout."
        )


def loss_d2(G: MixingMeasure, Gstar: MixingMeasure) -> LossBreakdown:
    """Voronoi loss for ridge experts, with eta split into a and b."""
    _require_ab_layout(G)
    assignment = voronoi_assign(G, Gstar)
    delta_beta1, _, delta_a, delta_b = _gaps(G, Gstar, assignment)
    return _split_loss(
        G, Gstar, assignment,
        delta_beta1 ** 2 + delta_a ** 2 + delta_b ** 2,
        delta_beta1 + delta_a + delta_b,
    )


def loss_d3(G: MixingMeasure, Gstar: MixingMeasure, r: float) -> LossBreakdown:
    """Voronoi loss with r-th powers of the gaps in every cell.

    Raises:
        InputError: If r < 1 or the family lacks the (a, b) layout.
    """
    if not r >= 1:
        raise InputError(f"The exponent r must be >= 1, got {r}.")
    _require_ab_layout(G)
    assignment = voronoi_assign(G, Gstar)
    delta_beta1, _, delta_a, delta_b = _gaps(G, Gstar, assignment)
    per_atom = G.weights * (delta_beta1 ** r + delta_a ** r + delta_b ** r)
    return LossBreakdown.from_terms(
        _weight_term(G, Gstar, assignment),
        _cell_sums(per_atom, assignment, Gstar.k),
    )


def voronoi_loss(G: MixingMeasure, Gstar: MixingMeasure, name: str,
                 r: float = 1.0) -> LossBreakdown:
    """Dispatches on the loss name `D1`, `D2` or `D3`."""
    key = name.upper()
    if key == "D1":
        return loss_d1(G, Gstar)
    if key == "D2":
        return loss_d2(G, Gstar)
    if key == "D3":
        return loss_d3(G, Gstar, r)
    raise InputError(f"Unknown Voronoi loss '{name}'.")


@lru_cache(maxsize=None)
def legendre_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [-1, 1], shared read-only."""
    knots, weights = np.polynomial.legendre.leggauss(n)
    knots.setflags(write=False)
    weights.setflags(write=False)
    return knots, weights


def l2_distance(
        G: MixingMeasure,
        Gstar: MixingMeasure,
        mu: InputDistribution | None = None,
        nodes: int = DEFAULT_QUADRATURE_NODES,
        draws: int = DEFAULT_MONTE_CARLO_DRAWS,
        seed: int = 0,
) -> float:
    """L2(mu) distance between f_G and f_Gstar.

    A uniform mu on an interval is integrated with Gauss-Legendre
    quadrature; a uniform box in d > 1 with fixed-seed Monte Carlo; a
    sample set by the empirical mean.

    Args:
        G: First measure.
        Gstar: Second measure.
        mu: Input distribution, Uniform[0, 1]^d when omitted.
        nodes: Number of quadrature nodes (d = 1).
        draws: Number of Monte Carlo draws (d > 1).
        seed: Seed of the Monte Carlo draws.

    Raises:
        InputError: If the input dimensions disagree.
    """
    if G.dim != Gstar.dim:
        raise InputError(f"Measures have input dimensions {G.dim} and {Gstar.dim}.")
    if mu is None:
        mu = InputDistribution.uniform(G.dim)
    if mu.dim != G.dim:
        raise InputError(f"Distribution has dimension {mu.dim}, measures have {G.dim}.")

    if mu.kind == "samples":
        points = mu.samples
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    elif mu.dim == 1:
        knots, unit_weights = legendre_nodes(nodes)
        points = (0.5 * (mu.high - mu.low) * knots + 0.5 * (mu.high + mu.low))[:, None]
        # Uniform density 1/(high - low) cancels the interval half-length.
        weights = 0.5 * unit_weights
    else:
        points = mu.sample(draws, np.random.default_rng(seed))
        weights = np.full(draws, 1.0 / draws)

    diff = regression_eval(G, points) - regression_eval(Gstar, points)
    return float(np.sqrt(max(np.dot(weights, diff * diff), 0.0)))
