"""Numerical checks of identifiability conditions.

This module includes functions to:
- Build the function families whose linear independence makes an expert
  family strongly identifiable, or makes an activation independent of the
  gate.
- Decide independence from the smallest normalized singular value of a
  family sampled at random inputs, and name the dependency when there is one.
- Detect the gating-expert interactions that slow parameter estimation.
- Classify a ground truth into the convergence regime it falls in.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from moelab.exceptions import CapabilityError, InputError
from moelab.model import (
    Activation,
    Atom,
    ExpertSpec,
    Family,
    MixingMeasure,
    activation_derivative,
    activation_label,
    expert_derivative,
    expert_inputs,
    max_order,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-6
DEFAULT_TRIALS = 5
MIN_POINTS = 512
POINTS_PER_COLUMN = 8
MAX_TOTAL_ORDER = 2
DOMAIN = (-3.0, 3.0)
COINCIDENCE_TOL = 1e-6
MIN_SEPARATION = 1.0
MAX_DRAWS = 1000


class Mode(Enum):
    """Which family of functions is checked."""

    IDENTIFIABILITY = "identifiability"
    INDEPENDENCE = "independence"


@dataclass(frozen=True)
class ColumnLabel:
    """Name of one function of a family.

    Attributes:
        atom: Index of the atom the function belongs to.
        nu: Power of every input coordinate.
        tau: Derivative multi-index over (a_1..a_d, b), or the derivative
            order of the activation in the independence family.
        mode: The family the column belongs to.
    """

    atom: int
    nu: tuple[int, ...]
    tau: tuple[int, ...]
    mode: Mode

    def monomial(self) -> str:
        names = ["x"] if len(self.nu) == 1 else [f"x{i + 1}" for i in range(len(self.nu))]
        parts = [name if power == 1 else f"{name}^{power}"
                 for name, power in zip(names, self.nu) if power]
        return "·".join(parts)

    def derivative(self) -> str:
        if self.mode is Mode.INDEPENDENCE:
            return "σ" + "'" * self.tau[0] + "(a·x+b)"
        order = sum(self.tau)
        if order == 0:
            return "h"
        d = len(self.tau) - 1
        names = ["a"] if d == 1 else [f"a{i + 1}" for i in range(d)]
        names.append("b")
        parts = [f"∂{name}" if power == 1 else f"∂{name}^{power}"
                 for name, power in zip(names, self.tau) if power]
        top = "∂" if order == 1 else f"∂^{order}"
        return f"{top}h/{''.join(parts)}"

    def __str__(self) -> str:
        monomial = self.monomial()
        body = f"{monomial}·{self.derivative()}" if monomial else self.derivative()
        return f"{body} [atom {self.atom + 1}]"


def multi_indices(n_vars: int, max_total: int) -> list[tuple[int, ...]]:
    """All multi-indices over n_vars variables with total order <= max_total.

    Ordered by total order, then lexicographically from the first variable.
    """
    indices = [index for index in itertools.product(range(max_total + 1), repeat=n_vars)
               if sum(index) <= max_total]
    return sorted(indices, key=lambda index: (sum(index), tuple(-i for i in index)))


def default_domain(spec: ExpertSpec) -> tuple[float, float]:
    """Sampling box of the inputs, [-3, 3] for every family."""
    del spec
    return DOMAIN


@dataclass(eq=False)
class FamilyMatrix:
    """A function family sampled at m random inputs, one column per function.

    When built by `build_family`, the matrix remembers how to resample
    itself at fresh inputs.

    Attributes:
        values: (m, F) column values.
        labels: Names of the F columns.
        spec: Expert family the columns come from.
        mode: Which family was built.
        params: (k, q) expert parameters of the atoms.
        domain: Box the inputs are drawn from.
        seed: Seed of the inputs.
    """

    values: np.ndarray
    labels: list[ColumnLabel]
    spec: ExpertSpec | None = None
    mode: Mode | None = None
    params: np.ndarray | None = field(default=None, repr=False)
    domain: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0

    @property
    def can_resample(self) -> bool:
        return self.spec is not None and self.mode is not None and self.params is not None

    def resample(self, seed: int) -> "FamilyMatrix":
        """The same functions evaluated at inputs drawn with another seed."""
        if not self.can_resample:
            raise InputError("This family matrix does not know how it was built.")
        return build_family(self.spec, self.mode, self.params, seed=seed, domain=self.domain)


@dataclass(eq=False)
class IndependenceVerdict:
    """Result of an independence check.

    Attributes:
        min_singular_ratio: sigma_min / sigma_max of the column-normalized
            matrix, the largest over all trials.
        independent: Whether the ratio exceeds the threshold.
        threshold: The decision threshold.
        labels: Names of the columns.
        dependency: Unit coefficient vector of the dependency when dependent.
        zero_columns: Indices of identically zero columns.
    """

    min_singular_ratio: float
    independent: bool
    threshold: float
    labels: list[ColumnLabel]
    dependency: np.ndarray | None = None
    zero_columns: list[int] = field(default_factory=list)

    def terms(self, tol: float = 1e-3) -> list[tuple[float, ColumnLabel]]:
        """Nonnegligible (coefficient, column) pairs of the dependency."""
        if self.dependency is None:
            return []
        order = np.argsort(-np.abs(self.dependency), kind="stable")
        return [(float(self.dependency[i]), self.labels[i]) for i in order
                if abs(self.dependency[i]) > tol]

    def to_dict(self) -> dict:
        return {
            "min_singular_ratio": self.min_singular_ratio,
            "independent": self.independent,
            "threshold": self.threshold,
            "columns": [str(label) for label in self.labels],
            "dependency": None if self.dependency is None
            else [float(value) for value in self.dependency],
            "zero_columns": [str(self.labels[i]) for i in self.zero_columns],
            "equation": dependency_equation(self),
        }


def _draw_inputs(m: int, dim: int, domain: tuple[float, float], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(domain[0], domain[1], size=(m, dim))


def _monomials(x: np.ndarray, nu: tuple[int, ...]) -> np.ndarray:
    return np.prod(x ** np.asarray(nu), axis=1)


def _identifiability_columns(spec, params, x):
    d = x.shape[1]
    u = expert_inputs(spec, x)
    u_ext = np.hstack([u, np.ones((x.shape[0], 1))])
    # g^(|tau|)(z_j) for every order up to the maximum, (n, k) each.
    derivatives = [expert_derivative(spec, params, x, order)
                   for order in range(MAX_TOTAL_ORDER + 1)]
    columns, labels = [], []
    for j in range(params.shape[0]):
        for index in multi_indices(2 * d + 1, MAX_TOTAL_ORDER):
            nu, tau = index[:d], index[d:]
            column = (_monomials(x, nu) * derivatives[sum(tau)][:, j]
                      * _monomials(u_ext, tau))
            columns.append(column)
            labels.append(ColumnLabel(j, nu, tau, Mode.IDENTIFIABILITY))
    return columns, labels


def _independence_columns(spec, params, x):
    d = x.shape[1]
    activation, degree = spec.link
    z = x @ params[:, :d].T + params[:, d]
    columns, labels = [], []
    for j in range(params.shape[0]):
        for order in range(MAX_TOTAL_ORDER + 1):
            derivative = activation_derivative(activation, order, z[:, j], degree)
            for nu in multi_indices(d, MAX_TOTAL_ORDER):
                columns.append(_monomials(x, nu) * derivative)
                labels.append(ColumnLabel(j, nu, (order,), Mode.INDEPENDENCE))
    return columns, labels


def _check_params(spec: ExpertSpec, params: np.ndarray, dim: int) -> np.ndarray:
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if params.shape[1] != spec.param_dim(dim):
        raise InputError(
            f"Expert parameters have {params.shape[1]} entries, "
            f"{spec.label} experts in d={dim} need {spec.param_dim(dim)}."
        )
    for i, j in itertools.combinations(range(params.shape[0]), 2):
        if np.linalg.norm(params[i] - params[j]) <= COINCIDENCE_TOL:
            raise InputError(f"Expert parameters of atoms {i + 1} and {j + 1} coincide.")
    return params


def build_family(
        spec: ExpertSpec,
        mode: Mode,
        params,
        points: int | None = None,
        seed: int = 0,
        domain: tuple[float, float] | None = None,
) -> FamilyMatrix:
    """Samples a function family at random inputs.

    IDENTIFIABILITY has the columns x^nu d^tau h(x, eta_j)/d eta^tau and
    INDEPENDENCE the columns x^nu sigma^(tau)(a_j.x + b_j), both for all
    |nu| + |tau| <= 2 (resp. |nu| <= 2, tau <= 2) and every atom j.

    Args:
        spec: Expert family; INDEPENDENCE uses its activation.
        mode: Which family to build.
        params: (k, d + 1) parameters (a_j, b_j), pairwise distinct.
        points: Number of inputs, max(8 F, 512) when omitted.
        seed: Seed of the inputs.
        domain: Input box, `default_domain(spec)` when omitted.

    Raises:
        InputError: If parameters repeat or do not match the family.
        CapabilityError: If the activation lacks the second derivative.
    """
    mode = Mode(mode)
    activation, degree = spec.link
    if max_order(activation) < MAX_TOTAL_ORDER:
        raise CapabilityError(
            f"{activation_label(activation, degree)} has no derivative of order "
            f"{MAX_TOTAL_ORDER}."
        )
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    dim = params.shape[1] - 1
    params = _check_params(spec, params, dim)
    domain = default_domain(spec) if domain is None else tuple(domain)

    # Column count only depends on d, k and the mode.
    point = _draw_inputs(1, dim, domain, seed)
    builder = _identifiability_columns if mode is Mode.IDENTIFIABILITY else _independence_columns
    _, labels = builder(spec, params, point)
    m = points if points is not None else max(POINTS_PER_COLUMN * len(labels), MIN_POINTS)

    x = _draw_inputs(m, dim, domain, seed)
    columns, labels = builder(spec, params, x)
    return FamilyMatrix(np.column_stack(columns), labels, spec, mode, params, domain, seed)


def _duplicate_pair(normalized: np.ndarray, tol: float = 1e-10):
    """First pair of columns that are equal up to sign, as (i, j, sign)."""
    gram = normalized.T @ normalized
    for i, j in itertools.combinations(range(gram.shape[0]), 2):
        if abs(gram[i, j]) >= 1.0 - tol:
            return i, j, float(np.sign(gram[i, j]))
    return None


def _single_verdict(M: FamilyMatrix, threshold: float):
    values = np.asarray(M.values, dtype=np.float64)
    norms = np.linalg.norm(values, axis=0)
    scale = norms.max() if norms.size else 0.0
    zero = np.flatnonzero(norms <= 1e-14 * scale) if scale > 0 else np.arange(norms.size)
    if zero.size:
        dependency = np.zeros(values.shape[1])
        dependency[zero[0]] = 1.0
        return 0.0, dependency, zero.tolist()

    normalized = values / norms
    _, singular, vt = np.linalg.svd(normalized, full_matrices=False)
    ratio = float(singular[-1] / singular[0])
    if ratio > threshold:
        return ratio, None, []

    # Several exact dependencies leave the null direction arbitrary, so a
    # two-term one is reported when the family has it.
    pair = _duplicate_pair(normalized)
    if pair is None:
        return ratio, vt[-1], []
    i, j, sign = pair
    dependency = np.zeros(values.shape[1])
    dependency[i], dependency[j] = 1.0, -sign
    return ratio, dependency / np.sqrt(2.0), []


def _trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence((seed, trial)).generate_state(1, dtype=np.uint64)[0])


def _combine(matrices: list[FamilyMatrix], threshold: float) -> IndependenceVerdict:
    best = None
    for M in matrices:
        ratio, dependency, zero = _single_verdict(M, threshold)
        if best is None or ratio > best[0]:
            best = (ratio, dependency, zero, M.labels)
    ratio, dependency, zero, labels = best
    independent = ratio > threshold
    if independent:
        return IndependenceVerdict(ratio, True, threshold, labels)
    # Largest coefficient positive.
    if dependency[np.argmax(np.abs(dependency))] < 0:
        dependency = -dependency
    return IndependenceVerdict(ratio, False, threshold, labels, dependency, zero)


def verdict(
        M: FamilyMatrix,
        threshold: float = DEFAULT_THRESHOLD,
        trials: int = DEFAULT_TRIALS,
) -> IndependenceVerdict:
    """Decides linear independence of the columns of M.

    Columns are scaled to unit norm and the ratio sigma_min / sigma_max of
    the singular values is compared with the threshold. Matrices built by
    `build_family` are resampled at fresh inputs and the largest ratio over
    the trials is kept. When dependent, the dependency holds coefficients
    of the unit-norm columns: a pair of equal columns if there is one,
    else the right singular vector of sigma_min. An identically zero
    column makes the family dependent on its own.
    """
    if trials < 1:
        raise InputError(f"trials must be >= 1, got {trials}.")
    matrices = [M]
    if M.can_resample:
        matrices += [M.resample(_trial_seed(M.seed, trial)) for trial in range(1, trials)]
    result = _combine(matrices, threshold)
    logger.debug("Independence verdict: ratio %.3e over %d trial(s)",
                 result.min_singular_ratio, len(matrices))
    return result


def draw_params(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random (a_j, b_j) with |a_j| in [4, 8] and b_j in [-1, 1].

    Any two draws differ by more than 1, also after flipping the sign of
    one of them.

    Raises:
        InputError: If no such draw is found, which happens for large k.
    """
    for _ in range(MAX_DRAWS):
        magnitude = rng.uniform(4.0, 8.0, size=(k, dim))
        sign = rng.choice([-1.0, 1.0], size=(k, dim))
        bias = rng.uniform(-1.0, 1.0, size=(k, 1))
        params = np.hstack([sign * magnitude, bias])
        distinct = all(min(np.linalg.norm(params[i] - params[j]),
                           np.linalg.norm(params[i] + params[j])) > MIN_SEPARATION
                       for i, j in itertools.combinations(range(k), 2))
        if distinct:
            return params
    raise InputError(f"Could not draw {k} separated expert parameters in d={dim}.")


def check_family(
        spec: ExpertSpec,
        mode: Mode = Mode.IDENTIFIABILITY,
        k: int = 1,
        dim: int = 1,
        seed: int = 0,
        trials: int = DEFAULT_TRIALS,
        threshold: float = DEFAULT_THRESHOLD,
        domain: tuple[float, float] | None = None,
) -> IndependenceVerdict:
    """Checks a family at random parameters, fresh ones for every trial.

    Args:
        spec: Expert family.
        mode: Which family to build.
        k: Number of atoms.
        dim: Input dimension.
        seed: Seed of parameters and inputs.
        trials: Number of independent draws; the best ratio is kept.
        threshold: Decision threshold.
        domain: Input box.
    """
    mode = Mode(mode)
    if trials < 1:
        raise InputError(f"trials must be >= 1, got {trials}.")
    rng = np.random.default_rng(seed)
    matrices = []
    for trial in range(trials):
        params = draw_params(k, dim, rng)
        matrices.append(build_family(spec, mode, params, seed=_trial_seed(seed, trial),
                                     domain=domain))
    result = _combine(matrices, threshold)
    logger.info("%s check of %s (k=%d): ratio %.3e, %s", mode.value, spec.label, k,
                result.min_singular_ratio,
                "independent" if result.independent else "dependent")
    return result


def dependency_equation(result: IndependenceVerdict, tol: float = 1e-3) -> str | None:
    """Readable form of the dominant dependency, e.g. `∂h/∂a = x·∂h/∂b`.

    Returns None for independent families.
    """
    terms = result.terms(tol)
    if not terms:
        return None
    if result.zero_columns:
        return f"{result.labels[result.zero_columns[0]]} = 0"
    (lead_coef, lead), rest = terms[0], terms[1:]
    if not rest:
        return f"{lead} = 0"
    pieces = []
    for coef, label in rest:
        factor = -coef / lead_coef
        if abs(abs(factor) - 1.0) < 1e-3:
            pieces.append(("-" if factor < 0 else "+", str(label)))
        else:
            pieces.append(("-" if factor < 0 else "+", f"{abs(factor):.4g}·{label}"))
    sign, text = pieces[0]
    rhs = ("-" if sign == "-" else "") + text
    for sign, text in pieces[1:]:
        rhs += f" {sign} {text}"
    return f"{lead} = {rhs}"


@dataclass
class PdeInteraction:
    """A partial differential equation linking gate and expert parameters.

    Attributes:
        present: Whether an interaction holds at the atom.
        kind: "gating-slope" (a = 0), "gating-bias-slope" (polynomial link)
            or None.
        description: The equation in words.
        residual: Largest violation of the equation at sampled inputs.
    """

    present: bool
    kind: str | None
    description: str
    residual: float


def detect_pde_interaction(
        spec: ExpertSpec,
        atom,
        points: int = 256,
        seed: int = 0,
) -> PdeInteraction:
    """Tests whether an atom carries a gating-expert interaction.

    With F(x) = exp(beta1.x) h(x, (a, b)):
    - for polynomial links (Linear, Polynomial, Ridge with Poly), the
      identity d^2 F/d beta1 d b = d F/d a holds everywhere;
    - for ridge experts with a = 0, d F/d beta1 = (sigma(b)/sigma'(b)) d F/d a.
    The identity is verified at random inputs and its residual reported.

    Args:
        spec: Expert family.
        atom: An `Atom` or a (beta0, beta1, eta) triple.
        points: Number of inputs the identity is verified at.
        seed: Seed of the inputs.

    Raises:
        InputError: If the parameters do not have the (a, b) layout.
    """
    _, beta1, eta = (atom.beta0, atom.beta1, atom.eta) if isinstance(atom, Atom) else atom
    beta1 = np.atleast_1d(np.asarray(beta1, dtype=np.float64))
    eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    d = beta1.size
    if eta.size != d + 1:
        raise InputError(f"Expert parameters of length {eta.size} lack the (a, b) layout.")

    low, high = default_domain(spec)
    x = _draw_inputs(points, d, (low, high), seed)
    params = eta.reshape(1, -1)
    gate = np.exp(x @ beta1)
    u = expert_inputs(spec, x)
    value = expert_derivative(spec, params, x, 0)[:, 0]
    slope = expert_derivative(spec, params, x, 1)[:, 0]
    # dF/da = gate g'(z) u and d^2F/(d beta1 d b) = x gate g'(z).
    d_a = gate[:, None] * slope[:, None] * u
    d_beta1 = gate[:, None] * value[:, None] * x
    d_beta1_b = gate[:, None] * slope[:, None] * x

    activation, _ = spec.link
    if spec.family is not Family.NORMALIZED_RIDGE and activation is Activation.POLY:
        residual = float(np.max(np.abs(d_beta1_b - d_a)))
        return PdeInteraction(
            True, "gating-bias-slope",
            "∂²F/∂β1∂b = ∂F/∂a: the gating slope interacts with the expert bias and slope",
            residual,
        )

    a = eta[:d]
    if spec.family is Family.RIDGE and np.all(a == 0):
        b = eta[d]
        sigma = float(activation_derivative(activation, 0, b, spec.link[1]))
        sigma_prime = float(activation_derivative(activation, 1, b, spec.link[1]))
        if sigma_prime == 0.0:
            return PdeInteraction(
                True, "gating-slope",
                "∂F/∂a vanishes at a = 0 because σ'(b) = 0",
                float(np.max(np.abs(d_a))),
            )
        coefficient = sigma / sigma_prime
        residual = float(np.max(np.abs(d_beta1 - coefficient * d_a)))
        return PdeInteraction(
            True, "gating-slope",
            f"∂F/∂β1 = (σ(b)/σ'(b))·∂F/∂a with σ(b)/σ'(b) = {coefficient:.6g} at a = 0",
            residual,
        )

    return PdeInteraction(False, None, "no gating-expert interaction", 0.0)


def classify_regime(Gstar: MixingMeasure) -> int:
    """1 when every true expert slope is nonzero, 2 when some a*_j = 0."""
    if Gstar.param_dim != Gstar.dim + 1:
        raise InputError(f"{Gstar.expert.label} experts lack the (a, b) layout.")
    return 2 if np.any(np.all(Gstar.a == 0, axis=1)) else 1
