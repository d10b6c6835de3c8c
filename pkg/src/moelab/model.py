"""Softmax gating mixture of experts regression functions.

This module includes:
- Expert families (linear, polynomial, ridge, normalized ridge) and the
  activations they are built on.
- Mixing measures, i.e. the ordered atoms (beta0, beta1, eta) of a model.
- Evaluation of the softmax gate, the experts and the regression function.
- Exact activation derivatives and analytic parameter gradients, with a
  central finite-difference oracle to check them against.

Every ridge-like expert has the layout eta = (a, b) with a of length d,
so that h(x, eta) = g(a.u + b) where u is the (possibly normalized) input
and g the link of the family. Linear is Polynomial(1), and Polynomial(p)
is a ridge expert with the power link z**p.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from math import perm

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import expit, ndtr, softmax

from moelab.exceptions import CapabilityError, DomainError, InputError

MAX_DERIVATIVE_ORDER = 6
MAX_GELU_ORDER = 2

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Family(Enum):
    """Expert families h(x, eta)."""

    LINEAR = "linear"
    POLYNOMIAL = "polynomial"
    RIDGE = "ridge"
    NORMALIZED_RIDGE = "normalized-ridge"


class Activation(Enum):
    """Scalar activations sigma used by ridge experts."""

    SIGMOID = "sigmoid"
    TANH = "tanh"
    GELU = "gelu"
    POLY = "poly"


@dataclass(frozen=True)
class ExpertSpec:
    """Which expert family is in force.

    Attributes:
        family: The expert family.
        activation: Activation of ridge experts. Ignored by the linear and
            polynomial families, whose link is the power z**degree.
        degree: Power p of the polynomial family or of the Poly activation.
        norm_eps: Stabilizer of the normalized input x / sqrt(|x|^2 + eps).
            Zero gives the pure direction x / |x|.
        zero_input: Convention of the normalized ridge family at x = 0,
            either "zero" (x / |x| := 0) or "strict" (raise DomainError).
    """

    family: Family
    activation: Activation = Activation.SIGMOID
    degree: int = 1
    norm_eps: float = 0.0
    zero_input: str = "zero"

    def __post_init__(self):
        if self.degree < 1:
            raise InputError(f"Polynomial degree must be >= 1, got {self.degree}.")
        if self.norm_eps < 0:
            raise InputError(f"norm_eps must be non-negative, got {self.norm_eps}.")
        if self.zero_input not in ("zero", "strict"):
            raise InputError(f"Unknown zero-input convention '{self.zero_input}'.")

    @classmethod
    def linear(cls) -> "ExpertSpec":
        """Linear experts a.x + b."""
        return cls(Family.LINEAR, Activation.POLY, 1)

    @classmethod
    def polynomial(cls, degree: int) -> "ExpertSpec":
        """Polynomial experts (a.x + b)**degree."""
        return cls(Family.POLYNOMIAL, Activation.POLY, degree)

    @classmethod
    def ridge(cls, activation: Activation, degree: int = 1) -> "ExpertSpec":
        """Ridge experts sigma(a.x + b)."""
        return cls(Family.RIDGE, activation, degree)

    @classmethod
    def normalized_ridge(
            cls,
            activation: Activation,
            norm_eps: float = 0.0,
            zero_input: str = "zero",
    ) -> "ExpertSpec":
        """Ridge experts on normalized input, sigma(a.x/|x| + b)."""
        return cls(Family.NORMALIZED_RIDGE, activation, 1, norm_eps, zero_input)

    @classmethod
    def from_label(cls, label: str, norm_eps: float = 0.0) -> "ExpertSpec":
        """Parses labels such as `linear`, `polynomial-3`, `ridge-sigmoid`,
        `ridge-poly2` or `normalized-ridge-tanh`.

        Raises:
            InputError: If the label does not name a supported family.
        """
        text = label.strip().lower()
        if text == "linear":
            return cls.linear()
        if text.startswith("polynomial-"):
            return cls.polynomial(_parse_degree(text[len("polynomial-"):], label))
        for prefix, family in (("normalized-ridge-", Family.NORMALIZED_RIDGE),
                               ("ridge-", Family.RIDGE)):
            if text.startswith(prefix):
                activation, degree = parse_activation(text[len(prefix):])
                if family is Family.NORMALIZED_RIDGE:
                    return cls(family, activation, degree, norm_eps)
                return cls(family, activation, degree)
        raise InputError(f"Unknown expert family '{label}'.")

    @property
    def link(self) -> tuple[Activation, int]:
        """The scalar map g applied to a.u + b, as (activation, degree)."""
        if self.family in (Family.LINEAR, Family.POLYNOMIAL):
            return Activation.POLY, self.degree
        return self.activation, self.degree

    @property
    def label(self) -> str:
        """Inverse of `from_label`."""
        if self.family is Family.LINEAR:
            return "linear"
        if self.family is Family.POLYNOMIAL:
            return f"polynomial-{self.degree}"
        return f"{self.family.value}-{activation_label(self.activation, self.degree)}"

    def param_dim(self, dim: int) -> int:
        """Length q of eta for inputs of dimension `dim`."""
        return dim + 1

    def to_dict(self) -> dict:
        return {
            "family": self.label,
            "norm_eps": self.norm_eps,
            "zero_input": self.zero_input,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExpertSpec":
        spec = cls.from_label(data["family"], float(data.get("norm_eps", 0.0)))
        if data.get("zero_input", "zero") != spec.zero_input:
            spec = cls(spec.family, spec.activation, spec.degree, spec.norm_eps,
                       data["zero_input"])
        return spec


def _parse_degree(text: str, label: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise InputError(f"Invalid polynomial degree in '{label}'.") from exc


def parse_activation(text: str) -> tuple[Activation, int]:
    """Parses `sigmoid`, `tanh`, `gelu` or `polyP` into (activation, degree)."""
    text = text.strip().lower()
    if text.startswith("poly"):
        return Activation.POLY, _parse_degree(text[len("poly"):] or "1", text)
    try:
        return Activation(text), 1
    except ValueError as exc:
        raise InputError(f"Unknown activation '{text}'.") from exc


def activation_label(activation: Activation, degree: int = 1) -> str:
    if activation is Activation.POLY:
        return f"poly{degree}"
    return activation.value


@lru_cache(maxsize=None)
def _sigmoid_polynomial(order: int) -> Polynomial:
    # sigma^(k) = P_k(sigma) with P_{k+1} = P_k' * s(1 - s).
    if order == 0:
        return Polynomial([0.0, 1.0])
    return _sigmoid_polynomial(order - 1).deriv() * Polynomial([0.0, 1.0, -1.0])


@lru_cache(maxsize=None)
def _tanh_polynomial(order: int) -> Polynomial:
    # tanh^(k) = T_k(tanh) with T_{k+1} = T_k' * (1 - t^2).
    if order == 0:
        return Polynomial([0.0, 1.0])
    return _tanh_polynomial(order - 1).deriv() * Polynomial([1.0, 0.0, -1.0])


def max_order(activation: Activation) -> int:
    """Highest derivative order available for `activation`."""
    if activation is Activation.GELU:
        return MAX_GELU_ORDER
    return MAX_DERIVATIVE_ORDER


def activation_derivative(
        kind: Activation,
        order: int,
        z,
        degree: int = 1,
) -> np.ndarray:
    """Exact `order`-th derivative of an activation; order 0 is the activation.

    Args:
        kind: The activation.
        order: Derivative order, 0..6 (0..2 for GELU).
        z: Scalar or array of arguments.
        degree: Power p of the Poly activation z**p.

    Returns:
        Array of the same shape as `z`.

    Raises:
        CapabilityError: If the order is not supported for this activation.
    """
    if order < 0 or order > max_order(kind):
        raise CapabilityError(
            f"Derivative of order {order} is not available for "
            f"{activation_label(kind, degree)} (max {max_order(kind)})."
        )
    z = np.asarray(z, dtype=np.float64)

    if kind is Activation.SIGMOID:
        return _sigmoid_polynomial(order)(expit(z))
    if kind is Activation.TANH:
        return _tanh_polynomial(order)(np.tanh(z))
    if kind is Activation.GELU:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        if order == 0:
            return z * ndtr(z)
        if order == 1:
            return ndtr(z) + z * pdf
        return pdf * (2.0 - z * z)
    # Poly(p): p!/(p-k)! z^(p-k), zero beyond the degree.
    if order > degree:
        return np.zeros_like(z)
    return perm(degree, order) * np.power(z, degree - order)


@dataclass(frozen=True)
class Atom:
    """One component of a mixing measure.

    Attributes:
        beta0: Gating bias; the atom's weight is exp(beta0).
        beta1: Gating slope, length d.
        eta: Expert parameters, length q = d + 1 laid out as (a, b).
    """

    beta0: float
    beta1: np.ndarray
    eta: np.ndarray


@dataclass(eq=False)
class MixingMeasure:
    """Ordered atoms sharing one expert family; the object G of the model.

    Parameters are stored as float64 arrays: `beta0` (k,), `beta1` (k, d)
    and `eta` (k, q). Instances are treated as immutable.
    """

    beta0: np.ndarray
    beta1: np.ndarray
    eta: np.ndarray
    expert: ExpertSpec = field(default_factory=ExpertSpec.linear)

    def __post_init__(self):
        self.beta0 = np.array(self.beta0, dtype=np.float64).reshape(-1)
        k = self.beta0.shape[0]
        try:
            self.beta1 = np.array(self.beta1, dtype=np.float64).reshape(k, -1)
            self.eta = np.array(self.eta, dtype=np.float64).reshape(k, -1)
        except ValueError as exc:
            raise InputError(f"Gating and expert parameters do not describe {k} atoms.") from exc

        if k < 1:
            raise InputError("A mixing measure needs at least one atom.")
        if self.eta.shape[1] != self.expert.param_dim(self.beta1.shape[1]):
            raise InputError(
                f"Expert parameters have length {self.eta.shape[1]}, "
                f"expected {self.expert.param_dim(self.beta1.shape[1])} "
                f"for inputs of dimension {self.beta1.shape[1]}."
            )
        if not np.all(np.isfinite(self.beta0)):
            raise InputError("Gating biases beta0 must be finite.")

    @classmethod
    def from_atoms(cls, atoms: list[Atom], expert: ExpertSpec) -> "MixingMeasure":
        if not atoms:
            raise InputError("A mixing measure needs at least one atom.")
        dims = {np.size(atom.beta1) for atom in atoms}
        if len(dims) != 1:
            raise InputError(f"Atoms have different input dimensions {sorted(dims)}.")
        return cls(
            [atom.beta0 for atom in atoms],
            [np.ravel(atom.beta1) for atom in atoms],
            [np.ravel(atom.eta) for atom in atoms],
            expert,
        )

    @property
    def atoms(self) -> list[Atom]:
        return [
            Atom(float(self.beta0[i]), self.beta1[i].copy(), self.eta[i].copy())
            for i in range(self.k)
        ]

    @property
    def k(self) -> int:
        return self.beta0.shape[0]

    @property
    def dim(self) -> int:
        return self.beta1.shape[1]

    @property
    def param_dim(self) -> int:
        return self.eta.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """exp(beta0) of every atom."""
        return np.exp(self.beta0)

    @property
    def a(self) -> np.ndarray:
        return self.eta[:, :self.dim]

    @property
    def b(self) -> np.ndarray:
        return self.eta[:, self.dim]

    @property
    def omega(self) -> np.ndarray:
        """Concatenated (beta1, eta) per atom, shape (k, d + q)."""
        return np.hstack([self.beta1, self.eta])

    def flat(self) -> np.ndarray:
        """All parameters as one vector ordered (beta0, beta1, eta)."""
        return np.concatenate([self.beta0, self.beta1.ravel(), self.eta.ravel()])

    def with_flat(self, vector: np.ndarray) -> "MixingMeasure":
        """Inverse of `flat` for a measure of the same shape."""
        vector = np.asarray(vector, dtype=np.float64)
        k, d, q = self.k, self.dim, self.param_dim
        if vector.shape != (k * (1 + d + q),):
            raise InputError(
                f"Flat parameter vector has shape {vector.shape}, "
                f"expected ({k * (1 + d + q)},)."
            )
        return MixingMeasure(
            vector[:k],
            vector[k:k + k * d].reshape(k, d),
            vector[k + k * d:].reshape(k, q),
            self.expert,
        )

    def copy(self) -> "MixingMeasure":
        return MixingMeasure(self.beta0.copy(), self.beta1.copy(), self.eta.copy(),
                             self.expert)

    def translated(self, shift0: float, shift1: np.ndarray) -> "MixingMeasure":
        """Subtracts (shift0, shift1) from the gating parameters of every atom."""
        return MixingMeasure(self.beta0 - shift0, self.beta1 - np.asarray(shift1),
                             self.eta.copy(), self.expert)

    def to_dict(self) -> dict:
        return {
            "expert": self.expert.to_dict(),
            "atoms": [
                {
                    "beta0": float(self.beta0[i]),
                    "beta1": self.beta1[i].tolist(),
                    "eta": self.eta[i].tolist(),
                }
                for i in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixingMeasure":
        expert = ExpertSpec.from_dict(data["expert"])
        atoms = [
            Atom(float(atom["beta0"]), np.asarray(atom["beta1"], dtype=np.float64),
                 np.asarray(atom["eta"], dtype=np.float64))
            for atom in data["atoms"]
        ]
        return cls.from_atoms(atoms, expert)


def reference_truth(expert: ExpertSpec) -> MixingMeasure:
    """The two-atom ground truth of the simulation study (d = 1).

    beta0* = (0, 0), beta1* = (1, 0), a* = (-1, 1), b* = (2, 2).
    """
    return MixingMeasure(
        beta0=[0.0, 0.0],
        beta1=[[1.0], [0.0]],
        eta=[[-1.0, 2.0], [1.0, 2.0]],
        expert=expert,
    )


@dataclass(eq=False)
class InputDistribution:
    """Distribution mu of the inputs.

    Either a uniform box [low, high]^dim, or an explicit set of samples
    which is then used with equal weights.
    """

    kind: str = "uniform"
    dim: int = 1
    low: float = 0.0
    high: float = 1.0
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "samples":
            if self.samples is None:
                raise InputError("A sample-set distribution needs samples.")
            self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
            self.dim = self.samples.shape[1]
        elif self.kind == "uniform":
            if not self.low < self.high:
                raise InputError(f"Empty uniform box [{self.low}, {self.high}].")
        else:
            raise InputError(f"Unsupported input distribution '{self.kind}'.")

    @classmethod
    def uniform(cls, dim: int = 1, low: float = 0.0, high: float = 1.0):
        return cls("uniform", dim, low, high)

    @classmethod
    def from_samples(cls, samples) -> "InputDistribution":
        return cls("samples", samples=samples)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draws n i.i.d. inputs, shape (n, dim)."""
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size=(n, self.dim))
        idx = rng.integers(0, self.samples.shape[0], size=n)
        return self.samples[idx]

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "dim": self.dim, "low": self.low, "high": self.high}
        return {"kind": "samples", "size": int(self.samples.shape[0]), "dim": self.dim}


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    """Returns x as an (n, dim) array and whether it was a single point."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    batch = x.reshape(1, -1) if single else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise InputError(
            f"Input has shape {x.shape}, expected ({dim},) or (n, {dim})."
        )
    return batch, single


def expert_inputs(spec: ExpertSpec, x: np.ndarray) -> np.ndarray:
    """The vector u that the expert's slope a multiplies, shape (n, d)."""
    if spec.family is not Family.NORMALIZED_RIDGE:
        return x
    norms = np.sqrt(np.sum(x * x, axis=1) + spec.norm_eps)
    zero = norms == 0.0
    if np.any(zero) and spec.zero_input == "strict":
        raise DomainError("Normalized ridge expert evaluated at x = 0.")
    safe = np.where(zero, 1.0, norms)
    return np.where(zero[:, None], 0.0, x / safe[:, None])


def _expert_argument(spec: ExpertSpec, eta: np.ndarray, x: np.ndarray):
    """Returns (u, z) with z = a.u + b of shape (n, k)."""
    d = x.shape[1]
    u = expert_inputs(spec, x)
    return u, u @ eta[:, :d].T + eta[:, d]


def expert_derivative(
        spec: ExpertSpec,
        eta: np.ndarray,
        x: np.ndarray,
        order: int,
) -> np.ndarray:
    """g^(order)(a_j.u + b_j) for a batch x (n, d) and eta (k, q); (n, k)."""
    _, z = _expert_argument(spec, eta, x)
    activation, degree = spec.link
    return activation_derivative(activation, order, z, degree)


def expert_values(spec: ExpertSpec, eta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """h(x_n, eta_j) for a batch x (n, d) and eta (k, q); shape (n, k)."""
    return expert_derivative(spec, eta, x, 0)


def expert_eval(spec: ExpertSpec, eta, x) -> float:
    """h(x, eta) for a single input.

    Raises:
        InputError: If eta or x have the wrong length.
        DomainError: For the strict normalized ridge convention at x = 0.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    if x.ndim != 1 or eta.shape != (spec.param_dim(x.shape[0]),):
        raise InputError(
            f"Expert parameters of shape {eta.shape} do not match "
            f"input of shape {x.shape} for {spec.label} experts."
        )
    return float(expert_values(spec, eta.reshape(1, -1), x.reshape(1, -1))[0, 0])


def gate_weights(G: MixingMeasure, x) -> np.ndarray:
    """Softmax over beta1_i.x + beta0_i; shape (k,) or (n, k) for a batch."""
    batch, single = _as_batch(x, G.dim)
    weights = softmax(batch @ G.beta1.T + G.beta0, axis=1)
    return weights[0] if single else weights


def regression_eval(G: MixingMeasure, x):
    """f_G(x) = sum_i gate_i(x) h(x, eta_i); a float, or (n,) for a batch."""
    batch, single = _as_batch(x, G.dim)
    values = np.sum(gate_weights(G, batch) * expert_values(G.expert, G.eta, batch),
                    axis=1)
    return float(values[0]) if single else values


@dataclass(eq=False)
class RegressionGradient:
    """Partial derivatives of f_G at a batch of inputs.

    Attributes:
        value: f_G at the inputs, (n,).
        d_beta0: (n, k) derivatives with respect to beta0_i.
        d_beta1: (n, k, d) derivatives with respect to beta1_i.
        d_eta: (n, k, q) derivatives with respect to eta_i.
    """

    value: np.ndarray
    d_beta0: np.ndarray
    d_beta1: np.ndarray
    d_eta: np.ndarray

    def flat(self) -> np.ndarray:
        """(n, P) gradient in `MixingMeasure.flat` order, (P,) for a single input."""
        if self.d_beta0.ndim == 1:
            return np.concatenate([self.d_beta0, self.d_beta1.ravel(), self.d_eta.ravel()])
        n = self.d_beta0.shape[0]
        return np.hstack([
            self.d_beta0,
            self.d_beta1.reshape(n, -1),
            self.d_eta.reshape(n, -1),
        ])


def regression_grad(G: MixingMeasure, x):
    """Analytic gradient of f_G(x) with respect to every atom's parameters.

    d f / d beta0_i = w_i (h_i - f), d f / d beta1_i = x w_i (h_i - f) and
    d f / d eta_i = w_i dh/d eta (x, eta_i).

    Returns:
        A `RegressionGradient`; for a single input its arrays drop the
        leading batch axis.
    """
    batch, single = _as_batch(x, G.dim)
    weights = gate_weights(G, batch)
    u, z = _expert_argument(G.expert, G.eta, batch)
    activation, degree = G.expert.link
    values = activation_derivative(activation, 0, z, degree)
    slopes = activation_derivative(activation, 1, z, degree)
    f = np.sum(weights * values, axis=1)

    residual = weights * (values - f[:, None])
    u_ext = np.hstack([u, np.ones((batch.shape[0], 1))])
    grad = RegressionGradient(
        value=f,
        d_beta0=residual,
        d_beta1=residual[:, :, None] * batch[:, None, :],
        d_eta=(weights * slopes)[:, :, None] * u_ext[:, None, :],
    )
    if single:
        return RegressionGradient(float(f[0]), grad.d_beta0[0], grad.d_beta1[0],
                                  grad.d_eta[0])
    return grad


def finite_difference_grad(G: MixingMeasure, x, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of f_G(x) over `G.flat()`.

    Returns:
        (P,) for a single input, (n, P) for a batch.
    """
    batch, single = _as_batch(x, G.dim)
    theta = G.flat()
    grad = np.empty((batch.shape[0], theta.size))
    for j in range(theta.size):
        shift = np.zeros_like(theta)
        shift[j] = step
        plus = regression_eval(G.with_flat(theta + shift), batch)
        minus = regression_eval(G.with_flat(theta - shift), batch)
        grad[:, j] = (plus - minus) / (2 * step)
    return grad[0] if single else grad
