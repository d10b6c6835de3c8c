"""Unit tests for the mixture of experts model."""

import unittest

import numpy as np

from moelab.exceptions import CapabilityError, DomainError, InputError
from moelab.model import (
    Activation,
    Atom,
    ExpertSpec,
    Family,
    InputDistribution,
    MixingMeasure,
    activation_derivative,
    reference_truth,
    expert_eval,
    expert_values,
    finite_difference_grad,
    gate_weights,
    regression_eval,
    regression_grad,
)


def close(analytic, numeric, tol=1e-6):
    """Relative agreement used by every gradient check."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.all(np.abs(analytic - numeric) <= tol * scale)


class TestExpertSpec(unittest.TestCase):
    """Test cases for parsing and printing expert families."""

    def test_labels(self):
        labels = ["linear", "polynomial-3", "ridge-sigmoid", "ridge-tanh",
                  "ridge-gelu", "ridge-poly2", "normalized-ridge-sigmoid"]
        for label in labels:
            with self.subTest(label=label):
                self.assertEqual(ExpertSpec.from_label(label).label, label)

    def test_unknown_label(self):
        with self.assertRaises(InputError):
            ExpertSpec.from_label("convolutional")

    def test_linear_is_polynomial_one(self):
        self.assertEqual(ExpertSpec.linear().link, (Activation.POLY, 1))
        self.assertEqual(ExpertSpec.polynomial(1).link, ExpertSpec.linear().link)

    def test_dict_round_trip(self):
        spec = ExpertSpec.normalized_ridge(Activation.TANH, norm_eps=1.0, zero_input="strict")
        self.assertEqual(ExpertSpec.from_dict(spec.to_dict()), spec)


class TestGateWeights(unittest.TestCase):
    """Test cases for the softmax gate."""

    def setUp(self):
        self.spec = ExpertSpec.ridge(Activation.SIGMOID)

    def test_symmetric_gate(self):
        G = MixingMeasure([0.0, 0.0], [[0.0], [0.0]], [[1.0, 0.0], [2.0, 0.0]], self.spec)
        for x in (-3.0, 0.0, 10.0):
            with self.subTest(x=x):
                np.testing.assert_allclose(gate_weights(G, [x]), [0.5, 0.5], atol=1e-15)

    def test_single_atom(self):
        G = MixingMeasure([3.0], [[2.0]], [[1.0, 0.0]], self.spec)
        np.testing.assert_allclose(gate_weights(G, [0.7]), [1.0])

    def test_zero_logits(self):
        G = reference_truth(self.spec)
        np.testing.assert_allclose(gate_weights(G, [0.0]), [0.5, 0.5], atol=1e-15)

    def test_probability_vector_for_large_logits(self):
        G = MixingMeasure([800.0, -800.0, 0.0], [[50.0], [-50.0], [0.0]],
                          [[1.0, 0.0]] * 3, self.spec)
        weights = gate_weights(G, np.linspace(-20, 20, 41)[:, None])
        self.assertTrue(np.all(np.isfinite(weights)))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_translation_invariance(self):
        G = MixingMeasure([0.3, -1.0], [[1.5], [-0.5]], [[1.0, 0.0], [2.0, 1.0]], self.spec)
        shifted = G.translated(-2.0, np.array([0.7]))
        x = np.linspace(-1, 1, 11)[:, None]
        np.testing.assert_allclose(gate_weights(G, x), gate_weights(shifted, x), atol=1e-12)

    def test_dimension_mismatch(self):
        G = reference_truth(self.spec)
        with self.assertRaises(InputError):
            gate_weights(G, [0.0, 1.0])


class TestExpertEval(unittest.TestCase):
    """Test cases for single expert evaluations."""

    def test_examples(self):
        cases = [
            (ExpertSpec.linear(), [1.0, 2.0], [0.5], 2.5),
            (ExpertSpec.ridge(Activation.SIGMOID), [1.0, 0.0], [0.0], 0.5),
            (ExpertSpec.polynomial(2), [2.0, 0.0], [1.0], 4.0),
            (ExpertSpec.ridge(Activation.TANH), [1.0, 0.0], [0.0], 0.0),
        ]
        for spec, eta, x, expected in cases:
            with self.subTest(family=spec.label):
                self.assertAlmostEqual(expert_eval(spec, eta, x), expected, places=14)

    def test_normalized_input(self):
        spec = ExpertSpec.normalized_ridge(Activation.SIGMOID)
        # a.(x/|x|) + b = 1 * 1 + (-1) = 0 for any positive x.
        self.assertAlmostEqual(expert_eval(spec, [1.0, -1.0], [3.7]), 0.5, places=14)

    def test_normalized_zero_input(self):
        zero = ExpertSpec.normalized_ridge(Activation.SIGMOID)
        self.assertAlmostEqual(expert_eval(zero, [5.0, 0.0], [0.0]), 0.5, places=14)
        strict = ExpertSpec.normalized_ridge(Activation.SIGMOID, zero_input="strict")
        with self.assertRaises(DomainError):
            expert_eval(strict, [5.0, 0.0], [0.0])

    def test_normalized_eps(self):
        spec = ExpertSpec.normalized_ridge(Activation.POLY, norm_eps=1.0)
        self.assertAlmostEqual(expert_eval(spec, [1.0, 0.0], [1.0]), 1.0 / np.sqrt(2.0))

    def test_wrong_parameter_length(self):
        with self.assertRaises(InputError):
            expert_eval(ExpertSpec.linear(), [1.0, 2.0, 3.0], [0.5])


class TestActivationDerivative(unittest.TestCase):
    """Test cases for exact activation derivatives."""

    def test_examples(self):
        cases = [
            (Activation.SIGMOID, 1, 0.25),
            (Activation.SIGMOID, 2, 0.0),
            (Activation.SIGMOID, 3, -0.125),
            (Activation.TANH, 1, 1.0),
            (Activation.TANH, 3, -2.0),
            (Activation.GELU, 0, 0.0),
            (Activation.GELU, 1, 0.5),
            (Activation.GELU, 2, 2.0 / np.sqrt(2.0 * np.pi)),
        ]
        for kind, order, expected in cases:
            with self.subTest(kind=kind.value, order=order):
                self.assertAlmostEqual(float(activation_derivative(kind, order, 0.0)),
                                       expected, places=14)

    def test_poly(self):
        z = np.array([-1.5, 0.3, 2.0])
        np.testing.assert_allclose(activation_derivative(Activation.POLY, 2, z, degree=3),
                                   6 * z)
        np.testing.assert_array_equal(activation_derivative(Activation.POLY, 4, z, degree=3),
                                      np.zeros(3))

    def test_matches_finite_differences(self):
        z = np.linspace(-3, 3, 13)
        step = 1e-5
        for kind in (Activation.SIGMOID, Activation.TANH):
            for order in range(1, 7):
                with self.subTest(kind=kind.value, order=order):
                    numeric = (activation_derivative(kind, order - 1, z + step)
                               - activation_derivative(kind, order - 1, z - step)) / (2 * step)
                    self.assertTrue(close(activation_derivative(kind, order, z), numeric))

    def test_unsupported_order(self):
        for kind, order in ((Activation.GELU, 3), (Activation.SIGMOID, 7),
                            (Activation.TANH, -1)):
            with self.subTest(kind=kind.value, order=order):
                with self.assertRaises(CapabilityError):
                    activation_derivative(kind, order, 0.0)


class TestRegression(unittest.TestCase):
    """Test cases for f_G and its gradient."""

    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.specs = [
            ExpertSpec.linear(),
            ExpertSpec.polynomial(3),
            ExpertSpec.ridge(Activation.SIGMOID),
            ExpertSpec.ridge(Activation.TANH),
            ExpertSpec.ridge(Activation.GELU),
            ExpertSpec.normalized_ridge(Activation.SIGMOID),
        ]

    def random_measure(self, spec, k=3, d=2):
        return MixingMeasure(
            self.rng.normal(size=k),
            self.rng.normal(size=(k, d)),
            self.rng.normal(scale=0.7, size=(k, d + 1)),
            spec,
        )

    def test_reference_truth_at_zero(self):
        sigmoid = reference_truth(ExpertSpec.ridge(Activation.SIGMOID))
        self.assertAlmostEqual(regression_eval(sigmoid, [0.0]), 0.8807970779778823,
                               places=12)
        linear = reference_truth(ExpertSpec.linear())
        self.assertAlmostEqual(regression_eval(linear, [0.0]), 2.0, places=14)

    def test_single_atom_is_expert(self):
        spec = ExpertSpec.ridge(Activation.TANH)
        G = MixingMeasure([1.3], [[-2.0]], [[0.4, -0.1]], spec)
        for x in (-1.0, 0.2, 0.9):
            with self.subTest(x=x):
                self.assertAlmostEqual(regression_eval(G, [x]),
                                       expert_eval(spec, [0.4, -0.1], [x]), places=14)

    def test_bounded_by_experts(self):
        for spec in self.specs:
            with self.subTest(family=spec.label):
                G = self.random_measure(spec)
                x = self.rng.uniform(0.2, 1.0, size=(50, 2))
                values = regression_eval(G, x)
                experts = expert_values(spec, G.eta, x)
                self.assertTrue(np.all(values <= experts.max(axis=1) + 1e-12))
                self.assertTrue(np.all(values >= experts.min(axis=1) - 1e-12))

    def test_gradient_matches_finite_differences(self):
        for spec in self.specs:
            with self.subTest(family=spec.label):
                G = self.random_measure(spec)
                x = self.rng.uniform(0.2, 1.0, size=(5, 2))
                analytic = regression_grad(G, x).flat()
                numeric = finite_difference_grad(G, x)
                self.assertTrue(close(analytic, numeric))

    def test_gradient_on_random_draws(self):
        activations = (Activation.SIGMOID, Activation.TANH, Activation.GELU)
        builders = (
            ExpertSpec.linear,
            lambda: ExpertSpec.polynomial(int(self.rng.integers(1, 4))),
            lambda: ExpertSpec.ridge(activations[self.rng.integers(3)]),
            lambda: ExpertSpec.normalized_ridge(activations[self.rng.integers(3)]),
        )
        failures = []
        for draw in range(1000):
            spec = builders[draw % len(builders)]()
            G = self.random_measure(spec, k=int(self.rng.integers(1, 5)),
                                    d=int(self.rng.integers(1, 4)))
            x = self.rng.uniform(0.2, 1.0, size=G.dim)
            if not close(regression_grad(G, x).flat(), finite_difference_grad(G, x)):
                failures.append((draw, spec.label))
        self.assertEqual(failures, [])

    def test_single_input_gradient(self):
        G = self.random_measure(ExpertSpec.ridge(Activation.SIGMOID))
        grad = regression_grad(G, [0.3, 0.6])
        self.assertIsInstance(grad.value, float)
        self.assertEqual(grad.d_eta.shape, (3, 3))
        self.assertTrue(close(grad.flat(), finite_difference_grad(G, [0.3, 0.6])))

    def test_single_atom_bias_gradient_vanishes(self):
        G = MixingMeasure([0.5], [[1.0]], [[1.0, 0.5]], ExpertSpec.ridge(Activation.SIGMOID))
        self.assertAlmostEqual(float(regression_grad(G, [0.4]).d_beta0[0]), 0.0, places=15)

    def test_equal_experts_bias_gradient_vanishes(self):
        G = MixingMeasure([0.0, 1.0], [[1.0], [0.0]], [[-1.0, 2.0], [1.0, 2.0]],
                          ExpertSpec.ridge(Activation.SIGMOID))
        np.testing.assert_allclose(regression_grad(G, [0.0]).d_beta0, [0.0, 0.0], atol=1e-15)

    def test_linear_equals_polynomial_one(self):
        linear = self.random_measure(ExpertSpec.linear())
        poly = MixingMeasure(linear.beta0, linear.beta1, linear.eta, ExpertSpec.polynomial(1))
        x = self.rng.uniform(size=(20, 2))
        np.testing.assert_allclose(regression_eval(linear, x), regression_eval(poly, x),
                                   rtol=0, atol=1e-15)
        np.testing.assert_allclose(regression_grad(linear, x).flat(),
                                   regression_grad(poly, x).flat(), rtol=0, atol=1e-15)


class TestMixingMeasure(unittest.TestCase):
    """Test cases for mixing measure containers."""

    def setUp(self):
        self.spec = ExpertSpec.ridge(Activation.SIGMOID)
        self.truth = reference_truth(self.spec)

    def test_reference_truth(self):
        self.assertEqual(self.truth.k, 2)
        np.testing.assert_array_equal(self.truth.a, [[-1.0], [1.0]])
        np.testing.assert_array_equal(self.truth.b, [2.0, 2.0])
        np.testing.assert_array_equal(self.truth.weights, [1.0, 1.0])

    def test_flat_round_trip(self):
        theta = self.truth.flat()
        self.assertEqual(theta.size, 2 + 2 + 4)
        np.testing.assert_array_equal(self.truth.with_flat(theta).flat(), theta)

    def test_dict_round_trip(self):
        restored = MixingMeasure.from_dict(self.truth.to_dict())
        np.testing.assert_array_equal(restored.flat(), self.truth.flat())
        self.assertEqual(restored.expert, self.spec)

    def test_atoms(self):
        atoms = self.truth.atoms
        self.assertIsInstance(atoms[0], Atom)
        rebuilt = MixingMeasure.from_atoms(atoms, self.spec)
        np.testing.assert_array_equal(rebuilt.flat(), self.truth.flat())

    def test_invalid_shapes(self):
        with self.assertRaises(InputError):
            MixingMeasure([0.0, 0.0], [[1.0]], [[1.0, 2.0], [1.0, 2.0]], self.spec)
        with self.assertRaises(InputError):
            MixingMeasure([0.0], [[1.0]], [[1.0, 2.0, 3.0]], self.spec)

    def test_family(self):
        self.assertIs(self.truth.expert.family, Family.RIDGE)


class TestInputDistribution(unittest.TestCase):
    """Test cases for input distributions."""

    def test_uniform(self):
        mu = InputDistribution.uniform(2, -1.0, 1.0)
        x = mu.sample(100, np.random.default_rng(0))
        self.assertEqual(x.shape, (100, 2))
        self.assertTrue(np.all((x >= -1.0) & (x <= 1.0)))

    def test_samples(self):
        mu = InputDistribution.from_samples([[0.1], [0.2], [0.3]])
        x = mu.sample(10, np.random.default_rng(0))
        self.assertTrue(set(x.ravel()) <= {0.1, 0.2, 0.3})

    def test_empty_box(self):
        with self.assertRaises(InputError):
            InputDistribution.uniform(1, 1.0, 1.0)


if __name__ == "__main__":
    unittest.main()
