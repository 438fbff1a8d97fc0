import unittest

import numpy as np

from fusionproject.exceptions import ConfigError, DimensionMismatch

from .serializers import LossSpecSerializer, loss_to_dict
from .specs import AveragedLoss, Huber, Quadratic, SquaredHinge, StackedLosses, loss_grad, loss_value


def central_difference(spec, x, h=1e-6):
    grad = np.zeros_like(x)
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        grad[k] = (spec.value(x + step) - spec.value(x - step)) / (2 * h)
    return grad


def sample_losses(rng):
    features = rng.normal(size=(15, 2))
    labels = np.where(rng.random(15) < 0.5, -1, 1)
    return [
        Quadratic(rng.normal(size=3)),
        Quadratic(rng.normal(size=3), scale=2.5),
        SquaredHinge(features, labels, reg_c=1e-3),
        SquaredHinge(features, labels, reg_c=0.0),
        Huber(rng.normal(size=3), delta=0.7),
    ]


class TestLossValues(unittest.TestCase):

    # A quadratic vanishes at its anchor
    def test_quadratic_value_at_anchor(self):
        self.assertEqual(loss_value(Quadratic([1.0, 2.0]), [1.0, 2.0]), 0.0)

    # The all-zero classifier pays one full unit of hinge slack on a single point
    def test_squared_hinge_zero_classifier(self):
        loss = SquaredHinge([[1.0, 0.0]], [1], reg_c=0.0)
        self.assertEqual(loss_value(loss, [0.0, 0.0, 0.0]), 1.0)

    # Outside its radius the Huber cost is linear in the distance
    def test_huber_linear_zone(self):
        self.assertAlmostEqual(loss_value(Huber([0.0], delta=1.0), [3.0]), 2.5, places=12)

    # Huber agrees with a dense tabulation of its piecewise definition
    def test_huber_tabulation(self):
        loss = Huber([0.0], delta=1.0)
        for r in np.linspace(-4, 4, 81):
            expected = 0.5 * r * r if abs(r) <= 1 else abs(r) - 0.5
            self.assertAlmostEqual(loss_value(loss, [r]), expected, places=12)

    # A wrong dimension is reported with the expected and supplied sizes
    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch) as ctx:
            loss_value(Quadratic([0.0, 0.0]), [1.0, 2.0, 3.0])
        self.assertEqual((ctx.exception.expected, ctx.exception.got), (2, 3))
        self.assertIn("dimension", ctx.exception.detail)


class TestLossGradients(unittest.TestCase):

    # The quadratic gradient is x - a and vanishes at the anchor
    def test_quadratic_gradient(self):
        loss = Quadratic([1.0, -2.0])
        np.testing.assert_allclose(loss_grad(loss, [3.0, 0.0]), [2.0, 2.0])
        np.testing.assert_allclose(loss_grad(loss, [1.0, -2.0]), [0.0, 0.0])

    # The zero classifier on one positive point has gradient ((-2, 0), 2)
    def test_squared_hinge_gradient_at_zero(self):
        loss = SquaredHinge([[1.0, 0.0]], [1], reg_c=0.0)
        np.testing.assert_allclose(loss_grad(loss, np.zeros(3)), [-2.0, 0.0, 2.0])
        np.testing.assert_allclose(central_difference(loss, np.zeros(3)), [-2.0, 0.0, 2.0], rtol=1e-4)

    # The Huber gradient saturates at the sign outside the quadratic zone
    def test_huber_gradient_outside(self):
        np.testing.assert_allclose(loss_grad(Huber([0.0], delta=1.0), [3.0]), [1.0])

    # Central differences agree with the exact gradients of every kind
    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(0)
        for loss in sample_losses(rng):
            for _ in range(200):
                x = rng.normal(scale=2.0, size=loss.dim)
                exact = loss.grad(x)
                approx = central_difference(loss, x)
                self.assertLessEqual(np.abs(exact - approx).max(), 1e-4 * max(1.0, np.abs(exact).max()))

    # Gradient differences never exceed the declared Lipschitz constant
    def test_lipschitz_certificate(self):
        rng = np.random.default_rng(1)
        for loss in sample_losses(rng):
            for _ in range(200):
                x, y = rng.normal(scale=3.0, size=(2, loss.dim))
                lhs = np.linalg.norm(loss.grad(x) - loss.grad(y))
                self.assertLessEqual(lhs, loss.lipschitz_L * np.linalg.norm(x - y) * (1 + 1e-9))

    # Midpoint values never exceed the average of endpoint values
    def test_convexity_spot_check(self):
        rng = np.random.default_rng(2)
        for loss in sample_losses(rng):
            for _ in range(200):
                x, y = rng.normal(scale=3.0, size=(2, loss.dim))
                self.assertLessEqual(loss.value(0.5 * x + 0.5 * y), 0.5 * loss.value(x) + 0.5 * loss.value(y) + 1e-12)

    # Two quadratics have a constant gradient gap a_j - a_i
    def test_quadratic_gradient_gap_constant(self):
        rng = np.random.default_rng(3)
        fi, fj = Quadratic([0.0, 1.0]), Quadratic([2.0, -1.0])
        for x in rng.normal(size=(20, 2)):
            np.testing.assert_allclose(fi.grad(x) - fj.grad(x), [2.0, -2.0])


class TestCurvatureMetadata(unittest.TestCase):

    # Unit quadratics have L = mu = 1 and scaled ones carry their scale
    def test_quadratic_constants(self):
        self.assertEqual((Quadratic([0.0]).lipschitz_L, Quadratic([0.0]).strong_mu), (1.0, 1.0))
        self.assertEqual(Quadratic([0.0], scale=3.0).strong_mu, 3.0)

    # The squared hinge bound is c + 2/m times the top eigenvalue of the augmented Gram matrix
    def test_squared_hinge_lipschitz_formula(self):
        features = np.array([[1.0, 0.0], [0.0, 2.0]])
        loss = SquaredHinge(features, [1, -1], reg_c=0.5)
        rows = np.array([[1.0, 0.0, -1.0], [0.0, -2.0, 1.0]])
        expected = 0.5 + 2.0 / 2 * np.linalg.eigvalsh(rows.T @ rows)[-1]
        self.assertAlmostEqual(loss.lipschitz_L, expected, places=12)
        self.assertEqual(loss.strong_mu, 0.5)
        self.assertFalse(loss.strong_mu_is_global)

    # Labels other than +1 and -1 are rejected
    def test_squared_hinge_rejects_labels(self):
        with self.assertRaises(ConfigError):
            SquaredHinge([[1.0, 0.0]], [2])

    # An averaged loss of quadratics is quadratic around the weighted anchor
    def test_averaged_quadratic_form(self):
        g = AveragedLoss((Quadratic([0.0]), Quadratic([4.0])))
        scale, center = g.quadratic_form()
        self.assertEqual(scale, 1.0)
        np.testing.assert_allclose(center, [2.0])
        self.assertAlmostEqual(g.value([2.0]), 2.0)
        self.assertEqual(g.strong_mu, 1.0)


class TestStackedLosses(unittest.TestCase):

    # Batched member values and gradients match per-loss evaluation
    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(4)
        losses = sample_losses(rng)
        stack = StackedLosses(losses)
        X = rng.normal(size=(len(losses), 3))
        np.testing.assert_allclose(stack.member_values(X), [l.value(x) for l, x in zip(losses, X)], rtol=1e-12)
        np.testing.assert_allclose(stack.member_grads(X), [l.grad(x) for l, x in zip(losses, X)], rtol=1e-12, atol=1e-14)

    # Block gradients sum the members assigned to each block, including batch axes
    def test_block_sums_with_batch_axis(self):
        rng = np.random.default_rng(5)
        losses = sample_losses(rng)
        stack = StackedLosses(losses, assignment=[0, 1, 0, 1, 1], n_blocks=2)
        W = rng.normal(size=(4, 2, 3))
        grads = stack.block_grads(W)
        self.assertEqual(grads.shape, (4, 2, 3))
        for b in range(4):
            expected = sum(losses[i].grad(W[b, 0]) for i in (0, 2))
            np.testing.assert_allclose(grads[b, 0], expected, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(stack.block_sizes, [2, 3])

    # Quadratic blocks report their summed scale and weighted center
    def test_quadratic_blocks(self):
        stack = StackedLosses([Quadratic([0.0]), Quadratic([4.0], scale=3.0), Quadratic([1.0])], [0, 0, 1], 2)
        scale, center = stack.quadratic_blocks()
        np.testing.assert_allclose(scale, [4.0, 1.0])
        np.testing.assert_allclose(center[:, 0], [3.0, 1.0])

    # Regrouping merges blocks without touching the losses
    def test_regroup(self):
        stack = StackedLosses([Quadratic([0.0]), Quadratic([2.0]), Quadratic([4.0])])
        merged = stack.regroup([0, 0, 1])
        self.assertEqual(merged.n_blocks, 2)
        self.assertAlmostEqual(float(merged.value(np.array([[1.0], [4.0]]))), 1.0)


class TestLossSerializer(unittest.TestCase):

    # A valid squared hinge document builds the loss
    def test_build_squared_hinge(self):
        serializer = LossSpecSerializer(data={
            "kind": "squared_hinge",
            "points": [{"x": [1.0, 0.0], "label": 1}, {"x": [0.0, 1.0], "label": -1}],
            "reg_c": 0.001,
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)
        loss = serializer.save()
        self.assertEqual(loss.dim, 3)
        self.assertEqual(loss_to_dict(loss)["points"][1]["label"], -1)

    # Quadratics without an anchor are rejected with a field error
    def test_quadratic_needs_anchor(self):
        serializer = LossSpecSerializer(data={"kind": "quadratic"})
        self.assertFalse(serializer.is_valid())
        self.assertIn("anchor", serializer.errors)

    # Ragged feature vectors are rejected
    def test_ragged_points(self):
        serializer = LossSpecSerializer(data={
            "kind": "squared_hinge",
            "points": [{"x": [1.0, 0.0], "label": 1}, {"x": [0.0], "label": -1}],
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn("points", serializer.errors)
