import unittest

import numpy as np

from fusionproject.exceptions import ConfigError, DimensionMismatch, PartitionError
from losses.specs import Quadratic, SquaredHinge

from .formulation import (
    SUM_ORDERED,
    ClusteredSumOfNorms,
    Convention,
    FederationProblem,
    GlobalConsensus,
    LocalOnly,
    Partition,
    SquaredNorms,
    SumOfNorms,
    clustered_reduction,
    lift,
    objective,
    objective_gradient,
    subgradient_residual,
    tie_components,
)
from .serializers import ProblemSerializer


def two_point(lam, convention=Convention()):
    return FederationProblem([Quadratic([0.0]), Quadratic([4.0])], 1, SumOfNorms(lam), convention)


def random_quadratics(rng, n=6, d=2):
    return [Quadratic(rng.normal(scale=3.0, size=d)) for _ in range(n)]


class TestObjective(unittest.TestCase):

    # Models at their anchors with no penalty cost nothing
    def test_zero_at_anchors(self):
        for label in ("mean-ordered", "sum-unordered"):
            self.assertEqual(objective(two_point(0.0, Convention.from_label(label)), [[0.0], [4.0]]), 0.0)

    # The default convention counts both ordered pairs
    def test_ordered_pairs_count_twice(self):
        self.assertAlmostEqual(objective(two_point(1.0), [[0.0], [4.0]]), 8.0)

    # A single cluster reduces to the consensus objective with no penalty
    def test_single_cluster_matches_consensus(self):
        rng = np.random.default_rng(0)
        losses = random_quadratics(rng)
        clustered = FederationProblem(losses, 2, ClusteredSumOfNorms(3.0, Partition.whole(6)))
        consensus = FederationProblem(losses, 2, GlobalConsensus())
        w = rng.normal(size=2)
        self.assertAlmostEqual(objective(clustered, [w]), objective(consensus, w), places=12)
        self.assertAlmostEqual(objective(consensus, w), np.mean([l.value(w) for l in losses]), places=12)

    # Sum scaling multiplies the loss term by N and unordered pairs halve the penalty
    def test_convention_bridge(self):
        rng = np.random.default_rng(1)
        losses = random_quadratics(rng)
        X = rng.normal(size=(6, 2))
        loss_mean = objective(FederationProblem(losses, 2, LocalOnly()), X)
        penalty = objective(FederationProblem(losses, 2, SumOfNorms(0.7)), X) - loss_mean
        sum_ordered = objective(FederationProblem(losses, 2, SumOfNorms(0.7), SUM_ORDERED), X)
        self.assertAlmostEqual(sum_ordered, 6 * loss_mean + penalty, places=10)
        unordered = objective(FederationProblem(losses, 2, SumOfNorms(0.7), Convention.from_label("mean-unordered")), X)
        self.assertAlmostEqual(unordered, loss_mean + penalty / 2, places=10)

    # Stacks of the wrong length or width are rejected
    def test_stack_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            objective(two_point(1.0), [[0.0], [1.0], [2.0]])
        with self.assertRaises(DimensionMismatch):
            objective(two_point(1.0), [[0.0, 1.0], [1.0, 2.0]])

    # A single user collapses every formulation to its local cost
    def test_single_user(self):
        problem = FederationProblem([Quadratic([1.0, 1.0])], 2, SumOfNorms(5.0))
        self.assertAlmostEqual(objective(problem, [[2.0, 1.0]]), 0.5)

    # The squared penalty gradient matches central differences
    def test_squared_norms_gradient(self):
        rng = np.random.default_rng(2)
        problem = FederationProblem(random_quadratics(rng, 4), 2, SquaredNorms(0.3))
        X = rng.normal(size=(4, 2))
        grad = objective_gradient(problem, X)
        h = 1e-6
        for i in range(4):
            for k in range(2):
                E = np.zeros_like(X)
                E[i, k] = h
                fd = (objective(problem, X + E) - objective(problem, X - E)) / (2 * h)
                self.assertAlmostEqual(grad[i, k], fd, places=5)

    # Nonsmooth penalties have no gradient
    def test_gradient_of_sum_of_norms(self):
        with self.assertRaises(ConfigError):
            objective_gradient(two_point(1.0), [[0.0], [1.0]])


class TestPartition(unittest.TestCase):

    # Overlapping blocks are rejected
    def test_disjoint(self):
        with self.assertRaises(PartitionError):
            Partition(((0, 1), (1, 2)))

    # Blocks must cover every user
    def test_cover(self):
        with self.assertRaises(PartitionError):
            Partition(((0,), (2,)))

    # Labels round-trip through blocks ordered by smallest member
    def test_from_labels(self):
        partition = Partition.from_labels([2, 2, 0, 1, 0])
        self.assertEqual(partition.blocks, ((0, 1), (2, 4), (3,)))
        np.testing.assert_array_equal(partition.labels(), [0, 0, 1, 2, 1])
        np.testing.assert_array_equal(partition.sizes, [2, 2, 1])

    # Tie components link models transitively within the tolerance
    def test_tie_components(self):
        X = np.array([[0.0], [0.5], [1.0], [5.0]])
        np.testing.assert_array_equal(tie_components(X, 0.6), [0, 0, 0, 1])
        np.testing.assert_array_equal(tie_components(X, 0.1), [0, 1, 2, 3])


class TestClusteredReduction(unittest.TestCase):

    # Singleton blocks give back the per-user objective
    def test_singletons(self):
        rng = np.random.default_rng(3)
        problem = FederationProblem(random_quadratics(rng, 5), 2, SumOfNorms(0.4))
        reduced = clustered_reduction(problem, Partition.singletons(5))
        X = rng.normal(size=(5, 2))
        self.assertAlmostEqual(objective(reduced, X), objective(problem, X), places=12)

    # Identical anchors average to the same anchor with pair weight n_k n_l
    def test_two_identical_clusters(self):
        losses = [Quadratic([0.0]), Quadratic([0.0]), Quadratic([4.0]), Quadratic([4.0])]
        problem = FederationProblem(losses, 1, SumOfNorms(1.0))
        reduced = clustered_reduction(problem, Partition(((0, 1), (2, 3))))
        centers = [g.quadratic_form()[1][0] for g in reduced.cluster_losses]
        self.assertEqual(centers, [0.0, 4.0])
        self.assertEqual(reduced.coupling[0, 1], 4.0)

    # The clustered objective equals the objective of the lifted stack
    def test_lifting_identity(self):
        rng = np.random.default_rng(4)
        for convention in (Convention(), SUM_ORDERED, Convention.from_label("sum-unordered")):
            problem = FederationProblem(random_quadratics(rng, 7), 2, SumOfNorms(0.9), convention)
            partition = Partition.from_labels(rng.integers(0, 3, size=7))
            reduced = clustered_reduction(problem, partition)
            W = rng.normal(size=(partition.K, 2))
            self.assertAlmostEqual(objective(reduced, W), objective(problem, lift(partition, W)), delta=1e-12 * (1 + abs(objective(reduced, W))))

    # Reduction needs the sum-of-norms penalty
    def test_reduction_requires_sum_of_norms(self):
        problem = FederationProblem([Quadratic([0.0]), Quadratic([1.0])], 1, SquaredNorms(1.0))
        with self.assertRaises(ConfigError):
            clustered_reduction(problem, Partition.whole(2))


class TestSubgradientResidual(unittest.TestCase):

    # A fused midpoint is stationary once lambda absorbs the gradient
    def test_fused_midpoint(self):
        problem = two_point(2.0, SUM_ORDERED)
        self.assertLessEqual(subgradient_residual(problem, [[2.0], [2.0]], 1e-9), 1e-9)

    # Below the fusion level the midpoint is not stationary
    def test_fused_midpoint_too_small_lambda(self):
        problem = two_point(0.5, SUM_ORDERED)
        self.assertGreater(subgradient_residual(problem, [[2.0], [2.0]], 1e-9), 0.5)

    # With no penalty the anchors are exactly stationary
    def test_zero_lambda_at_anchors(self):
        rng = np.random.default_rng(5)
        losses = random_quadratics(rng)
        anchors = np.array([l.anchor for l in losses])
        self.assertEqual(subgradient_residual(FederationProblem(losses, 2, SumOfNorms(0.0)), anchors, 1e-9), 0.0)

    # Squared hinge problems are accepted and report a finite residual
    def test_hinge_problem(self):
        losses = [SquaredHinge([[1.0, 0.0]], [1]), SquaredHinge([[0.0, 1.0]], [-1])]
        problem = FederationProblem(losses, 3, SumOfNorms(0.1))
        self.assertTrue(np.isfinite(subgradient_residual(problem, np.zeros((2, 3)), 1e-9)))


class TestProblemSerializer(unittest.TestCase):

    # A problem document builds the problem with a parsed convention label
    def test_build_problem(self):
        serializer = ProblemSerializer(data={
            "losses": [{"kind": "quadratic", "anchor": [0.0]}, {"kind": "quadratic", "anchor": [4.0]}],
            "penalty": {"kind": "sum_of_norms", "lambda": 1.0},
            "convention": "sum-ordered",
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)
        problem = serializer.save()
        self.assertEqual(problem.convention, SUM_ORDERED)
        self.assertEqual(problem.penalty, SumOfNorms(1.0))
        self.assertEqual(ProblemSerializer(problem).data["penalty"], {"kind": "sum_of_norms", "lambda": 1.0})

    # Losses of different dimensions are rejected
    def test_mixed_dimensions(self):
        serializer = ProblemSerializer(data={
            "losses": [{"kind": "quadratic", "anchor": [0.0]}, {"kind": "quadratic", "anchor": [4.0, 1.0]}],
            "penalty": {"kind": "local"},
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn("losses", serializer.errors)

    # Sum-of-norms penalties need lambda
    def test_missing_lambda(self):
        serializer = ProblemSerializer(data={
            "losses": [{"kind": "quadratic", "anchor": [0.0]}],
            "penalty": {"kind": "sum_of_norms"},
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn("penalty", serializer.errors)

    # An unknown convention label is a field error
    def test_bad_convention(self):
        serializer = ProblemSerializer(data={
            "losses": [{"kind": "quadratic", "anchor": [0.0]}],
            "penalty": {"kind": "local"},
            "convention": "median-ordered",
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn("convention", serializer.errors)
