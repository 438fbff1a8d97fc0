import unittest

import numpy as np
from django.test import tag
from scipy.spatial.distance import pdist

from fusionproject.exceptions import ConfigError, EmptySampleError
from losses.specs import Quadratic, SquaredHinge
from oracle.solvers import solve_reference
from problem.formulation import (
    SUM_ORDERED,
    Convention,
    FederationProblem,
    Partition,
    SumOfNorms,
    clustered_reduction,
    lift,
)

from .certificates import (
    HeterogeneityProfile,
    aposteriori_recovery_check,
    assumption3_profile,
    clustered_loss_value,
    conservative_bounds,
    sample_sublevel_set,
    theorem1_threshold,
    theorem2_threshold,
    theorem3_interval,
    theorem4_separation,
)
from .serializers import RecoveryCertificateSerializer

SUM_UNORDERED = Convention.from_label("sum-unordered")

# a square of diameter 0.2 centered on the origin
SQUARE = np.array([[-0.1, 0.0], [0.1, 0.0], [0.0, 0.05], [0.0, -0.05]])


def quadratic_problem(anchors, lam=0.0, convention=SUM_UNORDERED, scale=1.0):
    anchors = np.asarray(anchors, dtype=float)
    if anchors.ndim == 1:
        anchors = anchors.reshape(-1, 1)
    losses = [Quadratic(a, scale=scale) for a in anchors]
    return FederationProblem(losses, anchors.shape[1], SumOfNorms(lam), convention)


def centroids(anchors, partition):
    anchors = np.asarray(anchors, dtype=float).reshape(partition.n_users, -1)
    return np.array([anchors[list(block)].mean(axis=0) for block in partition.blocks])


def three_clusters(gap=8.0):
    """Three clusters of four anchors, intra diameter 0.2, centers gap apart."""
    radius = gap / np.sqrt(3.0)
    angles = np.deg2rad([90.0, 210.0, 330.0])
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    anchors = np.vstack([c + SQUARE for c in centers])
    return anchors, Partition.from_labels(np.repeat([0, 1, 2], 4))


def random_separated(seed):
    """A random well-separated quadratic instance with N <= 12, d <= 2 and K in {2, 3}."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 4))
    d = int(rng.integers(1, 3))
    sizes = rng.integers(2, 5, size=K)
    if d == 1:
        centers = 8.0 * np.arange(K, dtype=float).reshape(-1, 1)
    else:
        angles = 2 * np.pi * np.arange(K) / K + rng.uniform(0, np.pi)
        centers = 5.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    spread = rng.uniform(0.1, 0.3)
    anchors = np.vstack([
        c + rng.uniform(-spread / 2, spread / 2, size=(n, d)) for c, n in zip(centers, sizes)
    ])
    return anchors, Partition.from_labels(np.repeat(np.arange(K), sizes))


class TestThresholds(unittest.TestCase):

    # One cluster of quadratics needs lambda at the widest anchor gap over N
    def test_single_cluster_lower_threshold(self):
        anchors = np.random.default_rng(0).normal(size=(5, 2))
        problem = quadratic_problem(anchors)
        for w in ([[0.0, 0.0]], [[3.0, -1.0]]):
            self.assertAlmostEqual(theorem1_threshold(problem, Partition.whole(5), w), pdist(anchors).max() / 5, places=12)

    # Identical losses are certified by any lambda
    def test_identical_losses(self):
        problem = quadratic_problem(np.ones((4, 2)))
        self.assertEqual(theorem1_threshold(problem, Partition.whole(4), [[0.5, 0.5]]), 0.0)

    # Intra diameter 0.2 with four users per cluster gives 0.05
    def test_three_cluster_lower_threshold(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors)
        self.assertAlmostEqual(theorem1_threshold(problem, partition, centroids(anchors, partition)), 0.05, places=12)

    # Counting both (i, j) and (j, i) halves the same threshold to 0.025
    def test_three_cluster_lower_threshold_ordered_pairs(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, convention=SUM_ORDERED)
        self.assertEqual(SUM_ORDERED.recovery_scale(problem.n_users), 0.5)
        self.assertAlmostEqual(theorem1_threshold(problem, partition, centroids(anchors, partition)), 0.025, places=12)

    # Two clusters with centroid gap 3 and three users each give 3 / 6
    def test_two_cluster_upper_threshold(self):
        anchors = [-0.1, 0.0, 0.1, 2.9, 3.0, 3.1]
        partition = Partition.from_labels([0, 0, 0, 1, 1, 1])
        problem = quadratic_problem(anchors)
        self.assertAlmostEqual(theorem2_threshold(problem, partition, [[0.0], [5.0]]), 0.5, places=12)

    # A single cluster has nothing to keep apart
    def test_single_cluster_upper_threshold(self):
        problem = quadratic_problem([0.0, 1.0])
        self.assertEqual(theorem2_threshold(problem, Partition.whole(2), [[0.5]]), np.inf)

    # Thresholds follow the convention's lambda units
    def test_convention_scaling(self):
        anchors, partition = three_clusters()
        W = centroids(anchors, partition)
        base = theorem1_threshold(quadratic_problem(anchors), partition, W)
        self.assertAlmostEqual(theorem1_threshold(quadratic_problem(anchors, convention=SUM_ORDERED), partition, W), base / 2, places=12)
        mean = theorem1_threshold(quadratic_problem(anchors, convention=Convention()), partition, W)
        self.assertAlmostEqual(mean, base / 2 / 12, places=12)

    # Stacks of the wrong shape are rejected
    def test_shape_mismatch(self):
        anchors, partition = three_clusters()
        with self.assertRaises(ConfigError):
            theorem1_threshold(quadratic_problem(anchors), partition, np.zeros((2, 2)))

    # The upper threshold never falls below the interval bound built from the profile
    def test_upper_threshold_chain_bound(self):
        for seed in range(10):
            anchors, partition = random_separated(seed)
            problem = quadratic_problem(anchors)
            interval = theorem3_interval(assumption3_profile(problem, partition), partition)
            upper = theorem2_threshold(problem, partition, centroids(anchors, partition))
            self.assertIsNotNone(interval)
            self.assertGreaterEqual(upper, interval[1] - 1e-12)


class TestHeterogeneityProfile(unittest.TestCase):

    # Quadratic gaps are the anchor distances, exactly
    def test_quadratic_profile(self):
        problem = quadratic_problem([0.0, 0.1, 5.0])
        profile = assumption3_profile(problem, Partition.from_labels([0, 0, 1]))
        self.assertTrue(profile.exact)
        self.assertAlmostEqual(profile.eps[0], 0.1, places=12)
        self.assertEqual(profile.eps[1], 0.0)
        self.assertAlmostEqual(profile.delta[0, 1], 4.9, places=12)
        self.assertEqual(profile.delta[0, 0], 0.0)

    # The closest cross pair sets delta
    def test_quadratic_delta(self):
        problem = quadratic_problem([0.0, 5.0])
        profile = assumption3_profile(problem, Partition.singletons(2))
        self.assertEqual(profile.delta[0, 1], 5.0)
        np.testing.assert_array_equal(profile.delta, profile.delta.T)

    # Squared hinge profiles are inexact and monotone in the probe set
    def test_hinge_profile_monotone(self):
        rng = np.random.default_rng(1)
        losses = [
            SquaredHinge(rng.normal(loc=shift, size=(6, 2)), np.where(rng.random(6) < 0.5, -1, 1), 1e-3)
            for shift in (0.0, 0.0, 3.0, 3.0)
        ]
        problem = FederationProblem(losses, 3, SumOfNorms(0.1))
        partition = Partition.from_labels([0, 0, 1, 1])
        probes = rng.normal(scale=2.0, size=(40, 3))
        small = assumption3_profile(problem, partition, probes[:10])
        large = assumption3_profile(problem, partition, probes)
        self.assertFalse(large.exact)
        self.assertTrue(np.all(large.eps >= small.eps))
        self.assertLessEqual(large.delta[0, 1], small.delta[0, 1])

    # Non-quadratic losses need probes
    def test_hinge_needs_probes(self):
        losses = [SquaredHinge([[1.0, 0.0]], [1]), SquaredHinge([[0.0, 1.0]], [-1])]
        problem = FederationProblem(losses, 3, SumOfNorms(0.1))
        with self.assertRaises(ConfigError):
            assumption3_profile(problem, Partition.singletons(2))


class TestRecoveryInterval(unittest.TestCase):

    # eps = (0.1, 0.1), delta = 5 and five users per cluster give [0.02, 0.48]
    def test_interval_arithmetic(self):
        partition = Partition.from_labels([0] * 5 + [1] * 5)
        profile = HeterogeneityProfile(np.array([0.1, 0.1]), np.array([[0.0, 5.0], [5.0, 0.0]]), True, partition)
        lo, hi = theorem3_interval(profile, partition)
        self.assertAlmostEqual(lo, 0.02, places=12)
        self.assertAlmostEqual(hi, 0.48, places=12)

    # Overlapping clusters leave no interval
    def test_empty_interval(self):
        partition = Partition.from_labels([0] * 5 + [1] * 5)
        profile = HeterogeneityProfile(np.array([0.1, 0.1]), np.array([[0.0, 0.15], [0.15, 0.0]]), True, partition)
        self.assertIsNone(theorem3_interval(profile, partition))

    # A single cluster is bounded only from below
    def test_single_cluster_interval(self):
        partition = Partition.whole(4)
        profile = HeterogeneityProfile(np.array([0.4]), np.zeros((1, 1)), True, partition)
        lo, hi = theorem3_interval(profile, partition)
        self.assertAlmostEqual(lo, 0.1, places=12)
        self.assertEqual(hi, np.inf)

    # Lambdas inside the interval pass both certificate checks
    def test_interval_membership_certifies(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, convention=SUM_ORDERED)
        profile = assumption3_profile(problem, partition)
        lo, hi = theorem3_interval(profile, partition, SUM_ORDERED.recovery_scale(12))
        lam = 0.5 * (lo + hi)
        x = solve_reference(problem.with_penalty(SumOfNorms(lam))).x
        certificate = aposteriori_recovery_check(problem.with_penalty(SumOfNorms(lam)), x)
        self.assertEqual(certificate.partition.blocks, partition.blocks)
        self.assertTrue(certificate.recovered)


class TestSeparation(unittest.TestCase):

    # Quadratic optima meet both separation bounds with zero slack
    def test_quadratic_zero_slack(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors)
        check = theorem4_separation(assumption3_profile(problem, partition), problem.losses, anchors)
        self.assertTrue(check.ok)
        self.assertAlmostEqual(check.min_within_margin, 0.0, delta=1e-12)
        self.assertAlmostEqual(check.min_across_margin, 0.0, delta=1e-12)

    # A common curvature scale cancels out of both bounds
    def test_scale_invariance(self):
        anchors, partition = three_clusters()
        plain = quadratic_problem(anchors)
        scaled = quadratic_problem(anchors, scale=3.0)
        a = theorem4_separation(assumption3_profile(plain, partition), plain.losses, anchors)
        b = theorem4_separation(assumption3_profile(scaled, partition), scaled.losses, anchors)
        self.assertEqual((b.mu, b.lipschitz), (3.0, 3.0))
        np.testing.assert_allclose(b.within_margin, a.within_margin, atol=1e-12)
        np.testing.assert_allclose(b.across_margin, a.across_margin, atol=1e-12)

    # Losses without a global strong convexity modulus are refused
    def test_requires_strong_convexity(self):
        losses = [SquaredHinge([[1.0, 0.0]], [1], 1e-3), SquaredHinge([[0.0, 1.0]], [-1], 1e-3)]
        profile = HeterogeneityProfile(np.zeros(2), np.zeros((2, 2)), False, Partition.singletons(2))
        with self.assertRaises(ConfigError):
            theorem4_separation(profile, losses, np.zeros((2, 3)))


class TestConservativeBounds(unittest.TestCase):

    # Every sampled stack lies in the sublevel set
    def test_samples_in_sublevel_set(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1, SUM_ORDERED)
        box = sample_sublevel_set(problem, partition, n_samples=500, seed=3, batch_size=512)
        values = clustered_loss_value(problem, partition, box.sample_points)
        self.assertTrue(np.all(values <= box.upper_value + 1e-9))
        self.assertFalse(box.approximate)
        self.assertGreater(len(box), 0)

    # Quadratic bounds do not depend on the sample and equal the closed forms
    def test_quadratic_bounds_exact(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1, SUM_ORDERED)
        W = centroids(anchors, partition)
        for seed in (0, 1):
            box = sample_sublevel_set(problem, partition, n_samples=200, seed=seed, batch_size=256)
            lo, hi, approximate = conservative_bounds(problem, partition, box)
            self.assertAlmostEqual(lo, theorem1_threshold(problem, partition, W), delta=1e-12)
            self.assertAlmostEqual(hi, theorem2_threshold(problem, partition, W), delta=1e-12)
            self.assertFalse(approximate)

    # Well-separated clusters give a nonempty interval, overlapping ones do not
    def test_interval_emptiness(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1)
        lo, hi, _ = conservative_bounds(problem, partition, sample_sublevel_set(problem, partition, n_samples=100, batch_size=128))
        self.assertLess(lo, hi)
        overlapping = quadratic_problem([0.0, 1.0, 0.5, 1.5], 0.1)
        split = Partition.from_labels([0, 0, 1, 1])
        lo, hi, _ = conservative_bounds(overlapping, split, sample_sublevel_set(overlapping, split, n_samples=100, batch_size=128))
        self.assertGreaterEqual(lo, hi)

    # The profile interval sits inside the sampled bounds
    def test_conservativeness_ordering(self):
        for seed in range(5):
            anchors, partition = random_separated(seed)
            problem = quadratic_problem(anchors, 0.1, SUM_ORDERED)
            scale = SUM_ORDERED.recovery_scale(problem.n_users)
            lo, hi = theorem3_interval(assumption3_profile(problem, partition), partition, scale)
            box = sample_sublevel_set(problem, partition, n_samples=100, batch_size=128, seed=seed)
            lower, upper, _ = conservative_bounds(problem, partition, box)
            self.assertGreaterEqual(lo, lower - 1e-12)
            self.assertLessEqual(hi, upper + 1e-12)

    # A user supplied upper value replaces the optimal value
    def test_upper_value_override(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1)
        at_zero = sum(loss.value(np.zeros(2)) for loss in problem.losses)
        box = sample_sublevel_set(problem, partition, n_samples=100, batch_size=128, upper_value=at_zero)
        self.assertEqual(box.upper_value, at_zero)

    # Non-quadratic blocks are sampled and flagged approximate
    def test_hinge_sampler(self):
        rng = np.random.default_rng(2)
        losses = [
            SquaredHinge(rng.normal(loc=shift, size=(5, 2)), np.where(rng.random(5) < 0.5, -1, 1), 1e-2)
            for shift in (0.0, 0.0, 2.0, 2.0)
        ]
        problem = FederationProblem(losses, 3, SumOfNorms(0.1), SUM_ORDERED)
        partition = Partition.from_labels([0, 0, 1, 1])
        box = sample_sublevel_set(problem, partition, n_samples=50, batch_size=256)
        self.assertTrue(box.approximate)
        values = clustered_loss_value(problem, partition, box.sample_points)
        self.assertTrue(np.all(values <= box.upper_value + 1e-9))
        self.assertTrue(conservative_bounds(problem, partition, box)[2])

    # An upper value below the clustered minimum has no points
    def test_empty_sublevel_set(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1)
        with self.assertRaises(EmptySampleError):
            sample_sublevel_set(problem, partition, n_samples=10, upper_value=-1.0)
        with self.assertRaises(EmptySampleError):
            conservative_bounds(problem, partition, None)


class TestAposterioriCheck(unittest.TestCase):

    # A huge lambda fuses everyone and the upper check is vacuous
    def test_huge_lambda(self):
        anchors, _ = three_clusters()
        problem = quadratic_problem(anchors, 1e3, SUM_ORDERED)
        certificate = aposteriori_recovery_check(problem, solve_reference(problem).x)
        self.assertEqual(certificate.partition.K, 1)
        self.assertEqual(certificate.upper_threshold, np.inf)
        self.assertTrue(certificate.satisfied_lower)
        self.assertTrue(certificate.recovered)

    # Without a penalty every user is its own cluster
    def test_zero_lambda(self):
        anchors, _ = three_clusters()
        problem = quadratic_problem(anchors, 0.0, SUM_ORDERED)
        certificate = aposteriori_recovery_check(problem, anchors)
        self.assertEqual(certificate.partition.K, 12)
        self.assertEqual(certificate.lower_threshold, 0.0)
        self.assertTrue(certificate.satisfied_lower)

    # Certificates serialize thresholds, margins, the convention and sampler metadata
    def test_serialized_certificate(self):
        anchors, partition = three_clusters()
        problem = quadratic_problem(anchors, 0.1, SUM_ORDERED)
        box = sample_sublevel_set(problem, partition, n_samples=50, batch_size=64)
        x = lift(partition, centroids(anchors, partition))
        data = RecoveryCertificateSerializer(aposteriori_recovery_check(problem, x, sampler=box)).data
        self.assertEqual(data["convention"], "sum-ordered")
        self.assertEqual(data["K"], 3)
        self.assertAlmostEqual(data["lower_threshold"], 0.025, places=9)
        self.assertAlmostEqual(data["lower_margin"], 0.1 - 0.025, places=9)
        self.assertEqual(data["sampler"]["n_points"], len(box))
        self.assertIn("conservative_upper", data)


@tag("slow")
class TestRecoveryGuarantees(unittest.TestCase):

    # Above the lower threshold every cluster fuses onto its clustered model
    def test_sufficiency(self):
        for seed in range(20):
            anchors, partition = random_separated(seed)
            problem = quadratic_problem(anchors, convention=SUM_ORDERED)
            threshold = theorem1_threshold(problem, partition, centroids(anchors, partition))
            for factor in (1.0, 1.5):
                lam = factor * threshold
                full = solve_reference(problem.with_penalty(SumOfNorms(lam))).x
                W = solve_reference(clustered_reduction(problem.with_penalty(SumOfNorms(lam)), partition)).x
                for k, block in enumerate(partition.blocks):
                    for i in block:
                        self.assertLessEqual(np.linalg.norm(full[i] - W[k]), 1e-6, (seed, factor))

    # Below the upper threshold the clustered models stay apart
    def test_distinctness(self):
        for seed in range(20):
            anchors, partition = random_separated(seed)
            problem = quadratic_problem(anchors, convention=SUM_ORDERED)
            lam = 0.9 * theorem2_threshold(problem, partition, centroids(anchors, partition))
            W = solve_reference(clustered_reduction(problem.with_penalty(SumOfNorms(lam)), partition)).x
            self.assertGreaterEqual(pdist(W).min(), 1e-8, seed)

    # Lambdas across the interval all certify recovery of the planted partition
    def test_interval_consistency(self):
        for seed in range(20):
            anchors, partition = random_separated(seed)
            problem = quadratic_problem(anchors, convention=SUM_ORDERED)
            scale = SUM_ORDERED.recovery_scale(problem.n_users)
            lo, hi = theorem3_interval(assumption3_profile(problem, partition), partition, scale)
            for fraction in (0.05, 0.25, 0.5, 0.75, 0.95):
                current = problem.with_penalty(SumOfNorms(lo + fraction * (hi - lo)))
                certificate = aposteriori_recovery_check(current, solve_reference(current).x)
                self.assertEqual(certificate.partition.blocks, partition.blocks, (seed, fraction))
                self.assertTrue(certificate.recovered, (seed, fraction))
