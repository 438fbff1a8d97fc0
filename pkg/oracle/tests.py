import unittest

import numpy as np

from losses.specs import Huber, Quadratic, SquaredHinge
from problem.formulation import (
    SUM_ORDERED,
    ClusteredSumOfNorms,
    Convention,
    FederationProblem,
    GlobalConsensus,
    LocalOnly,
    Partition,
    SquaredNorms,
    SumOfNorms,
    objective,
    subgradient_residual,
)

from .serializers import OracleConfigSerializer, OracleResultSerializer
from .smooth import accelerated_gradient, block_soft_threshold, laplacian_prox
from .solvers import OracleConfig, OracleMethod, two_point_threshold, solve_reference


def two_point(lam, convention=SUM_ORDERED):
    return FederationProblem([Quadratic([0.0]), Quadratic([4.0])], 1, SumOfNorms(lam), convention)


def random_instance(seed, n=5, d=2, lam=None, convention=Convention()):
    rng = np.random.default_rng(seed)
    anchors = rng.normal(scale=2.0, size=(n, d))
    lam = lam if lam is not None else float(rng.uniform(0.05, 0.5))
    return FederationProblem([Quadratic(a) for a in anchors], d, SumOfNorms(lam), convention)


def grid_minimizer(problem, lo=-1.0, hi=5.0):
    """Two-user 1-D minimizer by a coarse grid refined to resolution 1e-3."""
    def best_on(xs, ys):
        A, B = np.meshgrid(xs, ys, indexing="ij")
        f1, f2 = problem.losses
        values = problem.loss_factor * (0.5 * (A - f1.anchor[0]) ** 2 + 0.5 * (B - f2.anchor[0]) ** 2)
        values = values + 2.0 * problem.coupling[0, 1] * np.abs(A - B)
        i, j = np.unravel_index(np.argmin(values), values.shape)
        return xs[i], ys[j]

    coarse = np.arange(lo, hi, 1e-2)
    x, y = best_on(coarse, coarse)
    return best_on(np.arange(x - 0.05, x + 0.05, 1e-3), np.arange(y - 0.05, y + 0.05, 1e-3))


class TestSmoothHelpers(unittest.TestCase):

    # Block soft-thresholding shrinks the norm by the threshold
    def test_block_soft_threshold(self):
        np.testing.assert_allclose(block_soft_threshold([3.0, 4.0], 1.0), [2.4, 3.2])
        np.testing.assert_allclose(block_soft_threshold([0.3, 0.4], 1.0), [0.0, 0.0])
        np.testing.assert_allclose(block_soft_threshold([0.0, 0.0], 1.0), [0.0, 0.0])

    # Per-row thresholds apply along the last axis
    def test_block_soft_threshold_per_row(self):
        out = block_soft_threshold(np.array([[3.0, 4.0], [6.0, 8.0]]), np.array([5.0, 5.0]))
        np.testing.assert_allclose(out, [[0.0, 0.0], [3.0, 4.0]])

    # FISTA finds the minimizer of a strongly convex quadratic
    def test_accelerated_gradient(self):
        A = np.diag([1.0, 10.0])
        b = np.array([1.0, -2.0])
        run = accelerated_gradient(lambda x: A @ x - b, np.zeros(2), 10.0, 1e-10, 5000)
        self.assertTrue(run.converged)
        np.testing.assert_allclose(run.x, np.linalg.solve(A, b), atol=1e-9)

    # The Laplacian prox keeps the mean and shrinks deviations
    def test_laplacian_prox(self):
        prox = laplacian_prox(0.5, 2)
        out = prox(np.array([[0.0], [4.0]]), 1.0)
        np.testing.assert_allclose(out.mean(axis=0), [2.0])
        np.testing.assert_allclose(out[1] - out[0], [4.0 / 5.0])


class TestSmoothFormulations(unittest.TestCase):

    # The consensus model over quadratics is the mean anchor
    def test_global_consensus_mean(self):
        rng = np.random.default_rng(0)
        anchors = rng.normal(size=(6, 2))
        problem = FederationProblem([Quadratic(a) for a in anchors], 2, GlobalConsensus())
        result = solve_reference(problem)
        np.testing.assert_allclose(result.x[0], anchors.mean(axis=0), atol=1e-9)
        self.assertLessEqual(result.kkt_residual, 1e-10)
        self.assertTrue(result.converged)

    # Local models sit at the anchors
    def test_local_only(self):
        anchors = np.array([[0.0, 1.0], [2.0, -1.0], [5.0, 5.0]])
        problem = FederationProblem([Quadratic(a) for a in anchors], 2, LocalOnly())
        np.testing.assert_allclose(solve_reference(problem).x, anchors, atol=1e-9)

    # The squared penalty solve agrees with its closed form
    def test_squared_norms_closed_form(self):
        rng = np.random.default_rng(1)
        problem = FederationProblem([Quadratic(a) for a in rng.normal(size=(5, 2))], 2, SquaredNorms(0.4))
        iterative = solve_reference(problem)
        closed = solve_reference(problem, OracleConfig(method=OracleMethod.CLOSED_FORM))
        np.testing.assert_allclose(iterative.x, closed.x, atol=1e-8)
        self.assertEqual(closed.iters_used, 0)

    # Smooth non-quadratic consensus problems converge on the gradient norm
    def test_hinge_consensus(self):
        features = np.array([[1.0, 0.5], [-1.0, -0.5], [0.5, 1.0], [-0.5, -1.0]])
        losses = [SquaredHinge(features[:2], [1, -1], 1e-3), SquaredHinge(features[2:], [1, -1], 1e-3)]
        result = solve_reference(FederationProblem(losses, 3, GlobalConsensus()))
        self.assertTrue(result.converged)


class TestSumOfNormsOracle(unittest.TestCase):

    # Two anchors 0 and 4 fuse at the midpoint for lambda = 1 with summed losses
    def test_two_point_consensus(self):
        result = solve_reference(two_point(1.0))
        np.testing.assert_allclose(result.x[:, 0], [2.0, 2.0], atol=1e-6)
        self.assertTrue(result.converged)

    # The oracle matches a refined grid search on two-user instances
    def test_grid_search_equivalence(self):
        for lam in (0.3, 0.7, 1.5):
            problem = two_point(lam)
            gx, gy = grid_minimizer(problem)
            x = solve_reference(problem).x[:, 0]
            self.assertLessEqual(abs(x[0] - gx), 2e-3)
            self.assertLessEqual(abs(x[1] - gy), 2e-3)

    # Fusion happens exactly at the two-point threshold
    def test_threshold_law(self):
        threshold = two_point_threshold([0.0], [4.0], SUM_ORDERED)
        self.assertAlmostEqual(threshold, 1.0)
        for factor in (1.0, 1.01):
            x = solve_reference(two_point(factor * threshold)).x
            self.assertLessEqual(abs(x[0, 0] - x[1, 0]), 1e-6)
        x = solve_reference(two_point(0.9 * threshold)).x
        self.assertGreaterEqual(abs(x[0, 0] - x[1, 0]), 1e-3)

    # Threshold values in 2-D, for identical anchors and under the mean convention
    def test_threshold_values(self):
        self.assertAlmostEqual(two_point_threshold([0.0, 0.0], [3.0, 4.0], SUM_ORDERED), 1.25)
        self.assertEqual(two_point_threshold([1.0], [1.0], SUM_ORDERED), 0.0)
        self.assertAlmostEqual(two_point_threshold([0.0], [4.0], Convention()), 0.5)

    # The solution certifies through the subgradient residual
    def test_residual_at_solution(self):
        for seed in range(5):
            problem = random_instance(seed)
            result = solve_reference(problem)
            self.assertTrue(result.converged)
            tol = 1e-9 * (1 + np.abs(result.x).max())
            self.assertLessEqual(subgradient_residual(problem, result.x, tol), 1e-6)

    # ADMM and the subgradient method agree on the optimal value
    def test_cross_oracle_agreement(self):
        for seed in range(5):
            problem = random_instance(seed, n=4, d=int(1 + seed % 3))
            admm = solve_reference(problem)
            sub = solve_reference(problem, OracleConfig(method=OracleMethod.SUBGRADIENT, max_iters=5000))
            self.assertLessEqual(abs(admm.objective_value - sub.objective_value), 1e-5 * max(1.0, abs(admm.objective_value)))

    # The ADMM objective trace does not increase after the first iterations
    def test_monotone_tail(self):
        result = solve_reference(two_point(2.0), OracleConfig(rho=1.0, polish=False))
        tail = np.diff(result.objective_trace[10:])
        self.assertTrue(np.all(tail <= 1e-9))

    # Jacobi sweeps reach the same optimum as Gauss-Seidel sweeps
    def test_jacobi_schedule(self):
        problem = random_instance(7, n=4)
        gauss = solve_reference(problem)
        jacobi = solve_reference(problem, OracleConfig(schedule="jacobi", max_iters=3000))
        self.assertAlmostEqual(jacobi.objective_value, gauss.objective_value, delta=1e-5)

    # Clustered problems solve over the cluster models
    def test_clustered_problem(self):
        losses = [Quadratic([0.0]), Quadratic([0.0]), Quadratic([4.0]), Quadratic([4.0])]
        partition = Partition(((0, 1), (2, 3)))
        problem = FederationProblem(losses, 1, ClusteredSumOfNorms(0.1, partition), SUM_ORDERED)
        result = solve_reference(problem)
        self.assertEqual(result.x.shape, (2, 1))
        self.assertLess(result.x[0, 0], result.x[1, 0])
        self.assertTrue(result.converged)

    # Huber losses are solved through the inner accelerated solver
    def test_huber_instance(self):
        losses = [Huber([0.0, 0.0]), Huber([3.0, 0.0]), Huber([0.0, 3.0])]
        result = solve_reference(FederationProblem(losses, 2, SumOfNorms(0.05)))
        self.assertLessEqual(result.kkt_residual, 1e-5)

    # Exhausting the budget is reported, not raised
    def test_non_convergence_flag(self):
        problem = random_instance(3)
        result = solve_reference(problem, OracleConfig(max_iters=2, polish=False))
        self.assertFalse(result.converged)
        self.assertEqual(result.iters_used, 2)
        self.assertGreater(result.kkt_residual, OracleConfig().tol)

    # Warm starts are accepted and converge to the same optimum
    def test_warm_start(self):
        problem = random_instance(4)
        cold = solve_reference(problem)
        warm = solve_reference(problem, initial=cold.x)
        self.assertAlmostEqual(warm.objective_value, cold.objective_value, places=8)
        self.assertAlmostEqual(objective(problem, warm.x), warm.objective_value, places=12)


class TestOracleSerializers(unittest.TestCase):

    # Missing keys take the configured defaults
    def test_defaults(self):
        serializer = OracleConfigSerializer(data={"rho": 2.0})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        cfg = serializer.save()
        self.assertEqual(cfg.rho, 2.0)
        self.assertEqual(cfg.method, OracleMethod.SERIAL_ADMM)

    # Nonpositive tolerances are rejected
    def test_bad_tol(self):
        serializer = OracleConfigSerializer(data={"tol": 0.0})
        self.assertFalse(serializer.is_valid())
        self.assertIn("tol", serializer.errors)

    # Results serialize to x, objective, kkt_residual, iters and converged
    def test_result_fields(self):
        data = OracleResultSerializer(solve_reference(two_point(1.0))).data
        self.assertEqual(set(data), {"x", "objective", "kkt_residual", "iters", "converged"})
