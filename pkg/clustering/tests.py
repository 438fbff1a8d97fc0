import csv
import json
import os
import tempfile
import unittest

import numpy as np

from fusionproject.exceptions import ConfigError
from losses.specs import Quadratic
from oracle.solvers import OracleConfig, solve_reference
from pdmm.protocol import PdmmConfig
from problem.formulation import SUM_ORDERED, FederationProblem, LocalOnly, Partition, SumOfNorms
from theory.certificates import assumption3_profile, theorem3_interval

from .partitions import default_tie_tol, extract_partition, num_distinct_models
from .path import PathConfig, PathSolver, default_lambda_init, solution_path, write_jsonl, write_summary_csv
from .serializers import PathConfigSerializer, SolutionPathSerializer


def quadratic_problem(anchors, convention=SUM_ORDERED):
    anchors = np.asarray(anchors, dtype=float)
    if anchors.ndim == 1:
        anchors = anchors.reshape(-1, 1)
    return FederationProblem([Quadratic(a) for a in anchors], anchors.shape[1], SumOfNorms(1.0), convention)


def three_cluster_anchors():
    square = np.array([[-0.1, 0.0], [0.1, 0.0], [0.0, 0.05], [0.0, -0.05]])
    angles = np.deg2rad([90.0, 210.0, 330.0])
    centers = (8.0 / np.sqrt(3.0)) * np.column_stack([np.cos(angles), np.sin(angles)])
    return np.vstack([c + square for c in centers])


class TestExtractPartition(unittest.TestCase):

    # Equal models form one block
    def test_all_equal(self):
        self.assertEqual(extract_partition(np.ones((4, 2))).K, 1)

    # Near ties merge and distant models stay apart
    def test_near_tie(self):
        partition = extract_partition([[0.0], [1e-9], [5.0]], tie_tol=1e-6)
        self.assertEqual(partition.blocks, ((0, 1), (2,)))

    # Ties chain transitively through intermediate models
    def test_chaining(self):
        tau = 1e-3
        partition = extract_partition([[0.0], [0.9 * tau], [1.8 * tau]], tie_tol=tau)
        self.assertEqual(partition.blocks, ((0, 1, 2),))

    # Blocks are ordered by their smallest member
    def test_block_order(self):
        partition = extract_partition([[5.0], [0.0], [5.0], [0.0]], tie_tol=1e-6)
        self.assertEqual(partition.blocks, ((0, 2), (1, 3)))

    # Relabeling users relabels the blocks accordingly
    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        X = np.repeat(rng.normal(size=(3, 2)), [2, 3, 1], axis=0)
        perm = rng.permutation(6)
        base = extract_partition(X, 1e-8)
        permuted = extract_partition(X[perm], 1e-8)
        mapped = {frozenset(int(perm[i]) for i in block) for block in permuted.blocks}
        self.assertEqual(mapped, {frozenset(block) for block in base.blocks})

    # The default tolerance grows with the iterate magnitude
    def test_default_tolerance(self):
        self.assertAlmostEqual(default_tie_tol(np.zeros((3, 2))), 1e-5)
        self.assertAlmostEqual(default_tie_tol([[3.0, 4.0], [3.0, 4.0]]), 6e-5)

    # A nonpositive tolerance is rejected
    def test_bad_tolerance(self):
        with self.assertRaises(ConfigError):
            extract_partition([[0.0], [1.0]], tie_tol=0.0)

    # The distinct-model count is the number of blocks
    def test_num_distinct_models(self):
        self.assertEqual(num_distinct_models([[0.0], [0.0], [1.0], [2.0]], 1e-6), 3)


class TestSolutionPath(unittest.TestCase):

    # Two users fuse at the first lambda past the two-point threshold
    def test_two_point_path(self):
        path = solution_path(quadratic_problem([0.0, 4.0]), PathConfig(lambda_init=0.1, growth_c=2.0))
        np.testing.assert_allclose(path.lambdas, [0.1, 0.2, 0.4, 0.8, 1.6])
        self.assertEqual(path.cluster_counts, [2, 2, 2, 2, 1])

    # Identical losses are fused from the first lambda on
    def test_identical_losses(self):
        path = solution_path(quadratic_problem(np.zeros((3, 2))), PathConfig(lambda_init=0.1))
        self.assertEqual(path.cluster_counts, [1])

    # The three-cluster segment overlaps the recovery interval
    def test_three_cluster_segment(self):
        anchors = three_cluster_anchors()
        problem = quadratic_problem(anchors)
        path = solution_path(problem, PathConfig(lambda_init=0.005, growth_c=1.5))
        counts = path.cluster_counts
        self.assertEqual(counts[-1], 1)
        self.assertTrue(all(a >= b for a, b in zip(counts, counts[1:])))
        partition = Partition.from_labels(np.repeat([0, 1, 2], 4))
        lo, hi = theorem3_interval(assumption3_profile(problem, partition), partition, SUM_ORDERED.recovery_scale(12))
        segment = [entry.lam for run in path.segments_with(3) for entry in run]
        self.assertTrue(any(lo <= lam <= hi for lam in segment))
        self.assertTrue(all(b > a for a, b in zip(path.lambdas, path.lambdas[1:])))

    # Warm and cold starts agree on the objective
    def test_warm_start_consistency(self):
        problem = quadratic_problem(three_cluster_anchors())
        path = solution_path(problem, PathConfig(lambda_init=0.01, growth_c=3.0, max_steps=4))
        for entry in path.entries:
            cold = solve_reference(problem.with_penalty(SumOfNorms(entry.lam)))
            self.assertAlmostEqual(entry.objective, cold.objective_value, delta=1e-6)

    # The step cap ends the path before fusion
    def test_step_cap(self):
        path = solution_path(quadratic_problem([0.0, 4.0]), PathConfig(lambda_init=0.01, max_steps=3))
        self.assertEqual(len(path.entries), 3)
        self.assertEqual(path.cluster_counts, [2, 2, 2])

    # Certificates are attached per entry on request
    def test_certified_path(self):
        path = solution_path(quadratic_problem([0.0, 4.0]), PathConfig(lambda_init=0.6, certify=True))
        self.assertTrue(all(entry.certificate is not None for entry in path.entries))
        self.assertTrue(path.entries[-1].certificate.recovered)

    # The default first lambda keeps every user apart
    def test_default_lambda_init(self):
        problem = quadratic_problem(three_cluster_anchors())
        lam = default_lambda_init(problem)
        self.assertGreater(lam, 0.0)
        path = solution_path(problem, PathConfig(max_steps=1))
        self.assertEqual(path.entries[0].lam, lam)
        self.assertEqual(path.cluster_counts, [12])

    # The federated protocol can drive the path
    def test_pdmm_path(self):
        cfg = PathConfig(
            lambda_init=0.4,
            growth_c=4.0,
            tie_tol=0.05,
            solver=PathSolver.PDMM,
            pdmm=PdmmConfig(s_p=4, s_d=2, max_iters=2000),
            oracle=OracleConfig(tol=1e-3),
        )
        path = solution_path(quadratic_problem([0.0, 4.0]), cfg)
        self.assertEqual(path.cluster_counts, [2, 1])

    # Only sum-of-norms problems have a path
    def test_requires_sum_of_norms(self):
        problem = quadratic_problem([0.0, 4.0]).with_penalty(LocalOnly())
        with self.assertRaises(ConfigError):
            solution_path(problem, PathConfig(lambda_init=0.1))

    # Growth factors at or below one are rejected
    def test_bad_growth(self):
        with self.assertRaises(ConfigError):
            PathConfig(growth_c=1.0)


class TestPathExports(unittest.TestCase):

    def setUp(self):
        self.path = solution_path(quadratic_problem([0.0, 4.0]), PathConfig(lambda_init=0.4, growth_c=2.0))
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    # One JSON line per entry
    def test_jsonl(self):
        target = write_jsonl(os.path.join(self.tmp.name, "path.jsonl"), self.path)
        with open(target) as handle:
            lines = [json.loads(line) for line in handle]
        self.assertEqual([line["num_clusters"] for line in lines], [2, 2, 1])
        self.assertEqual(lines[-1]["partition"], [[0, 1]])

    # The CSV summary lists lambda, cluster count, objective and convergence
    def test_summary_csv(self):
        target = write_summary_csv(os.path.join(self.tmp.name, "path.csv"), self.path)
        with open(target) as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(list(rows[0]), ["lambda", "num_clusters", "objective", "converged"])
        self.assertEqual(float(rows[-1]["lambda"]), 1.6)
        self.assertEqual(rows[-1]["num_clusters"], "1")

    # The serializer exposes the entries with the lambda grid and counts
    def test_serializer(self):
        data = SolutionPathSerializer(self.path).data
        self.assertEqual(data["cluster_counts"], [2, 2, 1])
        self.assertEqual(len(data["entries"]), 3)


class TestPathConfigSerializer(unittest.TestCase):

    # Defaults come from the settings
    def test_defaults(self):
        serializer = PathConfigSerializer(data={"lambda_init": 0.2})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        cfg = serializer.save()
        self.assertEqual(cfg.growth_c, 2.0)
        self.assertEqual(cfg.max_steps, 60)
        self.assertEqual(cfg.solver, PathSolver.ORACLE)

    # Invalid growth, start and tolerance values are field errors
    def test_rejects_bad_values(self):
        serializer = PathConfigSerializer(data={"growth_c": 1.0, "lambda_init": -1.0, "tie_tol": 0.0})
        self.assertFalse(serializer.is_valid())
        self.assertEqual(set(serializer.errors), {"growth_c", "lambda_init", "tie_tol"})
