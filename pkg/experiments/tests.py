import csv
import json
import os
import tempfile
import unittest
from io import StringIO

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient

from datagen.ellipses import Dataset, default_benchmark_spec, separated_benchmark_spec
from fusionproject.exceptions import ConfigError, DimensionMismatch
from losses.specs import Quadratic
from pdmm.protocol import PdmmConfig
from problem.formulation import SUM_ORDERED, FederationProblem, Partition, SumOfNorms

from .metrics import classify_accuracy, count_distinct, within_cluster_distance
from .runner import (
    METRIC_COLUMNS,
    ExperimentConfig,
    Family,
    benchmark_problem,
    pdmm_gap_experiment,
    recovery_window_experiment,
    run_experiment,
    run_pool,
)
from .serializers import ExperimentConfigSerializer


def two_point_document(lam=1.0, **extra):
    document = {
        "losses": [{"kind": "quadratic", "anchor": [0.0]}, {"kind": "quadratic", "anchor": [4.0]}],
        "penalty": {"kind": "sum_of_norms", "lambda": lam},
        "convention": "sum-ordered",
    }
    document.update(extra)
    return document


def small_benchmark():
    return default_benchmark_spec(points_per_class=20, users_per_cluster=2, points_per_user=5, test_points_per_class=20)


def read_csv(path):
    with open(path) as handle:
        return list(csv.DictReader(handle))


class TestMetrics(unittest.TestCase):

    # A separating model classifies both points
    def test_perfect_model(self):
        data = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -1.0]))
        self.assertEqual(classify_accuracy([1.0, 0.0, 0.0], data), 1.0)
        self.assertEqual(classify_accuracy([-1.0, 0.0, 0.0], data), 0.0)

    # A zero score counts as a positive prediction
    def test_zero_score_is_positive(self):
        data = Dataset(np.array([[0.0, 0.0]]), np.array([1.0]))
        self.assertEqual(classify_accuracy([1.0, 1.0, 0.0], data), 1.0)

    # A random model on random labels scores about one half
    def test_random_model(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.normal(size=(10000, 2)), np.where(rng.random(10000) < 0.5, -1.0, 1.0))
        self.assertAlmostEqual(classify_accuracy(rng.normal(size=3), data), 0.5, delta=0.02)

    # Models of the wrong size and empty datasets are rejected
    def test_invalid_inputs(self):
        data = Dataset(np.zeros((2, 2)), np.ones(2))
        with self.assertRaises(DimensionMismatch):
            classify_accuracy([1.0, 0.0], data)
        with self.assertRaises(ConfigError):
            classify_accuracy([1.0, 0.0, 0.0], Dataset(np.zeros((0, 2)), np.zeros(0)))

    # Distances are averaged over pairs inside planted clusters only
    def test_within_cluster_distance(self):
        X = np.array([[0.0, 0.0], [3.0, 4.0], [9.0, 9.0]])
        self.assertEqual(within_cluster_distance(X, Partition(((0, 1), (2,)))), 5.0)
        self.assertEqual(within_cluster_distance(X, Partition.singletons(3)), 0.0)

    # Models equal up to the relative tolerance count once
    def test_count_distinct(self):
        X = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-12], [2.0, 0.0]])
        self.assertEqual(count_distinct(X, 1e-8), 2)
        self.assertEqual(count_distinct(X, 1.0), 1)


class TestRunner(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    # Every family runs, rows are ordered and all artifacts are written
    def test_small_experiment(self):
        cfg = ExperimentConfig(
            benchmark=small_benchmark(),
            lambda_grid=(0.01, 100.0),
            gamma_grid=(0.1,),
            seeds=(0,),
            output_dir=self.tmp.name,
        )
        rows = run_experiment(cfg)
        self.assertEqual([r.family for r in rows], [
            Family.GLOBAL, Family.LOCAL, Family.SQUARED_PENALTY, Family.SUM_OF_NORMS, Family.SUM_OF_NORMS, Family.ORACLE,
        ])
        self.assertEqual(rows[0].num_distinct_models, 1)
        self.assertEqual(rows[-1].num_distinct_models, 3)
        self.assertEqual(rows[4].num_distinct_models, 1)
        self.assertTrue(all(0.0 <= r.avg_test_accuracy <= 1.0 for r in rows))

        metrics = read_csv(os.path.join(self.tmp.name, "metrics.csv"))
        self.assertEqual(list(metrics[0]), METRIC_COLUMNS)
        self.assertEqual(len(metrics), 6)
        self.assertEqual(len(os.listdir(os.path.join(self.tmp.name, "solutions"))), 6)
        self.assertEqual(len(read_csv(os.path.join(self.tmp.name, "summary.csv"))), 6)
        with open(os.path.join(self.tmp.name, "meta.json")) as handle:
            meta = json.load(handle)
        self.assertEqual(meta["schema_version"], 1)
        self.assertEqual(meta["convention"], "sum-ordered")

    # Identical configurations write identical metrics
    def test_deterministic_results(self):
        contents = []
        for name in ("a", "b"):
            cfg = ExperimentConfig(
                benchmark=small_benchmark(),
                seeds=(1, 2),
                families=("global", "local"),
                output_dir=os.path.join(self.tmp.name, name),
            )
            run_experiment(cfg)
            with open(os.path.join(self.tmp.name, name, "metrics.csv")) as handle:
                contents.append(handle.read())
        self.assertEqual(contents[0], contents[1])

    # The worker pool keeps task order
    def test_run_pool_order(self):
        self.assertEqual(run_pool(abs, [-3, 2, -1], 2), [3, 2, 1])
        self.assertEqual(run_pool(abs, [-3, 2, -1], 1), [3, 2, 1])

    # Empty grids and negative penalties are rejected
    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig(lambda_grid=())
        with self.assertRaises(ConfigError):
            ExperimentConfig(gamma_grid=(-1.0,))
        with self.assertRaises(ConfigError):
            ExperimentConfig(seeds=())

    # Serializer defaults come from the settings
    def test_serializer_defaults(self):
        serializer = ExperimentConfigSerializer(data={"families": ["global"]})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        cfg = serializer.save()
        self.assertEqual(cfg.seeds, (0, 1, 2, 3, 4))
        self.assertEqual(len(cfg.lambda_grid), 30)
        self.assertAlmostEqual(cfg.lambda_grid[0], 1e-3)
        self.assertAlmostEqual(cfg.lambda_grid[-1], 1e3)
        self.assertEqual(cfg.distinct_tol, 1e-8)
        self.assertEqual(cfg.convention, SUM_ORDERED)

    # Without iterations the gap is the initial gap and one trace row is written
    def test_gap_trace_without_iterations(self):
        problem = FederationProblem([Quadratic([0.0]), Quadratic([4.0])], 1, SumOfNorms(1.0), SUM_ORDERED)
        target = os.path.join(self.tmp.name, "trace.csv")
        result = pdmm_gap_experiment(problem, PdmmConfig(max_iters=0), out=target)
        self.assertAlmostEqual(result.f_star, 4.0, places=6)
        self.assertEqual(len(result.gaps), 1)
        self.assertAlmostEqual(result.gaps[0], 4.0, places=6)
        rows = read_csv(target)
        self.assertEqual(len(rows), 1)
        self.assertAlmostEqual(float(rows[0]["gap"]), 4.0, places=6)

    # The gap trace decays on a two-user instance
    def test_gap_trace_decays(self):
        problem = FederationProblem([Quadratic([0.0]), Quadratic([4.0])], 1, SumOfNorms(0.5), SUM_ORDERED)
        result = pdmm_gap_experiment(problem, PdmmConfig(max_iters=2000))
        self.assertEqual(len(result.trace), 2001)
        self.assertLess(result.gaps[-1], 1e-2 * result.gaps[0])
        self.assertEqual(result.ledger.uplink_msgs, 2000 * 2)


@tag("slow")
class TestBenchmarkTrends(unittest.TestCase):

    # Sum-of-norms beats both the global and the local models inside the personalization band,
    # tracks local training as lambda vanishes and reaches consensus at the top of the grid
    def test_family_trends(self):
        near_zero, band, top = 1e-6, (1e-3, 3e-3, 0.01, 0.03, 0.1), 1000.0
        grid = (near_zero,) + band + (top,)
        config = ExperimentConfig(lambda_grid=grid, gamma_grid=grid, seeds=(0, 1, 2, 3, 4))
        self.assertEqual(config.convention, SUM_ORDERED)
        rows = run_experiment(config)

        def median(family, field, value=None):
            return float(np.median([
                getattr(r, field) for r in rows if r.family is family and (value is None or r.lambda_or_gamma == value)
            ]))

        global_acc = median(Family.GLOBAL, "avg_test_accuracy")
        local_acc = median(Family.LOCAL, "avg_test_accuracy")
        self.assertGreater(median(Family.ORACLE, "avg_test_accuracy"), global_acc)
        peak = max(median(Family.SUM_OF_NORMS, "avg_test_accuracy", lam) for lam in band)
        self.assertGreater(peak, global_acc)
        self.assertGreater(peak, local_acc)
        self.assertAlmostEqual(median(Family.SUM_OF_NORMS, "avg_test_accuracy", near_zero), local_acc, delta=1e-2)
        self.assertGreater(median(Family.SUM_OF_NORMS, "num_distinct_models", near_zero), 3)
        self.assertEqual(median(Family.SUM_OF_NORMS, "num_distinct_models", top), 1)
        self.assertGreater(median(Family.SQUARED_PENALTY, "num_distinct_models", top), 1)
        fused = [v for v in grid if median(Family.SUM_OF_NORMS, "num_distinct_models", v) == 1]
        self.assertIn(top, fused)
        for value in fused:
            self.assertLessEqual(
                median(Family.SUM_OF_NORMS, "avg_within_cluster_distance", value),
                median(Family.SQUARED_PENALTY, "avg_within_cluster_distance", value) + 1e-9,
            )
        self.assertLessEqual(
            median(Family.SUM_OF_NORMS, "avg_within_cluster_distance", near_zero),
            1.05 * median(Family.SQUARED_PENALTY, "avg_within_cluster_distance", near_zero) + 1e-9,
        )

    # On a squared hinge benchmark the protocol gap keeps shrinking well below its early value
    def test_hinge_gap_decay(self):
        spec = separated_benchmark_spec(users_per_cluster=4, sample_fraction=None)
        problem, _ = benchmark_problem(spec, lam=0.1)
        self.assertEqual(problem.n_users, 12)
        gaps = pdmm_gap_experiment(problem, PdmmConfig(max_iters=1000)).gaps
        self.assertEqual(len(gaps), 1001)
        self.assertLess(gaps[1000], gaps[100])
        self.assertLessEqual(gaps[-1], gaps[10] / 10)

    # The path on surrogate losses recovers the planted clusters inside the sampled interval
    def test_recovery_window(self):
        window = recovery_window_experiment(n_samples=2000)
        self.assertTrue(window.planted_segments)
        self.assertTrue(window.intersects)
        self.assertEqual(window.path.cluster_counts[-1], 1)


class TestApi(SimpleTestCase):

    def setUp(self):
        self.client = APIClient()

    # Solving two anchors at lambda 1 fuses them at the midpoint
    def test_solve(self):
        response = self.client.post(reverse("solve"), two_point_document(), format="json")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        np.testing.assert_allclose(response.data["x"], [[2.0], [2.0]], atol=1e-6)
        self.assertTrue(response.data["converged"])

    # The protocol reports its communication ledger
    def test_solve_with_protocol(self):
        document = two_point_document(solver="pdmm", pdmm={"max_iters": 50, "seed": 1})
        response = self.client.post(reverse("solve"), document, format="json")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertIn("ledger", response.data)
        self.assertEqual(response.data["iters"], 50)

    # A document without losses is a bad request
    def test_solve_invalid(self):
        response = self.client.post(reverse("solve"), {"penalty": {"kind": "local"}}, format="json")
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn("losses", response.data)

    # A fused solution above the threshold is certified
    def test_certify(self):
        response = self.client.post(reverse("certify"), two_point_document(1.5, solution=[[2.0], [2.0]]), format="json")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data["K"], 1)
        self.assertAlmostEqual(response.data["lower_threshold"], 1.0)
        self.assertTrue(response.data["recovered"])
        self.assertEqual(response.data["convention"], "sum-ordered")

    # Certificates need the sum-of-norms penalty
    def test_certify_wrong_penalty(self):
        document = two_point_document()
        document["penalty"] = {"kind": "consensus"}
        response = self.client.post(reverse("certify"), document, format="json")
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn("penalty", response.data)

    # The path reports its lambda grid and cluster counts
    def test_path(self):
        document = two_point_document(path={"lambda_init": 0.1, "growth_c": 2.0})
        response = self.client.post(reverse("path"), document, format="json")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data["cluster_counts"], [2, 2, 2, 2, 1])
        self.assertEqual(len(response.data["entries"]), 5)

    # A growth factor of one is a bad request
    def test_path_invalid_growth(self):
        document = two_point_document(path={"growth_c": 1.0})
        response = self.client.post(reverse("path"), document, format="json")
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)

    # The OpenAPI schema is served
    def test_schema(self):
        response = self.client.get(reverse("schema"))
        self.assertEqual(response.status_code, status.HTTP_200_OK)

    # The WSGI application loads with the project settings
    def test_wsgi_application(self):
        from fusionproject.wsgi import application
        self.assertTrue(callable(application))


class TestCommands(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.tmp.name, "out")

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, document, name="config.json"):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w") as handle:
            json.dump(document, handle)
        return path

    def run_command(self, name, **options):
        stdout = StringIO()
        call_command(name, stdout=stdout, out=self.out, **options)
        return stdout.getvalue()

    # solve writes solution.json and honors the lambda flag
    def test_solve(self):
        output = self.run_command("solve", config=self.write_config(two_point_document(0.5)), lam=1.0)
        self.assertIn("objective=", output)
        with open(os.path.join(self.out, "solution.json")) as handle:
            solution = json.load(handle)
        np.testing.assert_allclose(solution["x"], [[2.0], [2.0]], atol=1e-6)

    # Invalid documents exit with code 2
    def test_solve_invalid_config(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("solve", config=self.write_config({"penalty": {"kind": "local"}}))
        self.assertEqual(ctx.exception.returncode, 2)

    # Unreadable documents exit with code 2
    def test_missing_config(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("solve", config=os.path.join(self.tmp.name, "missing.json"))
        self.assertEqual(ctx.exception.returncode, 2)

    # Running out of iterations exits with code 3 after writing the result
    def test_solve_not_converged(self):
        document = two_point_document(0.3, oracle={"max_iters": 2, "polish": False})
        with self.assertRaises(CommandError) as ctx:
            self.run_command("solve", config=self.write_config(document))
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertTrue(os.path.exists(os.path.join(self.out, "solution.json")))

    # certify writes certificate.json with the convention
    def test_certify(self):
        self.run_command("certify", config=self.write_config(two_point_document(1.5)))
        with open(os.path.join(self.out, "certificate.json")) as handle:
            certificate = json.load(handle)
        self.assertTrue(certificate["recovered"])
        self.assertEqual(certificate["convention"], "sum-ordered")

    # path writes the JSON lines and the CSV summary
    def test_path(self):
        output = self.run_command("path", config=self.write_config(two_point_document()), lam=0.1)
        self.assertIn("lambda=1.6 clusters=1", output)
        rows = read_csv(os.path.join(self.out, "path.csv"))
        self.assertEqual([r["num_clusters"] for r in rows], ["2", "2", "2", "2", "1"])
        with open(os.path.join(self.out, "path.jsonl")) as handle:
            self.assertEqual(len(handle.readlines()), 5)

    # benchmark writes metrics, summary, solutions and metadata
    def test_benchmark(self):
        document = {
            "benchmark": {"points_per_class": 20, "users_per_cluster": 2, "points_per_user": 5, "test_points_per_class": 20},
            "families": ["global", "local", "oracle"],
        }
        self.run_command("benchmark", config=self.write_config(document), seed=0)
        self.assertEqual(len(read_csv(os.path.join(self.out, "metrics.csv"))), 3)
        with open(os.path.join(self.out, "meta.json")) as handle:
            self.assertEqual(json.load(handle)["seeds"], [0])

    # pdmm_trace writes one row per iteration plus the initial state
    def test_pdmm_trace(self):
        document = {"problem": two_point_document(), "pdmm": {"max_iters": 30}}
        output = self.run_command("pdmm_trace", config=self.write_config(document), seed=3)
        self.assertIn("uplink=", output)
        rows = read_csv(os.path.join(self.out, "trace.csv"))
        self.assertEqual(len(rows), 31)
        self.assertEqual(rows[0]["t"], "0")

    # datagen writes the dataset document and both CSV splits
    def test_datagen(self):
        document = {"points_per_class": 10, "users_per_cluster": 2, "points_per_user": 4, "test_points_per_class": 5}
        self.run_command("datagen", config=self.write_config(document), seed=4)
        with open(os.path.join(self.out, "dataset.json")) as handle:
            dataset = json.load(handle)
        self.assertEqual(dataset["spec"]["seed"], 4)
        self.assertEqual(len(dataset["user_datasets"]), 6)
        self.assertEqual(len(read_csv(os.path.join(self.out, "train.csv"))), 6 * 4)
        self.assertEqual(len(read_csv(os.path.join(self.out, "test.csv"))), 3 * 10)
