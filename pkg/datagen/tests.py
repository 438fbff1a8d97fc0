import csv
import os
import tempfile
import unittest

import numpy as np

from fusionproject.exceptions import ConfigError

from .ellipses import (
    BenchmarkSpec,
    EllipseSpec,
    centroid_surrogates,
    check_overlap,
    default_benchmark_spec,
    ellipse_clusters,
    generate,
    hinge_losses,
    separated_benchmark_spec,
    write_csv,
)
from .serializers import BenchmarkSpecSerializer, benchmark_to_dict


def small_spec(seed=7, **overrides):
    values = {"points_per_class": 30, "users_per_cluster": 3, "points_per_user": 5, "test_points_per_class": 20}
    values.update(overrides)
    return default_benchmark_spec(seed=seed, **values)


class TestEllipseSampling(unittest.TestCase):

    # Uniform samples of the unit disk center on its center and stay inside
    def test_unit_circle(self):
        disk = EllipseSpec((1.0, -2.0), (1.0, 1.0))
        points = disk.sample(np.random.default_rng(0), 10000)
        self.assertEqual(points.shape, (10000, 2))
        np.testing.assert_allclose(points.mean(axis=0), [1.0, -2.0], atol=0.05)
        self.assertTrue(np.all(disk.level(points) <= 1.0 + 1e-12))

    # Rotated ellipses keep their samples inside
    def test_rotated_ellipse(self):
        ellipse = EllipseSpec((0.0, 0.0), (3.0, 0.5), rotation=0.7)
        points = ellipse.sample(np.random.default_rng(1), 2000)
        self.assertTrue(np.all(ellipse.level(points) <= 1.0 + 1e-12))
        self.assertGreater(np.abs(points).max(), 2.0)

    # Degenerate axes and bad labels are rejected
    def test_invalid_ellipse(self):
        with self.assertRaises(ConfigError):
            EllipseSpec((0.0, 0.0), (1.0, 0.0))
        with self.assertRaises(ConfigError):
            EllipseSpec((0.0, 0.0), (1.0, 1.0), label=0)

    # The default classes of every cluster overlap
    def test_default_overlap(self):
        rng = np.random.default_rng(2)
        for pos, neg in default_benchmark_spec().clusters:
            self.assertTrue(check_overlap(pos, neg, rng))

    # Cluster centers sit on the circle with both classes astride the tangent
    def test_ellipse_clusters(self):
        clusters = ellipse_clusters(2.0, 0.5, (1.5, 1.0), degrees=(0.0, 90.0))
        self.assertEqual(len(clusters), 2)
        pos, neg = clusters[1]
        np.testing.assert_allclose(pos.center, [-0.5, 2.0], atol=1e-12)
        np.testing.assert_allclose(neg.center, [0.5, 2.0], atol=1e-12)
        self.assertEqual((pos.label, neg.label), (1, -1))
        self.assertAlmostEqual(pos.rotation, np.pi / 2)

    # The separated classes overlap as well
    def test_separated_overlap(self):
        rng = np.random.default_rng(3)
        for pos, neg in separated_benchmark_spec().clusters:
            self.assertTrue(check_overlap(pos, neg, rng))


class TestGenerate(unittest.TestCase):

    # One cluster with 100 points per class holds a balanced pool of 200
    def test_single_cluster_pool(self):
        spec = BenchmarkSpec(clusters=(default_benchmark_spec().clusters[0],), points_per_class=100)
        benchmark = generate(separated_benchmark_spec())
        train = benchmark.cluster_train[0]
        self.assertEqual(len(train), 200)
        self.assertEqual(int((train.labels == 1).sum()), 100)
        self.assertEqual(int((train.labels == -1).sum()), 100)

    # Every point lies in the ellipse of its class
    def test_points_inside_ellipses(self):
        spec = small_spec()
        benchmark = generate(separated_benchmark_spec())
        for (pos, neg), train, test in zip(spec.clusters, benchmark.cluster_train, benchmark.cluster_test):
            for data in (train, test):
                self.assertTrue(np.all(pos.level(data.features[data.labels == 1]) <= 1.0 + 1e-12))
                self.assertTrue(np.all(neg.level(data.features[data.labels == -1]) <= 1.0 + 1e-12))

    # Users hold distinct points of their own cluster's pool
    def test_users_draw_from_cluster_pool(self):
        benchmark = generate(small_spec())
        self.assertEqual(benchmark.n_users, 9)
        self.assertEqual(benchmark.true_partition.blocks, ((0, 1, 2), (3, 4, 5), (6, 7, 8)))
        for data, k in zip(benchmark.user_datasets, benchmark.user_cluster):
            pool = {tuple(row) for row in benchmark.cluster_train[k].features}
            rows = {tuple(row) for row in data.features}
            self.assertEqual(len(rows), 5)
            self.assertTrue(rows <= pool)

    # A sampling fraction of 0.85 gives each user 170 of 200 points
    def test_sample_fraction(self):
        benchmark = generate(default_benchmark_spec(seed=1, users_per_cluster=2, sample_fraction=0.85))
        self.assertTrue(all(len(d) == 170 for d in benchmark.user_datasets))

    # The separated preset gives 30 users each holding 170 of its cluster's 200 points
    def test_separated_preset(self):
        benchmark = generate(separated_benchmark_spec())
        self.assertEqual(benchmark.n_users, 30)
        self.assertTrue(all(len(d) == 170 for d in benchmark.user_datasets))
        centers = [np.mean(pool.features, axis=0) for pool in benchmark.cluster_train]
        self.assertTrue(all(np.linalg.norm(c) > 4.0 for c in centers))

    # The same spec and seed give the same data
    def test_determinism(self):
        a, b = generate(small_spec()), generate(small_spec())
        for x, y in zip(a.user_datasets, b.user_datasets):
            np.testing.assert_array_equal(x.features, y.features)
        c = generate(small_spec(seed=8))
        self.assertFalse(np.array_equal(a.user_datasets[0].features, c.user_datasets[0].features))

    # Separated class ellipses fail the overlap requirement
    def test_requires_overlap(self):
        pos = EllipseSpec((0.0, 5.0), (1.0, 1.0), label=1)
        neg = EllipseSpec((0.0, -5.0), (1.0, 1.0), label=-1)
        spec = BenchmarkSpec(clusters=((pos, neg),), points_per_class=20, users_per_cluster=2, points_per_user=4)
        with self.assertRaises(ConfigError):
            generate(spec)
        self.assertEqual(generate(spec, require_overlap=False).n_users, 2)

    # Users cannot sample more points than their pool holds
    def test_oversized_users(self):
        with self.assertRaises(ConfigError):
            small_spec(points_per_user=61)

    # Losses are built per user
    def test_user_losses(self):
        benchmark = generate(small_spec())
        losses = hinge_losses(benchmark, 1e-3)
        self.assertEqual(len(losses), 9)
        self.assertEqual(losses[0].dim, 3)
        anchors = [q.anchor for q in centroid_surrogates(benchmark)]
        np.testing.assert_allclose(anchors[4], benchmark.user_datasets[4].features.mean(axis=0))


class TestExports(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.benchmark = generate(small_spec())

    def tearDown(self):
        self.tmp.cleanup()

    # Training rows carry the owning user and cluster
    def test_train_csv(self):
        target = write_csv(os.path.join(self.tmp.name, "train.csv"), self.benchmark)
        with open(target) as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(list(rows[0]), ["x1", "x2", "label", "cluster", "user"])
        self.assertEqual(len(rows), 9 * 5)
        self.assertEqual({r["cluster"] for r in rows if r["user"] == "8"}, {"2"})

    # Test rows leave the user column empty
    def test_test_csv(self):
        target = write_csv(os.path.join(self.tmp.name, "test.csv"), self.benchmark, split="test")
        with open(target) as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 3 * 40)
        self.assertTrue(all(r["user"] == "" for r in rows))

    # The JSON document lists the partition and every dataset
    def test_json_document(self):
        document = benchmark_to_dict(self.benchmark)
        self.assertEqual(document["true_partition"][1], [3, 4, 5])
        self.assertEqual(len(document["user_datasets"]), 9)
        self.assertEqual(set(document["cluster_test"][0]["labels"]), {-1, 1})


class TestBenchmarkSpecSerializer(unittest.TestCase):

    # Without clusters the default geometry is used
    def test_default_geometry(self):
        serializer = BenchmarkSpecSerializer(data={"seed": 3, "users_per_cluster": 4})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        spec = serializer.save()
        self.assertEqual(spec.K, 3)
        self.assertEqual((spec.seed, spec.users_per_cluster, spec.points_per_class), (3, 4, 100))

    # Explicit clusters are parsed into ellipse pairs
    def test_custom_clusters(self):
        cluster = {
            "positive": {"center": [0.0, 0.5], "semi_axes": [2.0, 1.0], "label": 1},
            "negative": {"center": [0.0, -0.5], "semi_axes": [2.0, 1.0], "label": -1},
        }
        serializer = BenchmarkSpecSerializer(data={"clusters": [cluster]})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        spec = serializer.save()
        self.assertEqual(spec.K, 1)
        self.assertEqual(BenchmarkSpecSerializer(spec).data["clusters"][0]["negative"]["center"], [0.0, -0.5])

    # Nonpositive axes and fractions outside (0, 1] are field errors
    def test_invalid_values(self):
        cluster = {
            "positive": {"center": [0.0, 0.5], "semi_axes": [2.0, -1.0], "label": 1},
            "negative": {"center": [0.0, -0.5], "semi_axes": [2.0, 1.0], "label": -1},
        }
        serializer = BenchmarkSpecSerializer(data={"clusters": [cluster], "sample_fraction": 1.5})
        self.assertFalse(serializer.is_valid())
        self.assertIn("clusters", serializer.errors)
        self.assertIn("sample_fraction", serializer.errors)
