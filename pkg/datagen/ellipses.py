"""
Synthetic clustered benchmark: per cluster, two overlapping class ellipses in the
plane; users draw their local datasets from their cluster's training pool.
"""
import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fusionproject.exceptions import ConfigError
from losses.specs import Quadratic, SquaredHinge
from problem.formulation import Partition

logger = logging.getLogger(__name__)

OVERLAP_PROBES = 2000


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple
    semi_axes: tuple
    rotation: float = 0.0
    label: int = 1

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        axes = tuple(float(a) for a in self.semi_axes)
        if len(center) != 2 or len(axes) != 2:
            raise ConfigError("ellipses live in the plane")
        if not all(np.isfinite(a) and a > 0 for a in axes):
            raise ConfigError("ellipse semi-axes must be positive")
        if self.label not in (-1, 1):
            raise ConfigError("ellipse labels must be -1 or +1")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", axes)

    def _rotation_matrix(self):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def level(self, points):
        """(u/a)^2 + (v/b)^2 in the ellipse frame; <= 1 inside."""
        local = (np.asarray(points, dtype=float) - np.array(self.center)) @ self._rotation_matrix()
        a, b = self.semi_axes
        return (local[..., 0] / a) ** 2 + (local[..., 1] / b) ** 2

    def bounding_half_widths(self):
        a, b = self.semi_axes
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([np.hypot(a * c, b * s), np.hypot(a * s, b * c)])

    def sample(self, rng, n):
        """n points uniform in the ellipse by rejection from its bounding box."""
        half = self.bounding_half_widths()
        center = np.array(self.center)
        out = []
        count = 0
        while count < n:
            batch = center + rng.uniform(-1.0, 1.0, size=(max(2 * (n - count), 16), 2)) * half
            inside = batch[self.level(batch) <= 1.0]
            out.append(inside)
            count += inside.shape[0]
        return np.concatenate(out)[:n]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class BenchmarkSpec:
    """
    Attributes:
        clusters (tuple): one (positive ellipse, negative ellipse) pair per cluster.
        points_per_class (int): training points per class and cluster.
        users_per_cluster (int): users associated with each cluster.
        points_per_user (int): local sample size, ignored when ``sample_fraction`` is set.
        sample_fraction (float | None): share of the cluster pool every user draws.
        test_points_per_class (int): fresh test points per class and cluster.
        seed (int): generator seed.
    """
    clusters: tuple
    points_per_class: int = 100
    users_per_cluster: int = 20
    points_per_user: int = 10
    sample_fraction: Optional[float] = None
    test_points_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(pair) for pair in self.clusters))
        if not self.clusters:
            raise ConfigError("a benchmark needs at least one cluster")
        for pos, neg in self.clusters:
            if pos.label != 1 or neg.label != -1:
                raise ConfigError("each cluster pairs a +1 ellipse with a -1 ellipse")
        if min(self.points_per_class, self.users_per_cluster, self.test_points_per_class) < 1:
            raise ConfigError("counts must be positive")
        pool = 2 * self.points_per_class
        if self.sample_fraction is not None:
            if not 0 < self.sample_fraction <= 1:
                raise ConfigError("sample_fraction must lie in (0, 1]")
        elif not 1 <= self.points_per_user <= pool:
            raise ConfigError(f"points_per_user must lie in [1, {pool}]")

    @property
    def K(self):
        return len(self.clusters)

    @property
    def local_size(self):
        if self.sample_fraction is not None:
            return max(1, int(round(self.sample_fraction * 2 * self.points_per_class)))
        return self.points_per_user


@dataclass
class Benchmark:
    cluster_train: list
    user_datasets: list
    cluster_test: list
    true_partition: Partition
    user_cluster: np.ndarray

    @property
    def n_users(self):
        return len(self.user_datasets)


def ellipse_clusters(radius, shift, semi_axes, degrees=(90.0, 210.0, 330.0)):
    """
    One cluster per angle, centered on a circle of ``radius``. Both class ellipses
    have their long axis along the radius and sit ``shift`` to either side of the
    center along the tangent.
    """
    clusters = []
    for value in degrees:
        angle = np.deg2rad(value)
        center = radius * np.array([np.cos(angle), np.sin(angle)])
        normal = np.array([-np.sin(angle), np.cos(angle)])
        pos = EllipseSpec(tuple(center + shift * normal), semi_axes, angle, 1)
        neg = EllipseSpec(tuple(center - shift * normal), semi_axes, angle, -1)
        clusters.append((pos, neg))
    return tuple(clusters)


def default_benchmark_spec(seed=0, **overrides):
    """
    Three clusters close to the origin whose class separators point 120 degrees
    apart: 20 users per cluster with 10 points each.
    """
    return BenchmarkSpec(clusters=ellipse_clusters(1.0, 1.0, (2.0, 1.2)), seed=seed, **overrides)


def separated_benchmark_spec(seed=0, **overrides):
    """
    The three clusters moved out to radius 6, 10 users per cluster each drawing
    85% of its cluster's pool. Users of a cluster hold nearly the same data.
    """
    values = {"users_per_cluster": 10, "sample_fraction": 0.85}
    values.update(overrides)
    return BenchmarkSpec(clusters=ellipse_clusters(6.0, 0.8, (2.0, 1.0)), seed=seed, **values)


def check_overlap(pos, neg, rng):
    """True when some sampled +1 point falls inside the -1 ellipse."""
    return bool(np.any(neg.level(pos.sample(rng, OVERLAP_PROBES)) <= 1.0))


def _class_pool(pos, neg, rng, per_class):
    features = np.vstack([pos.sample(rng, per_class), neg.sample(rng, per_class)])
    labels = np.concatenate([np.ones(per_class), -np.ones(per_class)])
    return Dataset(features, labels)


def generate(spec, require_overlap=True):
    rng = np.random.default_rng(spec.seed)
    cluster_train, cluster_test, users, owner = [], [], [], []
    for k, (pos, neg) in enumerate(spec.clusters):
        if require_overlap and not check_overlap(pos, neg, rng):
            raise ConfigError(f"the class ellipses of cluster {k} do not overlap")
        train = _class_pool(pos, neg, rng, spec.points_per_class)
        cluster_train.append(train)
        cluster_test.append(_class_pool(pos, neg, rng, spec.test_points_per_class))
        for _ in range(spec.users_per_cluster):
            pick = rng.choice(len(train), size=spec.local_size, replace=False)
            users.append(Dataset(train.features[pick], train.labels[pick]))
            owner.append(k)

    owner = np.array(owner)
    logger.info(
        "benchmark: %d clusters, %d users, %d points per user", spec.K, len(users), spec.local_size,
    )
    return Benchmark(cluster_train, users, cluster_test, Partition.from_labels(owner), owner)


def hinge_losses(benchmark, reg_c):
    return [SquaredHinge(d.features, d.labels, reg_c) for d in benchmark.user_datasets]


def centroid_surrogates(benchmark):
    """Unit quadratics anchored at each user's feature centroid."""
    return [Quadratic(d.features.mean(axis=0)) for d in benchmark.user_datasets]


def write_csv(path, benchmark, split="train"):
    """Flat rows (x1, x2, label, cluster, user); test rows leave ``user`` empty."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x1", "x2", "label", "cluster", "user"])
        if split == "train":
            for u, (data, k) in enumerate(zip(benchmark.user_datasets, benchmark.user_cluster)):
                for (x1, x2), label in zip(data.features, data.labels):
                    writer.writerow([repr(float(x1)), repr(float(x2)), int(label), int(k), u])
        else:
            for k, data in enumerate(benchmark.cluster_test):
                for (x1, x2), label in zip(data.features, data.labels):
                    writer.writerow([repr(float(x1)), repr(float(x2)), int(label), k, ""])
    return path
