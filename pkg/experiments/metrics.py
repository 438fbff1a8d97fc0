import logging

import numpy as np
from scipy.spatial.distance import pdist

from fusionproject.exceptions import ConfigError, DimensionMismatch
from problem.formulation import tie_components

logger = logging.getLogger(__name__)


def classify_accuracy(model, dataset):
    """
    Share of points whose label equals sign(<w, a> - b) for model = [w, b].
    A zero score is predicted as +1.
    """
    model = np.asarray(model, dtype=float)
    if len(dataset) == 0:
        raise ConfigError("cannot score an empty dataset")
    if model.shape != (dataset.features.shape[1] + 1,):
        raise DimensionMismatch(dataset.features.shape[1] + 1, model.shape[0], "model")
    scores = dataset.features @ model[:-1] - model[-1]
    predicted = np.where(scores >= 0, 1.0, -1.0)
    return float(np.mean(predicted == dataset.labels))


def average_test_accuracy(X, benchmark):
    """Mean over users of the accuracy on their cluster's test set."""
    return float(np.mean([
        classify_accuracy(X[i], benchmark.cluster_test[k]) for i, k in enumerate(benchmark.user_cluster)
    ]))


def within_cluster_distance(X, partition):
    """Mean Euclidean distance between models of users sharing a planted cluster."""
    distances = [pdist(X[list(block)]) for block in partition.blocks if len(block) > 1]
    if not distances:
        return 0.0
    return float(np.concatenate(distances).mean())


def count_distinct(X, rel_tol):
    tol = rel_tol * (1.0 + float(np.linalg.norm(X, axis=1).mean()))
    return int(tie_components(X, tol).max()) + 1
