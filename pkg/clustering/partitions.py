import logging

import numpy as np

from fusionproject.exceptions import ConfigError
from problem.formulation import Partition, tie_components

logger = logging.getLogger(__name__)


def default_tie_tol(x, rel=1e-5):
    """rel * (1 + mean ||x_i||): ties scale with the iterate magnitude."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return rel * (1.0 + float(np.linalg.norm(X, axis=1).mean()))


def extract_partition(x, tie_tol=None):
    """
    Partition of the users induced by (transitively) tied models.

    Blocks are the connected components of the graph with an edge wherever
    ||x_i - x_j|| <= tie_tol, ordered by smallest member.
    """
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if tie_tol is None:
        tie_tol = default_tie_tol(X)
    if not tie_tol > 0:
        raise ConfigError("tie_tol must be positive")
    return Partition.from_labels(tie_components(X, tie_tol))


def num_distinct_models(x, tie_tol=None):
    return extract_partition(x, tie_tol).K
