"""
Objective formulations over N local costs.

A problem couples per-user models through one of five penalties: sum of norms,
squared norms, none (local models), consensus (one global model) and the clustered
sum of norms over K cluster models. Every objective has the shape

    F(w) = alpha * sum_i f_i(w_{block(i)}) + sum_{k != l} Omega_kl * phi(||w_k - w_l||)

where the sum runs over ordered block pairs, alpha is the loss factor of the
convention and Omega carries lambda (or gamma), the pair-order factor and, for
clustered problems, the n_k n_l weights.
"""
import enum
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import ClassVar

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from fusionproject.exceptions import ConfigError, DimensionMismatch, PartitionError
from losses.specs import AveragedLoss, StackedLosses

logger = logging.getLogger(__name__)


class LossScale(enum.Enum):
    MEAN_OVER_N = "mean"
    SUM = "sum"


class PairOrder(enum.Enum):
    ORDERED = "ordered"
    UNORDERED = "unordered"


@dataclass(frozen=True)
class Convention:
    """
    Normalization of the objective.

    Attributes:
        loss_scale (LossScale): whether the loss term carries 1/N.
        pair_order (PairOrder): whether (i, j) and (j, i) are both counted.
    """
    loss_scale: LossScale = LossScale.MEAN_OVER_N
    pair_order: PairOrder = PairOrder.ORDERED

    @classmethod
    def from_label(cls, label):
        try:
            scale, order = label.split("-")
            return cls(LossScale(scale), PairOrder(order))
        except (AttributeError, ValueError):
            raise ConfigError(
                f"unknown convention {label!r}; expected one of {', '.join(CONVENTION_LABELS)}"
            )

    @property
    def label(self):
        return f"{self.loss_scale.value}-{self.pair_order.value}"

    def loss_factor(self, n_users):
        return 1.0 / n_users if self.loss_scale is LossScale.MEAN_OVER_N else 1.0

    @property
    def pair_factor(self):
        """Weight applied to the sum over ordered pairs."""
        return 1.0 if self.pair_order is PairOrder.ORDERED else 0.5

    def recovery_scale(self, n_users):
        """
        Factor mapping the recovery constants written for sum-normalized,
        unordered-pair KKT conditions into this convention's lambda units.
        """
        return self.loss_factor(n_users) / (2.0 * self.pair_factor)


CONVENTION_LABELS = ("mean-ordered", "mean-unordered", "sum-ordered", "sum-unordered")
SUM_ORDERED = Convention(LossScale.SUM, PairOrder.ORDERED)


@dataclass(frozen=True)
class Partition:
    """
    Disjoint nonempty blocks covering {0, ..., N-1}.

    Users are indexed from 0 in code and in JSON documents.
    """
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in block) for block in self.blocks)
        if not blocks or any(len(block) == 0 for block in blocks):
            raise PartitionError("partition blocks must be nonempty")
        members = [i for block in blocks for i in block]
        if len(set(members)) != len(members):
            raise PartitionError("partition blocks must be disjoint")
        if sorted(members) != list(range(len(members))):
            raise PartitionError(f"partition must cover users 0..{len(members) - 1}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_labels(cls, labels):
        """Blocks ordered by their smallest member."""
        labels = np.asarray(labels)
        _, first = np.unique(labels, return_index=True)
        order = labels[np.sort(first)]
        return cls(tuple(tuple(np.flatnonzero(labels == lab).tolist()) for lab in order))

    @classmethod
    def singletons(cls, n):
        return cls(tuple((i,) for i in range(n)))

    @classmethod
    def whole(cls, n):
        return cls((tuple(range(n)),))

    @property
    def n_users(self):
        return sum(len(block) for block in self.blocks)

    @property
    def K(self):
        return len(self.blocks)

    @property
    def sizes(self):
        return np.array([len(block) for block in self.blocks], dtype=float)

    def labels(self):
        out = np.empty(self.n_users, dtype=int)
        for k, block in enumerate(self.blocks):
            out[list(block)] = k
        return out

    def check(self, n_users):
        if self.n_users != n_users:
            raise PartitionError(f"partition covers {self.n_users} users, problem has {n_users}")
        return self

    def canonical(self):
        return tuple(sorted(tuple(sorted(block)) for block in self.blocks))


@dataclass(frozen=True)
class SumOfNorms:
    lam: float
    kind: ClassVar[str] = "sum_of_norms"
    couples: ClassVar[bool] = True
    smooth: ClassVar[bool] = False


@dataclass(frozen=True)
class SquaredNorms:
    gamma: float
    kind: ClassVar[str] = "squared_norms"
    couples: ClassVar[bool] = True
    smooth: ClassVar[bool] = True


@dataclass(frozen=True)
class LocalOnly:
    kind: ClassVar[str] = "local"
    couples: ClassVar[bool] = False
    smooth: ClassVar[bool] = True


@dataclass(frozen=True)
class GlobalConsensus:
    kind: ClassVar[str] = "consensus"
    couples: ClassVar[bool] = False
    smooth: ClassVar[bool] = True


@dataclass(frozen=True)
class ClusteredSumOfNorms:
    lam: float
    partition: Partition
    kind: ClassVar[str] = "clustered_sum_of_norms"
    couples: ClassVar[bool] = True
    smooth: ClassVar[bool] = False


@dataclass(frozen=True, eq=False)
class FederationProblem:
    """
    N local costs, their dimension, a penalty and a normalization convention.

    Attributes:
        losses (tuple[LossSpec]): the local costs f_i.
        dim_d (int): model dimension.
        penalty: SumOfNorms | SquaredNorms | LocalOnly | GlobalConsensus | ClusteredSumOfNorms.
        convention (Convention): loss and pair normalization.
    """
    losses: tuple
    dim_d: int
    penalty: object
    convention: Convention = Convention()

    def __post_init__(self):
        losses = tuple(self.losses)
        object.__setattr__(self, "losses", losses)
        if not losses:
            raise ConfigError("a problem needs at least one loss")
        for i, loss in enumerate(losses):
            if loss.dim != self.dim_d:
                raise DimensionMismatch(self.dim_d, loss.dim, f"loss {i}")
        weight = getattr(self.penalty, "lam", getattr(self.penalty, "gamma", 0.0))
        if not (np.isfinite(weight) and weight >= 0):
            raise ConfigError("penalty weights must be finite and nonnegative")
        if isinstance(self.penalty, ClusteredSumOfNorms):
            self.penalty.partition.check(len(losses))

    @property
    def n_users(self):
        return len(self.losses)

    @property
    def loss_factor(self):
        return self.convention.loss_factor(self.n_users)

    @property
    def partition(self):
        """Block structure of the models the objective is written over."""
        if isinstance(self.penalty, ClusteredSumOfNorms):
            return self.penalty.partition
        if isinstance(self.penalty, GlobalConsensus):
            return Partition.whole(self.n_users)
        return Partition.singletons(self.n_users)

    @property
    def n_models(self):
        return self.partition.K

    @cached_property
    def stacked(self):
        partition = self.partition
        return StackedLosses(self.losses, partition.labels(), partition.K)

    @cached_property
    def coupling(self):
        """Omega: ordered-pair weights, symmetric with zero diagonal."""
        m = self.n_models
        weight = getattr(self.penalty, "lam", getattr(self.penalty, "gamma", 0.0))
        if not self.penalty.couples or m == 1:
            return np.zeros((m, m))
        sizes = self.partition.sizes
        omega = weight * self.convention.pair_factor * np.outer(sizes, sizes)
        np.fill_diagonal(omega, 0.0)
        return omega

    @property
    def cluster_losses(self):
        """The averaged per-cluster costs g_k."""
        return [AveragedLoss(tuple(self.losses[i] for i in block)) for block in self.partition.blocks]

    def with_penalty(self, penalty):
        return FederationProblem(self.losses, self.dim_d, penalty, self.convention)

    def check_stack(self, x):
        X = np.asarray(x, dtype=float)
        m = self.n_models
        if X.ndim == 1 and m == 1 and X.shape[0] == self.dim_d:
            X = X.reshape(1, -1)
        if X.ndim == 1 and self.dim_d == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] != m:
            raise DimensionMismatch(m, X.shape[0] if X.ndim else 0, "stack length")
        if X.shape[1] != self.dim_d:
            raise DimensionMismatch(self.dim_d, X.shape[1], "model dimension")
        return X


def pairwise_distances(X):
    return squareform(pdist(X)) if X.shape[0] > 1 else np.zeros((1, 1))


def objective(problem, x):
    """Exact objective of ``problem`` at the stack ``x`` under its convention."""
    X = problem.check_stack(x)
    value = problem.loss_factor * float(problem.stacked.value(X))
    if problem.penalty.couples and problem.n_models > 1:
        dist = pairwise_distances(X)
        if isinstance(problem.penalty, SquaredNorms):
            dist = dist * dist
        value += float(np.sum(problem.coupling * dist))
    return value


def objective_gradient(problem, x):
    """Gradient of a smooth formulation (squared norms, local, consensus)."""
    if not problem.penalty.smooth:
        raise ConfigError(f"{problem.penalty.kind} is not differentiable")
    X = problem.check_stack(x)
    grad = problem.loss_factor * problem.stacked.block_grads(X)
    if isinstance(problem.penalty, SquaredNorms):
        omega = problem.coupling
        grad += 4.0 * (omega.sum(axis=1)[:, None] * X - omega @ X)
    return grad


def tie_components(X, tol):
    """
    Connected components of the graph with edges ||x_i - x_j|| <= tol.

    Labels are numbered by smallest member index.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 1:
        return np.zeros(1, dtype=int)
    adjacency = csr_matrix(pairwise_distances(X) <= tol)
    _, raw = connected_components(adjacency, directed=False)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    return relabel[raw]


def _unit_directions(X):
    diff = X[:, None, :] - X[None, :, :]
    norms = np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)


def _group_flow_residual(required, weights, iters):
    """
    Smallest max-norm residual r_k + sum_l c_kl v_kl over antisymmetric v with ||v_kl|| <= 1.

    Starts from the least-squares flow v_kl = c_kl (u_k - u_l), L u = -r, and
    falls back to accelerated projected gradient when that flow leaves the ball.
    """
    m = required.shape[0]
    laplacian = np.diag((weights ** 2).sum(axis=1)) - weights ** 2
    u = -np.linalg.pinv(laplacian) @ required
    flow = weights[:, :, None] * (u[:, None, :] - u[None, :, :])

    def residual_of(v):
        return required + np.einsum("kl,kld->kd", weights, v)

    def project(v):
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.maximum(norms, 1.0)

    if np.linalg.norm(flow, axis=-1).max() <= 1.0 + 1e-12:
        return np.linalg.norm(residual_of(project(flow)), axis=-1).max()

    upper = np.triu(np.ones((m, m), dtype=bool), 1)
    step = 1.0 / (2.0 * max(np.linalg.eigvalsh(laplacian)[-1], 1e-300))

    def antisym(v):
        v = np.where(upper[:, :, None], v, 0.0)
        return v - np.swapaxes(v, 0, 1)

    v = antisym(project(flow))
    best = np.linalg.norm(residual_of(v), axis=-1).max()
    y, t = v, 1.0
    for _ in range(iters):
        res = residual_of(y)
        grad = 2.0 * weights[:, :, None] * (res[:, None, :] - res[None, :, :])
        v_next = antisym(project(y - step * grad))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = v_next + ((t - 1.0) / t_next) * (v_next - v)
        v, t = v_next, t_next
        best = min(best, np.linalg.norm(residual_of(v), axis=-1).max())
    return best


def subgradient_residual(problem, x, tol_tie, flow_iters=500):
    """
    Largest per-model stationarity violation under the best admissible subgradient.

    Models within ``tol_tie`` of each other (transitively) form tied groups whose
    pair subgradients are free in the unit ball; all other pairs contribute their
    unit direction. Smooth formulations report the largest gradient norm.
    """
    X = problem.check_stack(x)
    if problem.penalty.smooth:
        return float(np.linalg.norm(objective_gradient(problem, X), axis=-1).max())

    grads = problem.loss_factor * problem.stacked.block_grads(X)
    if problem.n_models == 1:
        return float(np.linalg.norm(grads, axis=-1).max())

    weights = 2.0 * problem.coupling
    labels = tie_components(X, tol_tie)
    same = labels[:, None] == labels[None, :]
    directions = np.where(same[:, :, None], 0.0, _unit_directions(X))
    required = grads + np.einsum("kl,kld->kd", weights, directions)

    worst = 0.0
    for comp in np.unique(labels):
        members = np.flatnonzero(labels == comp)
        if members.size == 1:
            worst = max(worst, float(np.linalg.norm(required[members[0]])))
            continue
        sub = weights[np.ix_(members, members)]
        worst = max(worst, float(_group_flow_residual(required[members], sub, flow_iters)))
    return worst


def clustered_reduction(problem, partition):
    """
    The K-model clustered problem for ``partition``.

    The losses stay the original f_i; cluster k's cost is n_k g_k, and pair
    weights become lambda * n_k * n_l.
    """
    if not isinstance(problem.penalty, SumOfNorms):
        raise ConfigError("clustered reduction requires a sum-of-norms problem")
    partition.check(problem.n_users)
    return FederationProblem(
        problem.losses,
        problem.dim_d,
        ClusteredSumOfNorms(problem.penalty.lam, partition),
        problem.convention,
    )


def lift(partition, W):
    """Per-user stack x_i = w_{k(i)}."""
    return np.asarray(W, dtype=float)[partition.labels()]
