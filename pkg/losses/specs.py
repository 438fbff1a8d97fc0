"""
Convex local costs f_i with exact gradients and curvature metadata.

Every loss is an immutable dataclass; arrays are copied and frozen at construction
so a loss can be shared freely between solvers and worker processes.
"""
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Optional

import numpy as np

from fusionproject.exceptions import ConfigError, DimensionMismatch

logger = logging.getLogger(__name__)


def frozen_array(values, ndim, what):
    arr = np.array(values, dtype=float)
    if ndim == 1 and arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != ndim or arr.size == 0:
        raise ConfigError(f"{what} must be a non-empty {ndim}-d array")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} must be finite")
    arr.setflags(write=False)
    return arr


def as_vector(x, dim, what="x"):
    """Return ``x`` as a float vector of length ``dim`` or raise DimensionMismatch."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.shape[0] != dim:
        got = arr.shape[0] if arr.ndim == 1 else arr.shape
        raise DimensionMismatch(dim, got, what)
    return arr


class LossSpec:
    """
    Base class of the local cost family.

    Attributes:
        kind (str): serialization tag.
        lipschitz_L (float): Lipschitz constant of the gradient.
        strong_mu (float | None): strong convexity modulus when known.
        strong_mu_is_global (bool): False when ``strong_mu`` only holds on a sub-block.
    """

    kind: ClassVar[str] = ""
    strong_mu_is_global: ClassVar[bool] = True

    @property
    def dim(self):
        raise NotImplementedError

    @property
    def lipschitz_L(self):
        raise NotImplementedError

    @property
    def strong_mu(self):
        return None

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def quadratic_form(self):
        """(scale, center) when f(x) = scale/2 ||x - center||^2 + const, else None."""
        return None

    def minimizer_hint(self):
        """A point near the minimizer, used to seed searches."""
        return np.zeros(self.dim)


@dataclass(frozen=True, eq=False)
class Quadratic(LossSpec):
    """f(x) = scale/2 * ||x - anchor||^2."""

    anchor: np.ndarray
    scale: float = 1.0

    kind: ClassVar[str] = "quadratic"

    def __post_init__(self):
        object.__setattr__(self, "anchor", frozen_array(self.anchor, 1, "anchor"))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigError("quadratic scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dim(self):
        return self.anchor.shape[0]

    @property
    def lipschitz_L(self):
        return self.scale

    @property
    def strong_mu(self):
        return self.scale

    def value(self, x):
        diff = x - self.anchor
        return 0.5 * self.scale * float(diff @ diff)

    def grad(self, x):
        return self.scale * (x - self.anchor)

    def quadratic_form(self):
        return self.scale, self.anchor

    def minimizer_hint(self):
        return np.array(self.anchor)


@dataclass(frozen=True, eq=False)
class SquaredHinge(LossSpec):
    """
    Regularized squared hinge loss of a linear classifier x = [w, b].

    f(x) = c/2 ||w||^2 + 1/m sum_j max(0, 1 - l_j (<w, a_j> - b))^2

    Attributes:
        features (ndarray): m x p matrix of feature vectors a_j.
        labels (ndarray): m labels in {-1, +1}.
        reg_c (float): ridge weight on w only.
    """

    features: np.ndarray
    labels: np.ndarray
    reg_c: float = 0.0
    rows: np.ndarray = field(init=False, repr=False)
    _lipschitz: float = field(init=False, repr=False)

    kind: ClassVar[str] = "squared_hinge"
    strong_mu_is_global: ClassVar[bool] = False

    def __post_init__(self):
        features = frozen_array(self.features, 2, "features")
        labels = np.array(self.labels, dtype=float).reshape(-1)
        if labels.shape[0] != features.shape[0]:
            raise DimensionMismatch(features.shape[0], labels.shape[0], "labels")
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ConfigError("labels must be -1 or +1")
        if not (np.isfinite(self.reg_c) and self.reg_c >= 0):
            raise ConfigError("reg_c must be nonnegative")
        labels.setflags(write=False)

        # augmented rows r_j = (l_j a_j, -l_j) so the margin is r_j . x
        rows = np.hstack([labels[:, None] * features, -labels[:, None]])
        rows.setflags(write=False)
        m = rows.shape[0]
        gram_top = np.linalg.eigvalsh(rows.T @ rows)[-1]

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "reg_c", float(self.reg_c))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_lipschitz", float(self.reg_c + 2.0 * gram_top / m))

    @property
    def dim(self):
        return self.rows.shape[1]

    @property
    def num_points(self):
        return self.rows.shape[0]

    @property
    def lipschitz_L(self):
        return self._lipschitz

    @property
    def strong_mu(self):
        # w-block only; the offset b is not regularized
        return self.reg_c if self.reg_c > 0 else None

    def value(self, x):
        slack = np.maximum(0.0, 1.0 - self.rows @ x)
        w = x[:-1]
        return 0.5 * self.reg_c * float(w @ w) + float(slack @ slack) / self.num_points

    def grad(self, x):
        slack = np.maximum(0.0, 1.0 - self.rows @ x)
        g = -(2.0 / self.num_points) * (self.rows.T @ slack)
        g[:-1] += self.reg_c * x[:-1]
        return g


@dataclass(frozen=True, eq=False)
class Huber(LossSpec):
    """Huber cost of the distance to ``anchor``: quadratic inside radius delta, linear outside."""

    anchor: np.ndarray
    delta: float = 1.0

    kind: ClassVar[str] = "huber"

    def __post_init__(self):
        object.__setattr__(self, "anchor", frozen_array(self.anchor, 1, "anchor"))
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ConfigError("huber delta must be positive")
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def dim(self):
        return self.anchor.shape[0]

    @property
    def lipschitz_L(self):
        return 1.0

    def value(self, x):
        r = float(np.linalg.norm(x - self.anchor))
        if r <= self.delta:
            return 0.5 * r * r
        return self.delta * (r - 0.5 * self.delta)

    def grad(self, x):
        diff = x - self.anchor
        r = float(np.linalg.norm(diff))
        if r <= self.delta:
            return diff
        return (self.delta / r) * diff

    def minimizer_hint(self):
        return np.array(self.anchor)


@dataclass(frozen=True, eq=False)
class AveragedLoss(LossSpec):
    """g(w) = 1/n sum_i f_i(w): the per-cluster cost of the clustered problem."""

    members: tuple

    kind: ClassVar[str] = "averaged"

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ConfigError("an averaged loss needs at least one member")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise DimensionMismatch(members[0].dim, sorted(dims), "averaged members")
        object.__setattr__(self, "members", members)

    @property
    def dim(self):
        return self.members[0].dim

    @property
    def lipschitz_L(self):
        return float(np.mean([m.lipschitz_L for m in self.members]))

    @property
    def strong_mu(self):
        mus = [m.strong_mu for m in self.members]
        if any(mu is None for mu in mus) or not self.strong_mu_is_global:
            return None
        return float(np.mean(mus))

    @property
    def strong_mu_is_global(self):
        return all(m.strong_mu_is_global for m in self.members)

    def value(self, x):
        return float(np.mean([m.value(x) for m in self.members]))

    def grad(self, x):
        return np.mean([m.grad(x) for m in self.members], axis=0)

    def quadratic_form(self):
        forms = [m.quadratic_form() for m in self.members]
        if any(f is None for f in forms):
            return None
        scales = np.array([s for s, _ in forms])
        centers = np.array([c for _, c in forms])
        return float(scales.mean()), scales @ centers / scales.sum()

    def minimizer_hint(self):
        return np.mean([m.minimizer_hint() for m in self.members], axis=0)


def loss_value(spec, x):
    """Exact value of ``spec`` at ``x``."""
    return spec.value(as_vector(x, spec.dim))


def loss_grad(spec, x):
    """Exact gradient of ``spec`` at ``x``."""
    return spec.grad(as_vector(x, spec.dim))


def _segment_rows(rows_per_member):
    offsets = np.concatenate([[0], np.cumsum(rows_per_member)[:-1]]).astype(int)
    return offsets


class StackedLosses:
    """
    Batched evaluation of a list of losses over a stack of block models.

    Member i is evaluated at the model of block ``assignment[i]``; per-block gradients
    are the sums of the member gradients assigned to the block. Every method accepts
    stacks with extra leading batch axes, shape (..., n_blocks, d).
    """

    def __init__(self, losses, assignment=None, n_blocks=None):
        self.losses = tuple(losses)
        if not self.losses:
            raise ConfigError("at least one loss is required")
        self.dim = self.losses[0].dim
        for loss in self.losses:
            if loss.dim != self.dim:
                raise DimensionMismatch(self.dim, loss.dim, "loss dimension")

        n = len(self.losses)
        if assignment is None:
            assignment = np.arange(n)
        self.assignment = np.asarray(assignment, dtype=int)
        if self.assignment.shape != (n,):
            raise DimensionMismatch(n, self.assignment.shape[0], "assignment")
        self.n_blocks = int(n_blocks if n_blocks is not None else self.assignment.max() + 1)
        if self.assignment.min() < 0 or self.assignment.max() >= self.n_blocks:
            raise ConfigError("assignment refers to a missing block")

        self._onehot = np.zeros((self.n_blocks, n))
        self._onehot[self.assignment, np.arange(n)] = 1.0
        self._group()

    def _group(self):
        quad, hinge, huber, other = [], [], [], []
        for i, loss in enumerate(self.losses):
            if type(loss) is Quadratic:
                quad.append(i)
            elif type(loss) is SquaredHinge:
                hinge.append(i)
            elif type(loss) is Huber:
                huber.append(i)
            else:
                other.append(i)

        self._quad = np.array(quad, dtype=int)
        if quad:
            self._quad_anchor = np.array([self.losses[i].anchor for i in quad])
            self._quad_scale = np.array([self.losses[i].scale for i in quad])

        self._hinge = np.array(hinge, dtype=int)
        if hinge:
            members = [self.losses[i] for i in hinge]
            counts = np.array([m.num_points for m in members])
            self._hinge_rows = np.vstack([m.rows for m in members])
            self._hinge_offsets = _segment_rows(counts)
            self._hinge_row_member = np.repeat(self._hinge, counts)
            self._hinge_row_block = self.assignment[self._hinge_row_member]
            self._hinge_row_weight = np.repeat(1.0 / counts, counts)
            self._hinge_reg = np.array([m.reg_c for m in members])

        self._huber = np.array(huber, dtype=int)
        if huber:
            self._huber_anchor = np.array([self.losses[i].anchor for i in huber])
            self._huber_delta = np.array([self.losses[i].delta for i in huber])

        self._other = other

    def points(self, X):
        return np.asarray(X, dtype=float)[..., self.assignment, :]

    def member_values(self, X):
        X = np.asarray(X, dtype=float)
        P = X[..., self.assignment, :]
        out = np.zeros(P.shape[:-1])
        if self._quad.size:
            diff = P[..., self._quad, :] - self._quad_anchor
            out[..., self._quad] = 0.5 * self._quad_scale * np.sum(diff * diff, axis=-1)
        if self._hinge.size:
            slack = self._hinge_slack(X)
            sums = np.add.reduceat(slack * slack * self._hinge_row_weight, self._hinge_offsets, axis=-1)
            w = P[..., self._hinge, :-1]
            out[..., self._hinge] = sums + 0.5 * self._hinge_reg * np.sum(w * w, axis=-1)
        if self._huber.size:
            diff = P[..., self._huber, :] - self._huber_anchor
            r = np.linalg.norm(diff, axis=-1)
            delta = self._huber_delta
            out[..., self._huber] = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
        for i in self._other:
            loss = self.losses[i]
            for idx in np.ndindex(P.shape[:-2]):
                out[idx + (i,)] = loss.value(P[idx + (i,)])
        return out

    def member_grads(self, X):
        X = np.asarray(X, dtype=float)
        P = X[..., self.assignment, :]
        out = np.zeros(P.shape)
        if self._quad.size:
            out[..., self._quad, :] = self._quad_scale[:, None] * (P[..., self._quad, :] - self._quad_anchor)
        if self._hinge.size:
            slack = self._hinge_slack(X)
            contrib = (-2.0 * self._hinge_row_weight * slack)[..., None] * self._hinge_rows
            g = np.add.reduceat(contrib, self._hinge_offsets, axis=-2)
            g[..., :-1] += self._hinge_reg[:, None] * P[..., self._hinge, :-1]
            out[..., self._hinge, :] = g
        if self._huber.size:
            diff = P[..., self._huber, :] - self._huber_anchor
            r = np.linalg.norm(diff, axis=-1, keepdims=True)
            delta = self._huber_delta[:, None]
            outside = delta / np.maximum(r, np.finfo(float).tiny)
            out[..., self._huber, :] = np.where(r <= delta, diff, outside * diff)
        for i in self._other:
            loss = self.losses[i]
            for idx in np.ndindex(P.shape[:-2]):
                out[idx + (i,)] = loss.grad(P[idx + (i,)])
        return out

    def _hinge_slack(self, X):
        at_rows = X[..., self._hinge_row_block, :]
        return np.maximum(0.0, 1.0 - np.sum(at_rows * self._hinge_rows, axis=-1))

    def value(self, X):
        """Sum of all member values."""
        return np.sum(self.member_values(X), axis=-1)

    def block_values(self, X):
        return self.member_values(X) @ self._onehot.T

    def block_grads(self, X):
        """Per-block gradient of the summed member losses, shape (..., n_blocks, d)."""
        return np.matmul(self._onehot, self.member_grads(X))

    @property
    def block_lipschitz(self):
        return self._onehot @ np.array([loss.lipschitz_L for loss in self.losses])

    @property
    def block_sizes(self):
        return self._onehot.sum(axis=1)

    def quadratic_blocks(self):
        """
        Per-block (scale, center) when every member is quadratic.

        The summed member losses of block k equal S_k/2 ||w - C_k||^2 + const.
        """
        forms = [loss.quadratic_form() for loss in self.losses]
        if any(f is None for f in forms):
            return None
        scales = np.array([s for s, _ in forms])
        centers = np.array([c for _, c in forms])
        block_scale = self._onehot @ scales
        block_center = (self._onehot @ (scales[:, None] * centers)) / block_scale[:, None]
        return block_scale, block_center

    def regroup(self, block_of_block):
        """Stack whose blocks merge the current blocks according to ``block_of_block``."""
        block_of_block = np.asarray(block_of_block, dtype=int)
        return StackedLosses(self.losses, block_of_block[self.assignment], int(block_of_block.max()) + 1)
